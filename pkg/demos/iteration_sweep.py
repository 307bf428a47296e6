"""
How many global iterations are enough?
======================================

Sweep the number of global iterations over a small stratified suite and
watch the mean mPSNR level off. The same sweep is available from the command
line as ``rewarp eval manifest.json --sweep iters_h=1,3,6``.
"""
from rewarp import AlignConfig, stitch
from rewarp.metrics import report_table, suite_report
from rewarp.synth import generate_pair, generate_suite

# Two pairs per overlap bucket, each with a random 4 to 8 px local bump.
specs = generate_suite(seed=11, counts=(2, 2, 2), tps_amplitude=(4.0, 8.0))
pairs = [(s.id, *generate_pair(s)[:2]) for s in specs]

for k in (1, 3, 6):
    cfg = AlignConfig(iters_h=k)
    results = [(pid, stitch(ref, tgt, cfg).metrics) for pid, ref, tgt in pairs]
    print(f"iters_h = {k}")
    print(report_table(suite_report(results, timing=False)))
