"""
Stitching three views
=====================

Each target is aligned to the reference independently. The results are then
composited on one canvas. A target that cannot be aligned is reported and
left out.
"""
import sys
from pathlib import Path

from rewarp import multi_stitch
from rewarp.io import write_image
from rewarp.synth import disjoint_scene, generate_pair, multiview_scenes

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

# Left and right views of the same plane, each offset by 90 px.
left_spec, right_spec = multiview_scenes(seed=9, offsets=[(-90.0, 0.0), (90.0, 0.0)])
ref, left, _ = generate_pair(left_spec)
_, right, _ = generate_pair(right_spec)

# A third target shows a part of the plane the reference never sees.
_, stray, _ = generate_pair(disjoint_scene(4))

result = multi_stitch(ref, [left, right, stray])
for name, r in zip(("left", "right", "stray"), result.results):
    print(f"{name:6s} {r.failure or f'{r.metrics.mpsnr:.2f} dB'}")
print(f"canvas {result.image.width}x{result.image.height}, {result.failures} failure(s)")
write_image(out / "panorama.png", result.image)
