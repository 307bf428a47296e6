"""Command-line interface: ``rewarp {stitch,multistitch,synth,eval}``.

Exit codes: 0 success, 1 usage or I/O error, 2 stitching failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .align import AlignConfig, multi_stitch, stitch

log = logging.getLogger("rewarp")

EXIT_OK, EXIT_ERROR, EXIT_FAILURE = 0, 1, 2

# config-file keys that are not AlignConfig fields
_EXTRA_KEYS = {"blend": str, "seed": int, "verbose": int}
_ALIASES = {"grid": "grid_n", "k": "iters_h", "n": "iters_t", "blend_mode": "blend",
            "control_grid_n": "grid_n"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _field_types() -> dict:
    types = {f.name: type(f.default) for f in dataclasses.fields(AlignConfig)}
    types.update(_EXTRA_KEYS)
    return types


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    types = _field_types()
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key.replace("-", "_"), key.replace("-", "_"))
        if key not in types:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = types[key](value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {value!r}") from exc
    return out


def _add_align_flags(p):
    g = p.add_argument_group("alignment")
    g.add_argument("--config", help="key=value file; flags override it")
    g.add_argument("--iters-h", type=int, dest="iters_h", help="H-stage iterations (default 6)")
    g.add_argument("--iters-t", type=int, dest="iters_t", help="T-stage iterations (default 3)")
    g.add_argument("--alpha", type=float, help="sequence-loss weight (default 0.85)")
    g.add_argument("--grid", type=int, dest="grid_n", help="control grid side (default 12)")
    g.add_argument("--lambda-local", type=float, dest="lambda_local",
                   help="scale on local updates (default 1.0)")
    g.add_argument("--area-cap", type=float, dest="area_cap",
                   help="max canvas area as a multiple of the input (default 16)")
    g.add_argument("--warp", choices=["h", "h+tps"], help="warp model (default h+tps)")
    g.add_argument("--blend", choices=["average", "linear"], help="blend mode (default average)")
    g.add_argument("--seed", type=int, help="seed for anything random (default 0)")
    p.add_argument("-v", "--verbose", action="count", default=None)


def resolve(args) -> tuple[AlignConfig, dict]:
    """Merge defaults, the config file and flags (in that order of precedence)."""
    values = read_config(args.config) if getattr(args, "config", None) else {}
    for key in list(_field_types()):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    extra = {"blend": values.pop("blend", "average"), "seed": values.pop("seed", 0),
             "verbose": values.pop("verbose", 0)}
    try:
        cfg = AlignConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg, extra


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _status(result) -> dict:
    out = result.metrics.to_dict(timing=False)
    if result.homography is not None:
        out["homography"] = result.homography.m.tolist()
    return out


# ---------------------------------------------------------------- commands

def cmd_stitch(args) -> int:
    from .io import read_image, write_image

    cfg, extra = resolve(args)
    ref, tgt = read_image(args.ref), read_image(args.tgt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = stitch(ref, tgt, cfg, extra["blend"])
    if args.gt:
        from .evaluate import attach_ground_truth
        from .synth import SceneSpec

        doc = json.loads(Path(args.gt).read_text())
        attach_ground_truth(res, SceneSpec.from_dict(doc.get("spec", doc)))
    _write_json(out / "metrics.json", _status(res))
    if args.trace:
        _write_json(out / "trace.json", res.trace.to_dict())
    if res.failure is not None:
        log.warning("stitching failed: %s", res.failure)
        return EXIT_FAILURE
    write_image(out / f"stitched.{args.format}", res.image)
    if args.trace:
        write_image(out / f"warped.{args.format}", res.warped)
    log.info("mPSNR %.2f dB", res.metrics.mpsnr)
    return EXIT_OK


def cmd_multistitch(args) -> int:
    from .io import read_image, write_image

    cfg, extra = resolve(args)
    ref = read_image(args.ref)
    targets = [read_image(p) for p in args.targets]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = multi_stitch(ref, targets, cfg, extra["blend"])
    status = [{"target": str(p), **_status(r)} for p, r in zip(args.targets, res.results)]
    _write_json(out / "metrics.json", {"targets": status, "failures": res.failures})
    if res.image is None:
        return EXIT_FAILURE
    write_image(out / f"stitched.{args.format}", res.image)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import export_suite, generate_suite

    seed = args.seed if args.seed is not None else 0
    specs = generate_suite(seed, tuple(args.counts), args.size[0], args.size[1],
                           tps_amplitude=args.tps, n_layers=args.layers)
    export_suite(specs, args.out, args.format)
    log.info("wrote %d pairs to %s", len(specs), args.out)
    return EXIT_OK


def _parse_sweep(text: str):
    key, _, vals = text.partition("=")
    key = _ALIASES.get(key.replace("-", "_"), key.replace("-", "_"))
    if key not in _field_types() or not vals:
        raise UsageError(f"bad sweep {text!r}; expected e.g. iters_h=1,3,6")
    typ = _field_types()[key]
    return key, [typ(v) for v in vals.split(",")]


def cmd_eval(args) -> int:
    from .evaluate import evaluate_manifest, load_manifest, worker_count
    from .metrics import report_json, report_table

    cfg, extra = resolve(args)
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    workers = worker_count(args.workers)
    configs = [({}, cfg)]
    if args.sweep:
        key, vals = _parse_sweep(args.sweep)
        try:
            configs = [({key: v}, dataclasses.replace(cfg, **{key: v})) for v in vals]
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    reports = []
    for override, c in configs:
        rep = evaluate_manifest(manifest, manifest_path.parent, c, extra["blend"], workers,
                                timing=args.timing)
        reports.append((override, rep))
    if args.sweep:
        doc = {"sweep": [{"override": o, "report": r} for o, r in reports]}
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
        table = "".join(f"{json.dumps(o, sort_keys=True)}\n{report_table(r)}" for o, r in reports)
    else:
        text = report_json(reports[0][1])
        table = report_table(reports[0][1])
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    sys.stderr.write(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rewarp", description="Parallax-tolerant stitching with an elastic warp.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("stitch", help="stitch a target image onto a reference")
    s.add_argument("ref")
    s.add_argument("tgt")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--trace", action="store_true", help="also write trace.json and the warped target")
    s.add_argument("--format", choices=["png", "ppm"], default="png")
    s.add_argument("--gt", help="scene spec JSON (or a manifest entry) to report GT errors")
    _add_align_flags(s)
    s.set_defaults(func=cmd_stitch)

    m = sub.add_parser("multistitch", help="stitch several targets onto one reference")
    m.add_argument("ref")
    m.add_argument("targets", nargs="+")
    m.add_argument("--out", required=True, help="output directory")
    m.add_argument("--format", choices=["png", "ppm"], default="png")
    _add_align_flags(m)
    m.set_defaults(func=cmd_multistitch)

    y = sub.add_parser("synth", help="write a synthetic suite with ground truth")
    y.add_argument("--out", required=True, help="output directory")
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--counts", type=int, nargs=3, default=[1, 1, 1], metavar=("LOW", "MID", "HIGH"))
    y.add_argument("--size", type=int, nargs=2, default=[256, 256], metavar=("W", "H"))
    y.add_argument("--tps", type=float, default=None, help="peak TPS bump amplitude in px")
    y.add_argument("--layers", type=int, default=0, help="off-plane sprites per scene")
    y.add_argument("--format", choices=["png", "ppm"], default="ppm")
    y.add_argument("-v", "--verbose", action="count", default=None)
    y.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="evaluate a synthetic suite")
    e.add_argument("manifest")
    e.add_argument("--out", help="report path (default stdout)")
    e.add_argument("--workers", type=int, default=None,
                   help="worker processes (default: CPU count, capped by REWARP_THREADS)")
    e.add_argument("--sweep", help="comma list for one setting, e.g. iters_h=1,3,6")
    e.add_argument("--timing", action="store_true", help="include wall times in the report")
    _add_align_flags(e)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        level = logging.WARNING - 10 * (args.verbose or 0)
        logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"rewarp: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"rewarp: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
