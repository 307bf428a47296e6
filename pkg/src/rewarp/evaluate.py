"""Suite evaluation over a synth manifest, optionally across worker processes.

Every worker pins BLAS to one thread, so results do not depend on the worker
count and reports are byte-identical.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context
from pathlib import Path

from threadpoolctl import threadpool_limits

from .align import AlignConfig, mapping, stitch
from .metrics import corner_error, epe, suite_report
from .synth import SceneSpec, field_checksum, ground_truth

_REQUIRED = ("id", "ref", "tgt", "spec")


def load_manifest(path) -> dict:
    """Parse and validate ``manifest.json``; raises ``ValueError`` when malformed."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("pairs"), list):
        raise ValueError(f"{path}: missing 'pairs' list")
    for i, entry in enumerate(doc["pairs"]):
        if not isinstance(entry, dict) or any(k not in entry for k in _REQUIRED):
            raise ValueError(f"{path}: pair {i} lacks one of {_REQUIRED}")
    return doc


def worker_count(requested=None) -> int:
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("REWARP_THREADS")
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def attach_ground_truth(result, spec: SceneSpec, checksum: str | None = None) -> None:
    """Fill ``corner_error`` and ``epe`` of a successful result from a scene spec."""
    if result.failure is not None:
        return
    gt = ground_truth(spec)
    if checksum is not None and field_checksum(gt) != checksum:
        raise ValueError(f"{spec.id}: ground truth does not match the manifest checksum")
    m = result.metrics
    m.corner_error = corner_error(result.homography, gt.corner_disp, spec.width, spec.height)
    if gt.overlap.pixel_count:
        m.epe = epe(mapping(result, spec.width, spec.height), gt.mapping, gt.overlap)


def evaluate_entry(entry: dict, root, cfg: AlignConfig, blend: str = "average"):
    """Stitch one manifest pair and attach ground-truth errors; returns ``(id, Metrics)``."""
    from .io import read_image

    root = Path(root)
    ref = read_image(root / entry["ref"])
    tgt = read_image(root / entry["tgt"])
    with threadpool_limits(limits=1):
        res = stitch(ref, tgt, cfg, blend)
    attach_ground_truth(res, SceneSpec.from_dict(entry["spec"]), entry.get("gt_field_sha256"))
    return entry["id"], res.metrics


def _job(args):
    return evaluate_entry(*args)


def _init_worker():
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = "1"


def evaluate_manifest(manifest: dict, root, cfg: AlignConfig, blend: str = "average",
                      workers: int = 1, timing: bool = False) -> dict:
    jobs = [(entry, str(root), cfg, blend) for entry in manifest["pairs"]]
    if workers <= 1:
        results = [_job(j) for j in jobs]
    else:
        ctx = get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_init_worker) as ex:
            results = list(ex.map(_job, jobs))
    return suite_report(results, timing=timing)
