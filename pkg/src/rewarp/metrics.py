"""Evaluation protocol: valid-region PSNR, overlap buckets, failures, GT errors."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import Image, OverlapMask
from .errors import EmptyMask
from .homography import Homography, corner_displacement

PSNR_CAP = 99.0
MSE_FLOOR = 1e-10
BUCKETS = ("low", "mid", "high")


@dataclass
class Metrics:
    mpsnr: float | None = None
    overlap_ratio: float | None = None
    bucket: str | None = None
    corner_error: float | None = None
    epe: float | None = None
    failure: str | None = None
    time_ms: float | None = None

    def __post_init__(self):
        if (self.mpsnr is None) == (self.failure is None):
            raise ValueError("exactly one of mpsnr and failure must be set")

    def to_dict(self, timing: bool = True) -> dict:
        out = {"mpsnr": self.mpsnr, "overlap_ratio": self.overlap_ratio, "bucket": self.bucket}
        for key in ("corner_error", "epe", "failure"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        if timing and self.time_ms is not None:
            out["time_ms"] = self.time_ms
        return out


def mpsnr(a: Image, b: Image, valid: OverlapMask) -> float:
    """PSNR over ``valid`` pixels and all channels, peak 1, capped at 99 dB."""
    mask = valid.inside if isinstance(valid, OverlapMask) else np.asarray(valid, dtype=bool)
    if not mask.any():
        raise EmptyMask("mPSNR needs at least one valid pixel")
    diff = a.data[mask] - b.data[mask]
    mse = float(np.mean(diff * diff))
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def bucketize(ratio: float) -> str:
    if ratio <= 0.30:
        return "low"
    if ratio <= 0.60:
        return "mid"
    return "high"


def corner_error(h: Homography, gt_disp, width: int, height: int) -> float:
    """Mean distance between estimated and true displaced corners."""
    est = corner_displacement(h, width, height)
    return float(np.sqrt(((est - np.asarray(gt_disp)) ** 2).sum(axis=1)).mean())


def epe(mapping: np.ndarray, gt_mapping: np.ndarray, mask) -> float:
    """Mean endpoint error of two correspondence fields over ``mask``."""
    m = mask.inside if isinstance(mask, OverlapMask) else np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyMask("EPE needs at least one pixel")
    d = mapping[m] - gt_mapping[m]
    return float(np.sqrt((d * d).sum(axis=1)).mean())


def _mean(vals):
    return float(np.mean(vals)) if vals else None


def suite_report(results, timing: bool = True) -> dict:
    """``results`` are ``(id, Metrics)`` pairs; output follows the JSON report schema."""
    results = sorted(results, key=lambda r: r[0])
    rows = []
    for rid, m in results:
        row = {"id": rid, **m.to_dict(timing)}
        rows.append(row)
    ok = [m for _, m in results if m.failure is None]
    per_bucket = {}
    for b in BUCKETS:
        vals = [m.mpsnr for m in ok if m.bucket == b]
        per_bucket[b] = {"count": len(vals), "mpsnr": _mean(vals)}
    summary = {
        "per_bucket": per_bucket,
        "average": _mean([m.mpsnr for m in ok]),
        "failure_pct": 100.0 * (len(results) - len(ok)) / len(results) if results else 0.0,
    }
    if timing:
        summary["mean_time_ms"] = _mean([m.time_ms for _, m in results if m.time_ms is not None])
    return {"results": rows, "summary": summary}


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def _fmt(v, spec=".2f"):
    return "-" if v is None else format(v, spec)


def report_table(report: dict) -> str:
    s = report["summary"]
    pb = s["per_bucket"]
    head = ["", "low", "mid", "high", "average", "failures"]
    vals = ["mPSNR", _fmt(pb["low"]["mpsnr"]), _fmt(pb["mid"]["mpsnr"]), _fmt(pb["high"]["mpsnr"]),
            _fmt(s["average"]), f"{s['failure_pct']:.1f}%"]
    if "mean_time_ms" in s:
        head.append("time_ms")
        vals.append(_fmt(s["mean_time_ms"], ".1f"))
    widths = [max(len(a), len(b)) for a, b in zip(head, vals)]
    line = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    return line(head) + "\n" + line(vals) + "\n"
