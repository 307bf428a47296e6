"""Parallax-tolerant image stitching with a recurrent homography + TPS warp."""
from .align import AlignConfig, AlignTrace, StitchResult, multi_stitch, stitch
from .core import Grid, Image, OverlapMask, make_uniform_grid, overlap_mask
from .errors import NoOverlap, RewarpError, StitchFailure, UnreasonableWarp
from .homography import Homography, apply, dlt_solve, invert
from .metrics import Metrics, bucketize, mpsnr, suite_report
from .tps import ControlGrid, WarpField, eval_warpfield, solve_tps

__all__ = [
    "AlignConfig", "AlignTrace", "StitchResult", "multi_stitch", "stitch",
    "Grid", "Image", "OverlapMask", "make_uniform_grid", "overlap_mask",
    "NoOverlap", "RewarpError", "StitchFailure", "UnreasonableWarp",
    "Homography", "apply", "dlt_solve", "invert",
    "Metrics", "bucketize", "mpsnr", "suite_report",
    "ControlGrid", "WarpField", "eval_warpfield", "solve_tps",
]
