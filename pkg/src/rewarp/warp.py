"""Backward bilinear warping, canvas sizing and two-layer blending."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .core import Grid, Image, make_uniform_grid
from .errors import UnreasonableWarp
from .homography import Homography, invert

DEFAULT_AREA_CAP = 16.0


@njit(cache=True)
def _bilinear_kernel(plane, xs, ys, out, ok):
    h, w, c = plane.shape
    for i in range(xs.shape[0]):
        x = xs[i]
        y = ys[i]
        if not (x >= 0.0 and x <= w - 1 and y >= 0.0 and y <= h - 1):
            ok[i] = False
            for k in range(c):
                out[i, k] = 0.0
            continue
        ok[i] = True
        x0 = min(int(np.floor(x)), max(w - 2, 0))
        y0 = min(int(np.floor(y)), max(h - 2, 0))
        x1 = min(x0 + 1, w - 1)
        y1 = min(y0 + 1, h - 1)
        fx = x - x0
        fy = y - y0
        for k in range(c):
            top = plane[y0, x0, k] * (1.0 - fx) + plane[y0, x1, k] * fx
            bot = plane[y1, x0, k] * (1.0 - fx) + plane[y1, x1, k] * fx
            out[i, k] = top * (1.0 - fy) + bot * fy


def bilinear(plane: np.ndarray, pts: np.ndarray):
    """Sample ``plane`` (h, w[, c]) at ``pts`` (..., 2).

    Returns ``(values, ok)`` where ``ok`` marks points inside
    ``[0, w-1] x [0, h-1]``; values at other points are 0.
    """
    flat_plane = plane if plane.ndim == 3 else plane[..., None]
    flat_plane = np.ascontiguousarray(flat_plane, dtype=np.float64)
    lead = pts.shape[:-1]
    p = pts.reshape(-1, 2)
    xs = np.ascontiguousarray(p[:, 0], dtype=np.float64)
    ys = np.ascontiguousarray(p[:, 1], dtype=np.float64)
    c = flat_plane.shape[2]
    out = np.empty((len(xs), c))
    ok = np.empty(len(xs), dtype=np.bool_)
    _bilinear_kernel(flat_plane, xs, ys, out, ok)
    vals = out.reshape(lead + (c,)) if plane.ndim == 3 else out.reshape(lead)
    return vals, ok.reshape(lead)


def _support_valid(valid: np.ndarray, pts: np.ndarray, ok: np.ndarray) -> np.ndarray:
    """Every neighbour carrying nonzero bilinear weight must be valid."""
    if valid.all():
        return ok
    h, w = valid.shape
    xs = np.where(ok, pts[..., 0], 0.0)
    ys = np.where(ok, pts[..., 1], 0.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    good = valid[y0, x0]
    good &= (fx == 0) | valid[y0, x1]
    good &= (fy == 0) | valid[y1, x0]
    good &= (fx == 0) | (fy == 0) | valid[y1, x1]
    return ok & good


def warp_image(img: Image, grid: Grid) -> Image:
    """``out(p) = img[grid(p)]`` by bilinear interpolation; outside samples are invalid."""
    pts = grid.coords
    vals, ok = bilinear(img.data, pts)
    valid = _support_valid(img.valid, pts, ok)
    vals[~valid] = 0.0
    return Image(np.clip(vals, 0.0, 1.0), valid)


def compose_grid(h: Homography, field, width: int, height: int, origin=(0, 0)) -> Grid:
    """Sampling grid ``H(x + F(x))`` for the reference-frame pixels of a frame.

    ``origin`` is the reference coordinate of the frame's pixel (0, 0); the
    field is zero outside its own footprint.
    """
    base = make_uniform_grid(width, height).coords + np.asarray(origin, dtype=np.float64)
    if field is not None:
        base = base + field.dense(width, height, origin)
    return Grid(h.project(base))


@dataclass
class Canvas:
    """Stitched frame; canvas pixel ``c`` shows reference coordinate ``c - offset``."""

    width: int
    height: int
    offset: tuple
    layers: list = field(default_factory=list)


def _footprint_bounds(ref_size, warps, area_cap: float):
    rw, rh = ref_size
    xs = [0.0, rw - 1.0]
    ys = [0.0, rh - 1.0]
    for tgt, h, fld in warps:
        inv = invert(h)
        tw, th = tgt.width, tgt.height
        quad = np.array([[0.0, 0.0], [tw - 1.0, 0.0], [0.0, th - 1.0], [tw - 1.0, th - 1.0]])
        m = inv.m
        den = quad @ m[2, :2] + m[2, 2]
        # corners at or behind the horizon project to infinity
        if np.any(den <= 1e-9):
            raise UnreasonableWarp("target corners map past the horizon")
        pts = inv.project(quad)
        pad = 0.0 if fld is None else fld.max_magnitude()
        xs += [pts[:, 0].min() - pad, pts[:, 0].max() + pad]
        ys += [pts[:, 1].min() - pad, pts[:, 1].max() + pad]
    # tolerance keeps round-off from adding a spurious row or column
    x0, x1 = np.floor(min(xs) + 1e-6), np.ceil(max(xs) - 1e-6)
    y0, y1 = np.floor(min(ys) + 1e-6), np.ceil(max(ys) - 1e-6)
    width = int(x1 - x0) + 1
    height = int(y1 - y0) + 1
    if width * height > area_cap * rw * rh:
        raise UnreasonableWarp(
            f"canvas {width}x{height} exceeds {area_cap:g}x the input area"
        )
    return width, height, (int(-x0), int(-y0))


def build_canvas(ref: Image, warps, area_cap: float = DEFAULT_AREA_CAP) -> Canvas:
    """Canvas holding ``ref`` plus every ``(tgt, homography, field)`` warp as a layer."""
    width, height, offset = _footprint_bounds(ref.size, warps, area_cap)
    ox, oy = offset
    data = np.zeros((height, width, ref.channels))
    valid = np.zeros((height, width), dtype=bool)
    data[oy:oy + ref.height, ox:ox + ref.width] = ref.data
    valid[oy:oy + ref.height, ox:ox + ref.width] = ref.valid
    layers = [Image(data, valid)]
    for tgt, h, fld in warps:
        grid = compose_grid(h, fld, width, height, origin=(-ox, -oy))
        layers.append(warp_image(tgt, grid))
    return Canvas(width, height, offset, layers)


def compute_canvas(ref: Image, tgt: Image, h: Homography, field=None,
                   area_cap: float = DEFAULT_AREA_CAP) -> Canvas:
    return build_canvas(ref, [(tgt, h, field)], area_cap)


def _linear_weight(va: np.ndarray, vb: np.ndarray) -> np.ndarray:
    """Weight of layer B ramping 0 -> 1 across the overlap along its longer side."""
    both = va & vb
    rows = np.flatnonzero(both.any(axis=1))
    cols = np.flatnonzero(both.any(axis=0))
    x0, x1, y0, y1 = cols[0], cols[-1], rows[0], rows[-1]
    h, w = va.shape
    if x1 - x0 >= y1 - y0:
        axis, lo, hi, n = 1, x0, x1, w
    else:
        axis, lo, hi, n = 0, y0, y1, h
    coord = np.arange(n, dtype=np.float64)
    ramp = (coord - lo) / (hi - lo) if hi > lo else np.full(n, 0.5)
    # B's weight grows toward the side where B's footprint lies
    ca = np.nonzero(va)[axis].mean()
    cb = np.nonzero(vb)[axis].mean()
    if cb < ca:
        ramp = 1.0 - ramp
    ramp = np.clip(ramp, 0.0, 1.0)
    return ramp[None, :] if axis == 1 else ramp[:, None]


def blend(canvas: Canvas, mode: str = "average") -> Image:
    if len(canvas.layers) != 2:
        raise ValueError("blend expects exactly two layers")
    return blend_pair(canvas.layers[0], canvas.layers[1], mode)


def blend_pair(a: Image, b: Image, mode: str = "average") -> Image:
    if mode not in ("average", "linear"):
        raise ValueError(f"unknown blend mode {mode!r}")
    va, vb = a.valid, b.valid
    both = va & vb
    out = np.where(va[..., None], a.data, 0.0) + np.where((vb & ~va)[..., None], b.data, 0.0)
    if both.any():
        if mode == "average":
            wb = np.full(va.shape, 0.5)
        else:
            wb = np.broadcast_to(_linear_weight(va, vb), va.shape)
        mixed = a.data * (1.0 - wb)[..., None] + b.data * wb[..., None]
        out = np.where(both[..., None], mixed, out)
    return Image(np.clip(out, 0.0, 1.0), va | vb)
