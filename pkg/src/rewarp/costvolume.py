"""All-pairs normalized cross-correlation volume at 1/8 resolution.

Each reference cell is described by a mean/variance-normalized 7x7 patch of
the 8x-downsampled luma plane and correlated against every target cell.
Coarser levels average-pool the target axes, as in recurrent flow lookups.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from numpy.lib.stride_tricks import sliding_window_view

from .core import Grid, Image
from .errors import ImageTooSmall

CELL = 8
PATCH = 7
MIN_SIZE = 64
_VAR_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class CostVolume:
    """``levels[l]`` has shape ``(n_ref_cells, th_l, tw_l)``; ref cells are row-major."""

    levels: list
    ref_cells: tuple  # (rows, cols)
    tgt_cells: tuple
    degenerate: np.ndarray  # (n_ref_cells,) zero-variance reference descriptors

    def cell_centers(self) -> Grid:
        """Pixel coordinates of reference cell centers."""
        rows, cols = self.ref_cells
        return cell_center_grid(cols, rows)


def cell_center_grid(cols: int, rows: int) -> Grid:
    xs, ys = np.meshgrid(np.arange(cols) * CELL + (CELL - 1) / 2.0,
                         np.arange(rows) * CELL + (CELL - 1) / 2.0)
    return Grid(np.stack([xs, ys], axis=-1))


def pixel_to_cell(x):
    return (np.asarray(x, dtype=np.float64) - (CELL - 1) / 2.0) / CELL


def _downsample(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    r, c = h // CELL, w // CELL
    return plane[:r * CELL, :c * CELL].reshape(r, CELL, c, CELL).mean(axis=(1, 3))


def descriptors(plane: np.ndarray):
    """Unit-norm zero-mean patch per 1/8 cell; zero vectors where the patch is flat."""
    small = _downsample(plane)
    pad = PATCH // 2
    padded = np.pad(small, pad, mode="edge")
    win = sliding_window_view(padded, (PATCH, PATCH)).reshape(small.shape[0], small.shape[1], -1)
    win = win - win.mean(axis=2, keepdims=True)
    norm = np.sqrt((win ** 2).sum(axis=2, keepdims=True))
    flat = norm[..., 0] <= np.sqrt(_VAR_EPS * PATCH * PATCH)
    desc = np.where(flat[..., None], 0.0, win / np.where(norm > 0, norm, 1.0))
    return desc.reshape(-1, PATCH * PATCH), small.shape, flat.ravel()


def _pool(corr: np.ndarray) -> np.ndarray:
    n, h, w = corr.shape
    c = corr[:, :h // 2 * 2, :w // 2 * 2]
    return (c[:, 0::2, 0::2] + c[:, 0::2, 1::2] + c[:, 1::2, 0::2] + c[:, 1::2, 1::2]) * 0.25


def build_cost_volume(ref: Image, tgt: Image, levels: int = 2) -> CostVolume:
    for im in (ref, tgt):
        if im.width < MIN_SIZE or im.height < MIN_SIZE:
            raise ImageTooSmall(f"images must be at least {MIN_SIZE}x{MIN_SIZE}")
    dr, rshape, flat = descriptors(ref.gray())
    dt, tshape, _ = descriptors(tgt.gray())
    dr = dr.astype(np.float32)
    dt = dt.astype(np.float32).reshape(tshape[0], tshape[1], -1)
    pyramid = []
    # correlation is linear in the target descriptor, so pooling the target
    # axes equals correlating against 2x2-averaged descriptors
    for _ in range(levels):
        if pyramid and min(dt.shape[:2]) < 1:
            break
        corr = dr @ dt.reshape(-1, dt.shape[2]).T
        np.clip(corr, -1.0, 1.0, out=corr)
        pyramid.append(corr.reshape(len(dr), dt.shape[0], dt.shape[1]))
        dt = _pool(dt.transpose(2, 0, 1)).transpose(1, 2, 0)
    return CostVolume(pyramid, rshape, tshape, flat)


@dataclass(frozen=True, eq=False)
class CostSlice:
    """Correlation windows around the current correspondences.

    ``values[c, l, k]`` is the correlation of reference cell ``c`` at level
    ``l`` for window offset ``offsets[k]`` (in level cells); ``inside`` flags
    samples that fell within the target support.
    """

    values: np.ndarray
    inside: np.ndarray
    offsets: np.ndarray
    radius: int


def window_offsets(radius: int) -> np.ndarray:
    """Offsets ``(dx, dy)`` ordered by magnitude, then dy, then dx.

    Taking the first maximum over this order implements the argmax tie-break.
    """
    r = np.arange(-radius, radius + 1)
    dx, dy = np.meshgrid(r, r)
    dx, dy = dx.ravel(), dy.ravel()
    order = np.lexsort((dx, dy, dx * dx + dy * dy))
    return np.stack([dx[order], dy[order]], axis=1)


@njit(cache=True)
def _sample_windows(corr, cx, cy, offs, vals, inside):
    n, h, w = corr.shape
    for c in range(n):
        for k in range(offs.shape[0]):
            x = cx[c] + offs[k, 0]
            y = cy[c] + offs[k, 1]
            if not (x >= 0.0 and x <= w - 1 and y >= 0.0 and y <= h - 1):
                vals[c, k] = 0.0
                inside[c, k] = False
                continue
            inside[c, k] = True
            x0 = min(int(np.floor(x)), max(w - 2, 0))
            y0 = min(int(np.floor(y)), max(h - 2, 0))
            x1 = min(x0 + 1, w - 1)
            y1 = min(y0 + 1, h - 1)
            fx = x - x0
            fy = y - y0
            vals[c, k] = (corr[c, y0, x0] * (1 - fx) * (1 - fy) + corr[c, y0, x1] * fx * (1 - fy)
                          + corr[c, y1, x0] * (1 - fx) * fy + corr[c, y1, x1] * fx * fy)


def lookup(cv: CostVolume, grid: Grid, radius: int = 4) -> CostSlice:
    """Gather windows centred on ``grid`` (target pixel position of every reference cell)."""
    rows, cols = cv.ref_cells
    if grid.coords.shape[:2] != (rows, cols):
        raise ValueError("lookup grid must have one entry per reference cell")
    offs = window_offsets(radius)
    pts = grid.points()
    c0x, c0y = pixel_to_cell(pts[:, 0]), pixel_to_cell(pts[:, 1])
    n = len(pts)
    vals, ins = [], []
    for lvl, corr in enumerate(cv.levels):
        s = 2.0 ** lvl
        cx = np.ascontiguousarray((c0x + 0.5) / s - 0.5)
        cy = np.ascontiguousarray((c0y + 0.5) / s - 0.5)
        v = np.empty((n, len(offs)))
        i = np.empty((n, len(offs)), dtype=np.bool_)
        _sample_windows(corr, cx, cy, offs.astype(np.float64), v, i)
        vals.append(v)
        ins.append(i)
    return CostSlice(np.stack(vals, axis=1), np.stack(ins, axis=1), offs, radius)


def _parabola(vm, v0, vp):
    den = vm - 2.0 * v0 + vp
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(den < 0, 0.5 * (vm - vp) / den, 0.0)
    return np.clip(d, -0.5, 0.5)


def slice_flow(cs: CostSlice, min_corr: float = 0.5):
    """Best offset per cell in pixels plus its correlation and a usability flag.

    Level 0 is preferred; when its peak sits on the window rim the coarser
    level decides, since the true match may lie outside the fine window.
    """
    r = cs.radius
    offs = cs.offsets
    n = cs.values.shape[0]
    v0 = np.where(cs.inside[:, 0], cs.values[:, 0], -np.inf)
    k0 = np.argmax(v0, axis=1)
    best0 = v0[np.arange(n), k0]
    off0 = offs[k0].astype(np.float64)
    rim = (np.abs(off0) == r).any(axis=1)

    # sub-cell refinement along x and y on the level-0 window
    side = 2 * r + 1
    lut = np.full((side, side), -1, dtype=np.intp)
    lut[offs[:, 1] + r, offs[:, 0] + r] = np.arange(len(offs))
    ix = (off0[:, 0] + r).astype(np.intp)
    iy = (off0[:, 1] + r).astype(np.intp)
    interior = ~rim
    sub = np.zeros((n, 2))
    if interior.any():
        rows = np.flatnonzero(interior)
        vals = cs.values[rows, 0]
        xm = vals[np.arange(len(rows)), lut[iy[rows], ix[rows] - 1]]
        xp = vals[np.arange(len(rows)), lut[iy[rows], ix[rows] + 1]]
        ym = vals[np.arange(len(rows)), lut[iy[rows] - 1, ix[rows]]]
        yp = vals[np.arange(len(rows)), lut[iy[rows] + 1, ix[rows]]]
        c = best0[rows]
        sub[rows, 0] = _parabola(xm, c, xp)
        sub[rows, 1] = _parabola(ym, c, yp)
    flow = (off0 + sub) * CELL
    conf = best0.copy()

    if cs.values.shape[1] > 1:
        v1 = np.where(cs.inside[:, 1], cs.values[:, 1], -np.inf)
        k1 = np.argmax(v1, axis=1)
        best1 = v1[np.arange(n), k1]
        use1 = rim & (best1 > best0)
        flow[use1] = offs[k1[use1]] * (2 * CELL)
        conf[use1] = best1[use1]
    usable = np.isfinite(conf) & (conf >= min_corr)
    return flow, conf, usable


def global_matches(cv: CostVolume):
    """Per reference cell: best target cell over the whole level-0 map.

    Returns ``(displacement_px, corr)``; displacements include a sub-cell
    parabola refinement.
    """
    corr = cv.levels[0]
    n, h, w = corr.shape
    flat = corr.reshape(n, -1)
    k = np.argmax(flat, axis=1)
    best = flat[np.arange(n), k]
    ty, tx = np.divmod(k, w)
    sub = np.zeros((n, 2))
    okx = (tx > 0) & (tx < w - 1)
    oky = (ty > 0) & (ty < h - 1)
    idx = np.arange(n)
    sub[okx, 0] = _parabola(flat[idx[okx], k[okx] - 1], best[okx], flat[idx[okx], k[okx] + 1])
    sub[oky, 1] = _parabola(flat[idx[oky], k[oky] - w], best[oky], flat[idx[oky], k[oky] + w])
    rows, cols = cv.ref_cells
    ry, rx = np.divmod(np.arange(n), cols)
    disp = (np.stack([tx - rx, ty - ry], axis=1) + sub) * CELL
    best = np.where(cv.degenerate, 0.0, best)
    return disp, best
