"""Thin-plate splines on a square control grid with a zero-displacement edge ring.

The linear system is assembled in coordinates normalized to the control
region (pixel-scale kernels push the condition number of L past 1e14) and the
resulting coefficients are converted back to pixel units, so
:class:`TpsCoefficients` evaluates the spline directly on pixel coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg
from numba import njit

from .core import Grid
from .errors import DuplicateControlPoints, SingularL

DEFAULT_N = 12
_CHUNK = 8192


def rbf(z):
    """``B(z) = z^2 log z^2`` with the limit value 0 at z = 0."""
    return _rbf_sq(np.square(np.asarray(z, dtype=np.float64)))


def _rbf_sq(z2):
    z2 = np.asarray(z2, dtype=np.float64)
    # 0 * log(tiny) == 0, which is the limit value at the centre
    return z2 * np.log(np.maximum(z2, 1e-300))


@njit(cache=True)
def _sqdist(pts, ctrl):
    n, m = pts.shape[0], ctrl.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            dx = pts[i, 0] - ctrl[j, 0]
            dy = pts[i, 1] - ctrl[j, 1]
            out[i, j] = dx * dx + dy * dy
    return out


def control_points(n: int, region) -> np.ndarray:
    """Row-major ``(n*n, 2)`` lattice spanning ``region`` with both endpoints included."""
    x0, y0, x1, y1 = region
    xs = np.linspace(x0, x1, n)
    ys = np.linspace(y0, y1, n)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def apply_dirichlet(raw) -> np.ndarray:
    """Embed ``(n-2, n-2, 2)`` interior displacements in an ``(n, n, 2)`` zero-edged grid."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[0] != raw.shape[1] or raw.shape[2] != 2:
        raise ValueError(f"expected (m, m, 2) interior displacements, got {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("interior displacements must be finite")
    m = raw.shape[0]
    full = np.zeros((m + 2, m + 2, 2))
    full[1:-1, 1:-1] = raw
    return full


@dataclass(frozen=True, eq=False)
class ControlGrid:
    """Control lattice over ``region = (x0, y0, x1, y1)`` with effective displacements.

    Build through :meth:`from_interior` so the edge ring stays pinned at zero.
    """

    n: int
    region: tuple
    displacement: np.ndarray

    def __post_init__(self):
        d = np.array(self.displacement, dtype=np.float64)
        if d.shape != (self.n, self.n, 2):
            raise ValueError(f"displacement must be ({self.n}, {self.n}, 2)")
        if not np.all(np.isfinite(d)):
            raise ValueError("displacements must be finite")
        d.setflags(write=False)
        object.__setattr__(self, "displacement", d)
        object.__setattr__(self, "region", tuple(float(v) for v in self.region))

    @classmethod
    def from_interior(cls, region, interior) -> "ControlGrid":
        full = apply_dirichlet(interior)
        return cls(full.shape[0], region, full)

    @classmethod
    def zeros(cls, region, n: int = DEFAULT_N) -> "ControlGrid":
        return cls(n, region, np.zeros((n, n, 2)))

    @classmethod
    def unconstrained(cls, region, displacement) -> "ControlGrid":
        """Test hook: arbitrary displacement on every point, edge ring included."""
        d = np.asarray(displacement, dtype=np.float64)
        return cls(d.shape[0], region, d)

    @property
    def interior_disp(self) -> np.ndarray:
        return self.displacement[1:-1, 1:-1]

    @property
    def ref_points(self) -> np.ndarray:
        return control_points(self.n, self.region)

    @property
    def target_points(self) -> np.ndarray:
        return self.ref_points + self.displacement.reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class TpsCoefficients:
    """Pixel-unit spline: ``x_t = affine.T @ [1, x, y] + sum_m w[m] B(|x - P_m|)``."""

    kernel_weights: np.ndarray  # (M, 2)
    affine: np.ndarray  # (3, 2)
    points: np.ndarray  # (M, 2) reference control points

    def evaluate(self, pts) -> np.ndarray:
        pts = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 2)
        out = np.empty_like(pts)
        for s in range(0, len(pts), _CHUNK):
            p = pts[s:s + _CHUNK]
            k = _rbf_sq(_sqdist(p, self.points))
            out[s:s + _CHUNK] = k @ self.kernel_weights + self.affine[0] + p @ self.affine[1:]
        return out

    def evaluate_with_jacobian(self, pts):
        """Spline values and ``(N, 2, 2)`` derivatives ``J[k, a, b] = d x_t[a] / d x[b]``."""
        pts = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 2)
        val = np.empty_like(pts)
        jac = np.empty((len(pts), 2, 2))
        for s in range(0, len(pts), _CHUNK):
            p = pts[s:s + _CHUNK]
            d2 = _sqdist(p, self.points)
            lg = np.log(np.maximum(d2, 1e-300))
            val[s:s + _CHUNK] = (d2 * lg) @ self.kernel_weights + self.affine[0] + p @ self.affine[1:]
            g = np.where(d2 > 0.0, 2.0 * (lg + 1.0), 0.0)
            for b in range(2):
                diff = p[:, b:b + 1] - self.points[None, :, b]
                jac[s:s + _CHUNK, :, b] = (g * diff) @ self.kernel_weights + self.affine[1 + b]
        return val, jac


@dataclass(frozen=True, eq=False)
class WarpField:
    """Dense displacement ``flow[i, j] = (dx, dy)``; ``origin`` is the pixel of ``flow[0, 0]``."""

    flow: np.ndarray
    origin: tuple = (0, 0)

    def __post_init__(self):
        f = np.array(self.flow, dtype=np.float64)
        if f.ndim != 3 or f.shape[2] != 2:
            raise ValueError("flow must be (h, w, 2)")
        if not np.all(np.isfinite(f)):
            raise ValueError("flow must be finite")
        f.setflags(write=False)
        object.__setattr__(self, "flow", f)
        object.__setattr__(self, "origin", (int(self.origin[0]), int(self.origin[1])))

    @property
    def height(self) -> int:
        return self.flow.shape[0]

    @property
    def width(self) -> int:
        return self.flow.shape[1]

    def max_magnitude(self) -> float:
        if self.flow.size == 0:
            return 0.0
        return float(np.sqrt((self.flow ** 2).sum(axis=2)).max())

    def dense(self, width: int, height: int, origin=(0, 0)) -> np.ndarray:
        """Flow over a ``width x height`` frame at ``origin``, zero outside the field."""
        out = np.zeros((height, width, 2))
        ox = self.origin[0] - origin[0]
        oy = self.origin[1] - origin[1]
        x0, y0 = max(ox, 0), max(oy, 0)
        x1, y1 = min(ox + self.width, width), min(oy + self.height, height)
        if x1 > x0 and y1 > y0:
            out[y0:y1, x0:x1] = self.flow[y0 - oy:y1 - oy, x0 - ox:x1 - ox]
        return out


def _normalizer(region):
    x0, y0, x1, y1 = region
    scale = max(x1 - x0, y1 - y0)
    if not scale > 0:
        scale = 1.0
    return np.array([x0, y0]), float(scale)


def build_L(points) -> np.ndarray:
    """``[[K, P], [P^T, 0]]`` with ``K_ij = B(|P_i - P_j|)`` and ``P`` rows ``[1, x, y]``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    m = len(pts)
    d2 = _sqdist(np.ascontiguousarray(pts), np.ascontiguousarray(pts))
    if m > 1 and d2[~np.eye(m, dtype=bool)].min() <= 0.0:
        raise DuplicateControlPoints("control points must be pairwise distinct")
    big = np.zeros((m + 3, m + 3))
    big[:m, :m] = _rbf_sq(d2)
    big[:m, m] = 1.0
    big[:m, m + 1:] = pts
    big[m, :m] = 1.0
    big[m + 1:, :m] = pts.T
    return big


class _Factor:
    """Regularized LU of the normalized L with residual refinement."""

    def __init__(self, n: int, region):
        self.n = n
        self.region = tuple(float(v) for v in region)
        self.origin, self.scale = _normalizer(self.region)
        self.points = control_points(n, self.region)
        self.unit = (self.points - self.origin) / self.scale
        self.L = build_L(self.unit)
        m = n * n
        reg = 1e-8 * np.abs(self.L[:m, :m]).mean()
        lr = self.L.copy()
        lr[np.arange(m), np.arange(m)] += reg
        if not np.all(np.isfinite(lr)):
            raise SingularL("non-finite system matrix")
        with np.errstate(all="ignore"):
            self.lu = scipy.linalg.lu_factor(lr, check_finite=False)
        if not np.all(np.isfinite(self.lu[0])) or np.min(np.abs(np.diag(self.lu[0]))) == 0.0:
            raise SingularL("regularized TPS system is singular")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        x = scipy.linalg.lu_solve(self.lu, rhs, check_finite=False)
        for _ in range(3):
            r = rhs - self.L @ x
            x = x + scipy.linalg.lu_solve(self.lu, r, check_finite=False)
        scale = max(np.abs(rhs).max(), 1.0)
        if not np.all(np.isfinite(x)) or np.abs(rhs - self.L @ x).max() > 1e-9 * scale:
            raise SingularL("TPS system is rank-deficient")
        return x

    def unit_features(self, pts: np.ndarray) -> np.ndarray:
        u = np.ascontiguousarray((pts - self.origin) / self.scale)
        return np.concatenate([_rbf_sq(_sqdist(u, self.unit)), np.ones((len(u), 1)), u], axis=1)


@lru_cache(maxsize=32)
def _factor(n: int, region: tuple) -> _Factor:
    return _Factor(n, region)


def solve_tps(grid: ControlGrid) -> TpsCoefficients:
    f = _factor(grid.n, grid.region)
    m = grid.n * grid.n
    rhs = np.zeros((m + 3, 2))
    rhs[:m] = grid.target_points
    sol = f.solve(rhs)
    w, a = sol[:m], sol[m:]
    s, o = f.scale, f.origin
    # B(r/s) = B(r)/s^2 - r^2 log(s^2)/s^2, and sum_m w_m r_m^2 reduces to sum_m w_m |p_m|^2
    # under the side conditions, so the rescale only shifts the constant term.
    kernel = w / s**2
    const = a[0] - (o[0] * a[1] + o[1] * a[2]) / s
    const = const - np.log(s**2) / s**2 * ((grid.ref_points ** 2).sum(axis=1) @ w)
    affine = np.stack([const, a[1] / s, a[2] / s])
    return TpsCoefficients(np.ascontiguousarray(kernel), np.ascontiguousarray(affine),
                           grid.ref_points)


def eval_warpfield(coeffs: TpsCoefficients, grid: ControlGrid, region: Grid) -> WarpField:
    """``F = X_t - X_r`` on the sampling positions of ``region``."""
    pts = region.points()
    flow = (coeffs.evaluate(pts) - pts).reshape(region.height, region.width, 2)
    c0 = region.coords[0, 0]
    origin = (int(round(c0[0])), int(round(c0[1]))) if np.all(np.isfinite(c0)) else (0, 0)
    return WarpField(flow, origin)


def field_basis(n: int, region, pts, columns=None) -> np.ndarray:
    """Matrix ``A`` with ``flow(pts) = A @ displacement.reshape(n*n, 2)``.

    The spline reproduces affine maps exactly, so the flow depends on the
    control displacements alone and linearly. ``columns`` keeps a subset of
    control points (e.g. the interior).
    """
    f = _factor(n, tuple(float(v) for v in region))
    m = n * n
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    eye = np.zeros((m + 3, m))
    eye[:m] = np.eye(m)
    inv_cols = f.solve(eye)  # (m+3, m): L^{-1}[:, :m]
    if columns is not None:
        inv_cols = np.ascontiguousarray(inv_cols[:, columns])
    out = np.empty((len(pts), inv_cols.shape[1]))
    for s in range(0, len(pts), _CHUNK):
        out[s:s + _CHUNK] = f.unit_features(pts[s:s + _CHUNK]) @ inv_cols
    return out
