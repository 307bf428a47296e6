"""Projective transforms parameterized by four corner displacements."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Grid
from .errors import DegenerateCorners, SingularHomography

DENOM_EPS = 1e-12
DET_TOL = 1e-12
RCOND_MIN = 1e-10


def _normalize(m: np.ndarray) -> np.ndarray:
    if abs(m[2, 2]) >= 1e-12:
        return m / m[2, 2]
    return m / np.linalg.norm(m)


@dataclass(frozen=True, eq=False)
class Homography:
    """3x3 projective matrix, scaled so ``m[2, 2] == 1`` when possible."""

    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise ValueError("homography must be a finite 3x3 matrix")
        if np.linalg.norm(m) == 0.0 or np.linalg.det(m) == 0.0:
            raise SingularHomography("homography matrix is singular")
        m = _normalize(m)
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.m @ other.m)

    def project(self, pts) -> np.ndarray:
        """Map ``(..., 2)`` points; points near the horizon come back as NaN."""
        pts = np.asarray(pts, dtype=np.float64)
        m = self.m
        x, y = pts[..., 0], pts[..., 1]
        den = m[2, 0] * x + m[2, 1] * y + m[2, 2]
        bad = np.abs(den) < DENOM_EPS
        den = np.where(bad, 1.0, den)
        u = (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / den
        v = (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / den
        out = np.stack([u, v], axis=-1)
        out[bad] = np.nan
        return out


def corners(width: float, height: float) -> np.ndarray:
    """Corner set ordered (0,0), (w,0), (0,h), (w,h)."""
    return np.array([[0.0, 0.0], [width, 0.0], [0.0, height], [width, height]])


def _similarity_normalizer(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def dlt_solve(base, disp) -> Homography:
    """Exact four-point homography taking ``base[i]`` to ``base[i] + disp[i]``.

    Both point sets are similarity-normalized before the 8x8 solve; the
    reciprocal condition number of the normalized system decides degeneracy.
    """
    src = np.asarray(base, dtype=np.float64).reshape(4, 2)
    dst = src + np.asarray(disp, dtype=np.float64).reshape(4, 2)
    if not np.all(np.isfinite(dst)):
        raise DegenerateCorners("non-finite corner displacement")
    t_src = _similarity_normalizer(src)
    t_dst = _similarity_normalizer(dst)
    s = src @ t_src[:2, :2].T + t_src[:2, 2]
    d = dst @ t_dst[:2, :2].T + t_dst[:2, 2]

    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i in range(4):
        x, y = s[i]
        u, v = d[i]
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    if 1.0 / np.linalg.cond(a) < RCOND_MIN:
        raise DegenerateCorners("corner correspondences are degenerate")
    h = np.linalg.solve(a, b)
    hn = np.append(h, 1.0).reshape(3, 3)
    return Homography(np.linalg.inv(t_dst) @ hn @ t_src)


def corner_displacement(h: Homography, width: float, height: float) -> np.ndarray:
    """Inverse of :func:`dlt_solve` on the image corner set."""
    v = corners(width, height)
    return h.project(v) - v


def fit_homography(src, dst, weights=None) -> Homography:
    """Weighted least-squares homography from >= 4 correspondences (normalized DLT)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    if n < 4:
        raise DegenerateCorners("need at least four correspondences")
    w = np.ones(n) if weights is None else np.sqrt(np.asarray(weights, dtype=np.float64))
    t_src = _similarity_normalizer(src)
    t_dst = _similarity_normalizer(dst)
    s = src @ t_src[:2, :2].T + t_src[:2, 2]
    d = dst @ t_dst[:2, :2].T + t_dst[:2, 2]
    x, y, u, v = s[:, 0], s[:, 1], d[:, 0], d[:, 1]
    zero, one = np.zeros(n), np.ones(n)
    rows_u = np.stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u], axis=1)
    rows_v = np.stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v], axis=1)
    a = np.concatenate([rows_u * w[:, None], rows_v * w[:, None]])
    _, sv, vt = np.linalg.svd(a, full_matrices=False)
    if sv[-2] <= RCOND_MIN * sv[0]:
        raise DegenerateCorners("correspondences do not constrain a homography")
    hn = vt[-1].reshape(3, 3)
    return Homography(np.linalg.inv(t_dst) @ hn @ t_src)


def apply(h: Homography, g: Grid) -> Grid:
    return Grid(h.project(g.coords))


def check_invertible(h: Homography) -> None:
    m = h.m
    if abs(np.linalg.det(m)) < DET_TOL * np.linalg.norm(m) ** 3:
        raise SingularHomography("homography determinant below tolerance")


def invert(h: Homography) -> Homography:
    check_invertible(h)
    return Homography(np.linalg.inv(h.m))
