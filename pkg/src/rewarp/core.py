"""Raster, grid and mask types.

Coordinate convention: pixel centers sit at integer coordinates, x grows to the
right (column index) and y grows downward (row index). Arrays are stored
row-major, so a point ``(x, y)`` lives at ``array[y, x]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Image:
    """Normalized raster with a per-pixel validity mask.

    ``data`` has shape ``(height, width, channels)`` with values in [0, 1];
    ``valid`` has shape ``(height, width)``.
    """

    data: np.ndarray
    valid: np.ndarray = None  # defaults to all valid

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"expected (h, w, 1|3) data, got shape {data.shape}")
        if self.valid is None:
            valid = np.ones(data.shape[:2], dtype=bool)
        else:
            valid = np.asarray(self.valid, dtype=bool)
        if valid.shape != data.shape[:2]:
            raise ValueError(f"valid mask shape {valid.shape} != {data.shape[:2]}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image data must be finite")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("image data must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "valid", _frozen(valid))

    @classmethod
    def from_array(cls, arr, valid=None) -> "Image":
        """Wrap a float array in [0,1] or a uint8 array (scaled by 1/255)."""
        arr = np.asarray(arr)
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float64) / 255.0
        if valid is None:
            valid = np.ones(arr.shape[:2], dtype=bool)
        return cls(arr, valid)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    def gray(self) -> np.ndarray:
        """Luma plane used by every photometric comparison."""
        if self.channels == 1:
            return self.data[:, :, 0]
        return self.data @ LUMA

    def to_uint8(self) -> np.ndarray:
        out = np.round(self.data * 255.0).astype(np.uint8)
        return out[:, :, 0] if self.channels == 1 else out


@dataclass(frozen=True, eq=False)
class Grid:
    """Sampling positions, ``coords[i, j] = (x, y)``.

    Non-finite entries mark points that must not be sampled.
    """

    coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 3 or coords.shape[2] != 2:
            raise ValueError(f"expected (h, w, 2) coords, got {coords.shape}")
        object.__setattr__(self, "coords", _frozen(coords))

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.coords.shape[1]

    @property
    def finite(self) -> np.ndarray:
        return np.all(np.isfinite(self.coords), axis=2)

    def points(self) -> np.ndarray:
        """Flattened ``(width*height, 2)`` view in row-major order."""
        return self.coords.reshape(-1, 2)

    @classmethod
    def from_points(cls, pts, width: int, height: int) -> "Grid":
        return cls(np.asarray(pts, dtype=np.float64).reshape(height, width, 2))


def make_uniform_grid(width: int, height: int) -> Grid:
    if width < 1 or height < 1:
        raise ValueError("grid dimensions must be positive")
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    return Grid(np.stack([xs, ys], axis=-1))


@dataclass(frozen=True, eq=False)
class OverlapMask:
    inside: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "inside", _frozen(np.asarray(self.inside, dtype=bool)))

    @property
    def height(self) -> int:
        return self.inside.shape[0]

    @property
    def width(self) -> int:
        return self.inside.shape[1]

    @property
    def pixel_count(self) -> int:
        return int(np.count_nonzero(self.inside))

    @property
    def ratio(self) -> float:
        return self.pixel_count / self.inside.size

    def bbox(self):
        """Inclusive ``(x0, y0, x1, y1)`` of the true pixels, or None."""
        if not self.inside.any():
            return None
        rows = np.flatnonzero(self.inside.any(axis=1))
        cols = np.flatnonzero(self.inside.any(axis=0))
        return int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])


def in_bounds(pts: np.ndarray, width: int, height: int) -> np.ndarray:
    """True where ``pts[..., :]`` falls inside ``[0, w-1] x [0, h-1]``."""
    x, y = pts[..., 0], pts[..., 1]
    with np.errstate(invalid="ignore"):
        return (x >= 0) & (x <= width - 1) & (y >= 0) & (y <= height - 1)


def overlap_mask(ref_size, homography, tgt_size) -> OverlapMask:
    """Reference pixels whose correspondence under ``homography`` lands in the target.

    ``homography`` maps reference coordinates to target coordinates, the same
    direction used for backward warping. Sizes are ``(width, height)``.
    """
    from .homography import apply, check_invertible

    check_invertible(homography)
    rw, rh = ref_size
    tw, th = tgt_size
    mapped = apply(homography, make_uniform_grid(rw, rh)).coords
    return OverlapMask(in_bounds(mapped, tw, th))
