"""Synthetic two-view scenes with exact ground-truth correspondences.

The scene is a procedural texture defined on the continuous reference plane.
The reference view samples it on the pixel grid; the target view is rendered
by pulling every target pixel back to the reference plane through the known
warp ``x -> H(x + F(x))`` (``F`` an optional edge-pinned TPS field) and, for
off-plane sprites, an extra image-space shift. No resampling of rendered
pixels is involved, so the ground truth is exact.
"""
from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import Image, OverlapMask, in_bounds, make_uniform_grid, overlap_mask
from .homography import Homography, corner_displacement, corners, dlt_solve, invert
from .tps import ControlGrid, control_points, solve_tps

BUCKET_RANGES = {"low": (0.18, 0.30), "mid": (0.31, 0.60), "high": (0.61, 0.95)}


# ---------------------------------------------------------------- texture

def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice values in [0, 1) (splitmix64 finalizer)."""
    with np.errstate(over="ignore"):
        h = (ix.astype(np.int64).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
             ^ iy.astype(np.int64).astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
             ^ np.uint64(seed & 0xFFFFFFFF) * np.uint64(0x165667B19E3779F9))
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def value_noise(x: np.ndarray, y: np.ndarray, wavelength: float, seed: int) -> np.ndarray:
    """Smoothly interpolated lattice noise in [-1, 1] with the given feature size."""
    u = x / wavelength
    v = y / wavelength
    i0 = np.floor(u)
    j0 = np.floor(v)
    fu = _fade(u - i0)
    fv = _fade(v - j0)
    i0 = i0.astype(np.int64)
    j0 = j0.astype(np.int64)
    a = _hash01(i0, j0, seed)
    b = _hash01(i0 + 1, j0, seed)
    c = _hash01(i0, j0 + 1, seed)
    d = _hash01(i0 + 1, j0 + 1, seed)
    top = a + (b - a) * fu
    bot = c + (d - c) * fu
    return 2.0 * (top + (bot - top) * fv) - 1.0


OCTAVES = ((48.0, 1.0), (24.0, 0.8), (12.0, 0.6), (6.0, 0.35))


@dataclass(frozen=True)
class Texture:
    """Band-limited RGB value noise evaluated at arbitrary plane coordinates."""

    seed: int
    octaves: tuple = OCTAVES

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        x = pts[..., 0]
        y = pts[..., 1]
        chans = []
        for c in range(3):
            acc = np.zeros_like(x)
            for o, (wl, amp) in enumerate(self.octaves):
                acc = acc + amp * value_noise(x, y, wl, self.seed * 7919 + c * 101 + o)
            chans.append(acc)
        lum = (chans[0] + chans[1] + chans[2]) / 3.0
        out = [0.5 + 0.38 * np.tanh(0.9 * (0.75 * lum + 0.25 * ch)) for ch in chans]
        return np.stack(out, axis=-1)


def gradient_energy(plane: np.ndarray, cell: int = 16) -> np.ndarray:
    """Mean squared gradient per ``cell x cell`` block."""
    gy, gx = np.gradient(plane)
    e = gx ** 2 + gy ** 2
    h, w = e.shape
    r, c = h // cell, w // cell
    return e[:r * cell, :c * cell].reshape(r, cell, c, cell).mean(axis=(1, 3))


CONTRAST_FLOOR = 2e-5


# ---------------------------------------------------------------- scene model

def parallax_error(x1, H: Homography, A1: Homography, A2: Homography) -> np.ndarray:
    """Residual ``A2 A1^-1 x1 - H x1`` between the plane-induced and the fitted mapping."""
    plane = A2 @ invert(A1)
    x1 = np.asarray(x1, dtype=np.float64)
    return plane.project(x1) - H.project(x1)


@dataclass(frozen=True)
class Layer:
    """Off-plane sprite occupying ``box = (x0, y0, x1, y1)`` in the reference view.

    The sprite lies off the dominant plane by ``depth_offset`` (informational);
    its target-view position is displaced by ``shift`` pixels beyond the
    background warp.
    """

    box: tuple
    depth_offset: float
    shift: tuple
    seed: int = 0

    def contains(self, pts: np.ndarray) -> np.ndarray:
        x0, y0, x1, y1 = self.box
        x, y = pts[..., 0], pts[..., 1]
        with np.errstate(invalid="ignore"):
            return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)


@dataclass(frozen=True, eq=False)
class SceneSpec:
    width: int
    height: int
    h_gt: Homography
    layers: tuple = ()
    tps_gt: ControlGrid | None = None
    noise_sigma: float = 0.0
    seed: int = 0
    texture_seed: int = 0
    id: str = "scene"
    bucket: str | None = None

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "width": self.width,
            "height": self.height,
            "h_gt": self.h_gt.m.tolist(),
            "layers": [
                {"box": list(l.box), "depth_offset": l.depth_offset,
                 "shift": list(l.shift), "seed": l.seed}
                for l in self.layers
            ],
            "tps_gt": None,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "texture_seed": self.texture_seed,
            "bucket": self.bucket,
        }
        if self.tps_gt is not None:
            d["tps_gt"] = {
                "n": self.tps_gt.n,
                "region": list(self.tps_gt.region),
                "interior": self.tps_gt.interior_disp.tolist(),
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        tps = None
        if d.get("tps_gt"):
            t = d["tps_gt"]
            tps = ControlGrid.from_interior(tuple(t["region"]), np.array(t["interior"]))
        layers = tuple(
            Layer(tuple(l["box"]), l["depth_offset"], tuple(l["shift"]), l.get("seed", 0))
            for l in d.get("layers", [])
        )
        return cls(
            width=d["width"], height=d["height"], h_gt=Homography(np.array(d["h_gt"])),
            layers=layers, tps_gt=tps, noise_sigma=d.get("noise_sigma", 0.0),
            seed=d.get("seed", 0), texture_seed=d.get("texture_seed", 0),
            id=d.get("id", "scene"), bucket=d.get("bucket"),
        )


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Exact correspondences of every reference pixel.

    ``mapping[i, j]`` is the target position of reference pixel ``(j, i)``;
    ``flow = mapping - U``; ``overlap`` marks pixels whose correspondence lies
    inside the target frame.
    """

    homography: Homography
    corner_disp: np.ndarray
    mapping: np.ndarray
    overlap: OverlapMask
    control_grid: ControlGrid | None = None

    @property
    def flow(self) -> np.ndarray:
        return self.mapping - make_uniform_grid(self.mapping.shape[1], self.mapping.shape[0]).coords

    @property
    def overlap_ratio(self) -> float:
        return self.overlap.ratio


def _tps_flow(coeffs, pts: np.ndarray) -> np.ndarray:
    flat = pts.reshape(-1, 2)
    ok = np.all(np.isfinite(flat), axis=1)
    out = np.zeros_like(flat)
    out[ok] = coeffs.evaluate(flat[ok]) - flat[ok]
    return out.reshape(pts.shape)


def _background_map(spec: SceneSpec, pts: np.ndarray) -> np.ndarray:
    if spec.tps_gt is not None:
        pts = pts + _tps_flow(solve_tps(spec.tps_gt), pts)
    return spec.h_gt.project(pts)


def _pull_back(spec: SceneSpec, y: np.ndarray) -> np.ndarray:
    """Reference-plane point whose background correspondence is ``y``.

    Solves ``x + F(x) = H^-1 y`` by Newton's method; the ground-truth spline
    acts on the whole plane, so the map is smooth and invertible.
    """
    z = invert(spec.h_gt).project(y)
    if spec.tps_gt is None:
        return z
    coeffs = solve_tps(spec.tps_gt)
    flat_z = z.reshape(-1, 2)
    active = np.flatnonzero(np.all(np.isfinite(flat_z), axis=1))
    x = flat_z.copy()
    x[active] = 2.0 * flat_z[active] - coeffs.evaluate(flat_z[active])
    for _ in range(20):
        if active.size == 0:
            break
        xa = x[active]
        val, jac = coeffs.evaluate_with_jacobian(xa)
        step = np.linalg.solve(jac, (val - flat_z[active])[..., None])[..., 0]
        x[active] = xa - step
        active = active[np.abs(step).max(axis=1) > 1e-10]
    return x.reshape(z.shape)


def ground_truth(spec: SceneSpec) -> GroundTruth:
    u = make_uniform_grid(spec.width, spec.height).coords
    mapping = _background_map(spec, u)
    for layer in spec.layers:
        inside = layer.contains(u)
        mapping[inside] = mapping[inside] + np.asarray(layer.shift, dtype=np.float64)
    overlap = OverlapMask(in_bounds(mapping, spec.width, spec.height))
    return GroundTruth(
        homography=spec.h_gt,
        corner_disp=corner_displacement(spec.h_gt, spec.width, spec.height),
        mapping=mapping,
        overlap=overlap,
        control_grid=spec.tps_gt,
    )


def _texture_seed_ok(seed: int, width: int, height: int) -> bool:
    tex = Texture(seed)
    plane = tex(make_uniform_grid(width, height).coords) @ np.array([0.299, 0.587, 0.114])
    return gradient_energy(plane).min() > CONTRAST_FLOOR


def choose_texture_seed(seed: int, width: int, height: int, tries: int = 16) -> int:
    """First derived seed whose reference view clears the per-cell contrast floor."""
    for k in range(tries):
        s = (seed * 1_000_003 + k) & 0x7FFFFFFF
        if _texture_seed_ok(s, width, height):
            return s
    raise RuntimeError("could not find a texture seed above the contrast floor")


def render(spec: SceneSpec):
    """Reference and target views of ``spec``."""
    tex = Texture(spec.texture_seed)
    u = make_uniform_grid(spec.width, spec.height).coords

    ref = tex(u)
    for layer in spec.layers:
        inside = layer.contains(u)
        if inside.any():
            ref[inside] = Texture(layer.seed)(u[inside])

    back = _pull_back(spec, u)
    tgt = tex(np.where(np.isfinite(back), back, 0.0))
    for layer in spec.layers:
        src = _pull_back(spec, u - np.asarray(layer.shift, dtype=np.float64))
        inside = layer.contains(src)
        if inside.any():
            tgt[inside] = Texture(layer.seed)(src[inside])

    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        ref = ref + rng.normal(0.0, spec.noise_sigma, ref.shape)
        tgt = tgt + rng.normal(0.0, spec.noise_sigma, tgt.shape)
    ref = np.clip(ref, 0.0, 1.0)
    tgt = np.clip(tgt, 0.0, 1.0)
    return Image.from_array(ref), Image.from_array(tgt)


def generate_pair(spec: SceneSpec):
    """``(ref, tgt, ground_truth)`` for a scene."""
    ref, tgt = render(spec)
    return ref, tgt, ground_truth(spec)


# ---------------------------------------------------------------- scene sampling

def random_homography(rng, width: int, height: int, max_corner: float = 25.0,
                      translation=(0.0, 0.0)) -> Homography:
    """Translation plus independent corner jitter of magnitude up to ``max_corner`` px."""
    v = corners(width, height)
    r = rng.uniform(0.0, max_corner, 4)
    a = rng.uniform(0.0, 2 * np.pi, 4)
    jitter = np.stack([r * np.cos(a), r * np.sin(a)], axis=1)
    return dlt_solve(v, jitter + np.asarray(translation, dtype=np.float64))


def bump_field(rng, region, amplitude: float, n: int = 12) -> ControlGrid:
    """Gaussian displacement bump over the interior control points."""
    pts = control_points(n, region).reshape(n, n, 2)[1:-1, 1:-1]
    x0, y0, x1, y1 = region
    span = np.array([x1 - x0, y1 - y0])
    center = np.array([x0, y0]) + rng.uniform(0.25, 0.75, 2) * span
    sigma = rng.uniform(0.12, 0.25) * span.mean()
    angle = rng.uniform(0.0, 2 * np.pi)
    profile = np.exp(-((pts - center) ** 2).sum(axis=-1) / (2 * sigma ** 2))
    profile = profile / profile.max()
    interior = amplitude * profile[..., None] * np.array([np.cos(angle), np.sin(angle)])
    return ControlGrid.from_interior(region, interior)


def _translation_for_ratio(rng, ratio: float, width: int, height: int):
    """Offset whose rectangle overlap with the frame equals ``ratio``."""
    for _ in range(100):
        fy = rng.uniform(max(ratio, 0.0), 1.0)
        fx = ratio / fy
        if fx <= 1.0:
            break
    tx = (1.0 - fx) * width * rng.choice([-1.0, 1.0])
    ty = (1.0 - fy) * height * rng.choice([-1.0, 1.0])
    return tx, ty


def make_scene(seed: int, width: int = 256, height: int = 256, bucket: str | None = None,
               max_corner: float = 25.0, tps_amplitude: float | None = None,
               n_layers: int = 0, noise_sigma: float = 0.005, id: str | None = None) -> SceneSpec:
    """Draw one scene; ``bucket`` picks the ground-truth overlap range.

    Without a bucket the homography is corner jitter alone (high overlap).
    ``tps_amplitude`` adds an edge-pinned bump of that peak magnitude on the
    ground-truth overlap box.
    """
    rng = np.random.default_rng(seed)
    tex_seed = choose_texture_seed(seed, width, height)
    lo, hi = BUCKET_RANGES[bucket] if bucket else (0.0, 1.0)
    for _ in range(200):
        shift = (0.0, 0.0)
        if bucket:
            shift = _translation_for_ratio(rng, rng.uniform(lo, hi), width, height)
        h = random_homography(rng, width, height, max_corner, shift)
        ratio = overlap_mask((width, height), h, (width, height)).ratio
        if lo <= ratio <= hi or (bucket is None and ratio > 0):
            break
    else:
        raise RuntimeError("could not sample a homography in the requested bucket")

    tps = None
    if tps_amplitude:
        box = overlap_mask((width, height), h, (width, height)).bbox()
        region = tuple(float(v) for v in box)
        tps = bump_field(rng, region, tps_amplitude)

    layers = []
    for k in range(n_layers):
        w = rng.uniform(0.15, 0.3) * width
        hh = rng.uniform(0.15, 0.3) * height
        x0 = rng.uniform(0.1 * width, 0.9 * width - w)
        y0 = rng.uniform(0.1 * height, 0.9 * height - hh)
        depth = rng.uniform(0.1, 0.5)
        ang = rng.uniform(0, 2 * np.pi)
        mag = 20.0 * depth
        layers.append(Layer((x0, y0, x0 + w, y0 + hh), depth,
                            (mag * np.cos(ang), mag * np.sin(ang)), seed=seed * 31 + k + 1))

    return SceneSpec(
        width=width, height=height, h_gt=h, layers=tuple(layers), tps_gt=tps,
        noise_sigma=noise_sigma, seed=seed, texture_seed=tex_seed,
        id=id or f"scene_{seed}", bucket=bucket,
    )


def generate_suite(seed: int, counts=(1, 1, 1), width: int = 256, height: int = 256,
                   tps_amplitude=None, n_layers: int = 0, noise_sigma: float = 0.005):
    """Scenes stratified into the low/mid/high overlap buckets, in that order.

    ``tps_amplitude`` is a peak bump size in px or a ``(lo, hi)`` range drawn
    per scene.
    """
    specs = []
    children = np.random.SeedSequence(seed).spawn(sum(counts))
    k = 0
    for bucket, count in zip(("low", "mid", "high"), counts):
        for i in range(count):
            child = children[k]
            s = int(child.generate_state(1)[0] & 0x7FFFFFFF)
            amp = tps_amplitude
            if isinstance(amp, (tuple, list)):
                amp = float(np.random.default_rng(child).uniform(*amp))
            specs.append(make_scene(s, width, height, bucket=bucket, tps_amplitude=amp,
                                    n_layers=n_layers, noise_sigma=noise_sigma,
                                    id=f"{bucket}_{i:03d}"))
            k += 1
    return specs


def disjoint_scene(seed: int, width: int = 256, height: int = 256) -> SceneSpec:
    """Target shows a part of the plane that never meets the reference frame."""
    return replace(make_scene(seed, width, height, noise_sigma=0.0),
                   h_gt=Homography.translation(2.0 * width, 0.0), id=f"disjoint_{seed}")


def multiview_scenes(seed: int, offsets, width: int = 256, height: int = 256,
                     max_corner: float = 10.0):
    """Several targets of one textured plane, translated by ``offsets`` plus jitter."""
    rng = np.random.default_rng(seed)
    base = make_scene(seed, width, height, noise_sigma=0.0)
    return [replace(base, h_gt=random_homography(rng, width, height, max_corner, off),
                    id=f"view_{i}") for i, off in enumerate(offsets)]


# ---------------------------------------------------------------- export

def field_checksum(gt: GroundTruth) -> str:
    return hashlib.sha256(np.ascontiguousarray(gt.mapping, dtype="<f8").tobytes()).hexdigest()


def export_suite(specs, out_dir, fmt: str = "ppm") -> dict:
    """Write each pair as image files plus ``manifest.json``; returns the manifest."""
    from .io import write_image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for spec in specs:
        ref, tgt, gt = generate_pair(spec)
        ref_name = f"{spec.id}_ref.{fmt}"
        tgt_name = f"{spec.id}_tgt.{fmt}"
        write_image(out / ref_name, ref)
        write_image(out / tgt_name, tgt)
        entries.append({
            "id": spec.id,
            "bucket": spec.bucket,
            "ref": ref_name,
            "tgt": tgt_name,
            "gt_corner_disp": gt.corner_disp.tolist(),
            "gt_overlap_ratio": gt.overlap_ratio,
            "gt_field_sha256": field_checksum(gt),
            "spec": spec.to_dict(),
        })
    manifest = {"version": 1, "pairs": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
