"""Recurrent alignment: a homography stage followed by a TPS residual stage.

Each iteration proposes a residual update from the cost volume, refines it
with damped Gauss-Newton on a Huber photometric objective, and keeps it only
if the masked L1 loss does not increase. Updates accumulate into the corner
displacements ``D_G`` and the interior control displacements ``D_L``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import Grid, Image, OverlapMask, make_uniform_grid
from .costvolume import CELL, CostVolume, build_cost_volume, global_matches, lookup, slice_flow
from .errors import DegenerateCorners, NoOverlap, SingularHomography, StitchFailure
from .homography import Homography, apply, corner_displacement, corners, dlt_solve, fit_homography
from .tps import ControlGrid, WarpField, control_points, field_basis, solve_tps
from .warp import DEFAULT_AREA_CAP, bilinear, blend_pair, build_canvas, warp_image, _support_valid

EVAL_POINTS = 32768
FIT_POINTS_H = 8192
FIT_POINTS_T = 8192
FIELD_STRIDE = 2
H_SIGMAS = (4.0, 2.0, 1.0, 1.0, 0.5, 0.5)
T_SIGMAS = (2.0, 1.0, 0.5)
INNER_STEPS = 4
HALVINGS = 4


@dataclass(frozen=True)
class AlignConfig:
    iters_h: int = 6
    iters_t: int = 3
    alpha: float = 0.85
    lambda_local: float = 1.0
    max_step_px: float = 16.0
    max_step_local_px: float = 4.0
    pyramid_levels: int = 2
    grid_n: int = 12
    radius: int = 4
    huber_delta: float = 0.01
    warp: str = "h+tps"
    area_cap: float = DEFAULT_AREA_CAP
    min_overlap_ncc: float = 0.8

    def __post_init__(self):
        if self.iters_h < 1:
            raise ValueError("iters_h must be >= 1")
        if self.iters_t < 0:
            raise ValueError("iters_t must be >= 0")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not self.lambda_local > 0.0:
            raise ValueError("lambda_local must be positive")
        if self.grid_n < 3:
            raise ValueError("grid_n must be >= 3")
        if self.warp not in ("h", "h+tps"):
            raise ValueError("warp must be 'h' or 'h+tps'")
        if self.max_step_px <= 0 or self.max_step_local_px <= 0:
            raise ValueError("trust-region caps must be positive")


@dataclass
class IterationRecord:
    stage: str  # "H" or "T"
    k: int
    delta: np.ndarray
    accumulated: np.ndarray
    loss_before: float
    loss_after: float
    accepted: bool
    halvings: int = 0

    def to_dict(self) -> dict:
        return {
            "stage": self.stage, "k": self.k,
            "delta": self.delta.tolist(), "accumulated": self.accumulated.tolist(),
            "loss_before": float(self.loss_before), "loss_after": float(self.loss_after),
            "accepted": bool(self.accepted), "halvings": int(self.halvings),
        }


@dataclass
class AlignTrace:
    records: list = field(default_factory=list)

    def stage(self, name: str) -> list:
        return [r for r in self.records if r.stage == name]

    def extend(self, other: "AlignTrace") -> None:
        self.records.extend(other.records)

    def weighted_sequence_loss(self, stage: str, alpha: float, baseline: bool = False) -> float:
        """``sum_k alpha^(K-k) L_k``; ``baseline`` holds every ``L_k`` at the initial loss."""
        recs = self.stage(stage)
        if not recs:
            return 0.0
        k_total = len(recs)
        l0 = recs[0].loss_before
        return float(sum(alpha ** (k_total - k) * (l0 if baseline else r.loss_after)
                         for k, r in enumerate(recs, start=1)))

    def to_dict(self) -> dict:
        return {"records": [r.to_dict() for r in self.records]}


# ---------------------------------------------------------------- photometric model

def _lattice(width: int, height: int, budget: int):
    stride = max(1, int(np.ceil(np.sqrt(width * height / budget))))
    xs, ys = np.meshgrid(np.arange(0, width, stride), np.arange(0, height, stride))
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64), stride


def _thin(idx: np.ndarray, budget: int) -> np.ndarray:
    if len(idx) <= budget:
        return idx
    return idx[np.linspace(0, len(idx) - 1, budget).round().astype(np.intp)]


def _proj_jac(m: np.ndarray, p: np.ndarray):
    """Projected points and ``d proj / d p`` as ``(N, 2, 2)``."""
    den = p @ m[2, :2] + m[2, 2]
    yx = (p @ m[0, :2] + m[0, 2]) / den
    yy = (p @ m[1, :2] + m[1, 2]) / den
    jac = np.empty((len(p), 2, 2))
    jac[:, 0, 0] = (m[0, 0] - yx * m[2, 0]) / den
    jac[:, 0, 1] = (m[0, 1] - yx * m[2, 1]) / den
    jac[:, 1, 0] = (m[1, 0] - yy * m[2, 0]) / den
    jac[:, 1, 1] = (m[1, 1] - yy * m[2, 1]) / den
    return np.stack([yx, yy], axis=1), jac


class Photometric:
    """Masked grayscale L1 between ``ref`` and ``tgt`` sampled through a mapping.

    The loss is averaged over a fixed lattice of reference pixels (every pixel
    up to 256x256, strided above) restricted to points whose target sample is
    valid.
    """

    def __init__(self, ref: Image, tgt: Image):
        self.ref, self.tgt = ref, tgt
        self.ref_gray = ref.gray()
        self.tgt_gray = tgt.gray()
        pts, self.stride = _lattice(ref.width, ref.height, EVAL_POINTS)
        ix, iy = pts[:, 0].astype(np.intp), pts[:, 1].astype(np.intp)
        keep = ref.valid[iy, ix]
        self.points = pts[keep]
        self.ix, self.iy = ix[keep], iy[keep]
        self.ref_vals = self.ref_gray[self.iy, self.ix]
        self._cache = {}

    def planes(self, sigma: float):
        if sigma not in self._cache:
            r = gaussian_filter(self.ref_gray, sigma, mode="nearest") if sigma > 0 else self.ref_gray
            t = gaussian_filter(self.tgt_gray, sigma, mode="nearest") if sigma > 0 else self.tgt_gray
            gy, gx = np.gradient(t)
            self._cache[sigma] = (r, np.stack([t, gx, gy], axis=-1))
        return self._cache[sigma]

    def sample(self, y: np.ndarray, sigma: float = 0.0, grad: bool = False):
        if grad:
            _, stack = self.planes(sigma)
            vals, ok = bilinear(stack, y)
        else:
            plane = self.planes(sigma)[1][..., 0] if sigma > 0 else self.tgt_gray
            vals, ok = bilinear(plane, y)
        ok = ok & np.all(np.isfinite(y), axis=-1)
        if not self.tgt.valid.all():
            ok = _support_valid(self.tgt.valid, np.where(ok[..., None], y, 0.0), ok)
        return vals, ok

    def loss(self, y: np.ndarray):
        """Plain mean L1 over valid samples; ``inf`` on an empty overlap."""
        vals, ok = self.sample(y)
        n = int(ok.sum())
        if n == 0:
            return float("inf"), 0
        return float(np.abs(self.ref_vals[ok] - vals[ok]).mean()), n

    def ncc(self, y: np.ndarray) -> float:
        vals, ok = self.sample(y)
        if ok.sum() < 2:
            return 0.0
        a = self.ref_vals[ok] - self.ref_vals[ok].mean()
        b = vals[ok] - vals[ok].mean()
        den = np.sqrt((a * a).sum() * (b * b).sum())
        if den < 1e-9:
            return 1.0 if np.abs(self.ref_vals[ok] - vals[ok]).mean() < 1e-3 else 0.0
        return float((a * b).sum() / den)


def _huber_weights(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def _huber(r: np.ndarray, delta: float) -> float:
    a = np.abs(r)
    return float(np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta)).mean())


def _normal_equations(G: np.ndarray, w: np.ndarray, r: np.ndarray):
    # sqrt-weighted form lets BLAS use a symmetric rank-k update
    sw = np.sqrt(w)
    gs = G * sw[:, None]
    return gs.T @ gs, gs.T @ (sw * r)


def _lm_solve(a: np.ndarray, b: np.ndarray, mu: float) -> np.ndarray:
    """Damped solve of ``(A + mu diag(A) + eps I) d = b``."""
    a = a.copy()
    diag = np.diag(a).copy()
    eps = 1e-9 * max(diag.mean(), 1e-12)
    a[np.diag_indices_from(a)] += mu * diag + eps
    return np.linalg.solve(a, b)


def _cap(delta: np.ndarray, limit: float) -> np.ndarray:
    """Uniformly shrink so no point moves more than ``limit`` px."""
    mags = np.sqrt((delta.reshape(-1, 2) ** 2).sum(axis=1))
    peak = mags.max() if mags.size else 0.0
    return delta * (limit / peak) if peak > limit else delta


def _try_accept(loss_fn, current: np.ndarray, delta: np.ndarray, loss0: float):
    """Full step, then halved steps; returns ``(delta, loss, halvings)``."""
    for h in range(HALVINGS + 1):
        step = delta * 0.5 ** h
        try:
            loss = loss_fn(current + step)
        except (DegenerateCorners, SingularHomography):
            continue
        # strict decrease: ties (e.g. an already exact fit) leave the state untouched
        if loss < loss0:
            return step, loss, h
    return None, loss0, HALVINGS


# ---------------------------------------------------------------- H stage

class _HModel:
    def __init__(self, photo: Photometric, width: int, height: int):
        self.photo = photo
        self.base = corners(width, height)
        n = len(photo.points)
        self.fit_idx = _thin(np.arange(n), FIT_POINTS_H)

    def homography(self, d: np.ndarray) -> Homography:
        return dlt_solve(self.base, d.reshape(4, 2))

    def loss(self, d: np.ndarray) -> float:
        return self.photo.loss(self.homography(d).project(self.photo.points))[0]

    def _dm_dd(self, d: np.ndarray) -> np.ndarray:
        eps = 1e-3
        cols = []
        for i in range(8):
            e = np.zeros(8)
            e[i] = eps
            mp = self.homography(d + e).m
            mm = self.homography(d - e).m
            cols.append(((mp - mm) / (2 * eps)).ravel())
        return np.stack(cols, axis=1)  # (9, 8)

    def refine(self, d: np.ndarray, sigma: float, delta: float) -> np.ndarray:
        """Levenberg-Marquardt on the Huber objective at blur ``sigma``."""
        ref_b, _ = self.photo.planes(sigma)
        pts = self.photo.points[self.fit_idx]
        rv = ref_b[self.photo.iy[self.fit_idx], self.photo.ix[self.fit_idx]]
        mu = 1e-3
        d = d.copy()

        def objective(dd):
            y = self.homography(dd).project(pts)
            vals, ok = self.photo.sample(y, sigma, grad=True)
            return y, vals, ok

        y, vals, ok = objective(d)
        if ok.sum() < 16:
            return d
        cur = _huber(rv[ok] - vals[ok, 0], delta)
        for _ in range(INNER_STEPS):
            h = self.homography(d)
            p = pts[ok]
            r = rv[ok] - vals[ok, 0]
            den = p @ h.m[2, :2] + h.m[2, 2]
            yo = y[ok]
            ph = np.concatenate([p, np.ones((len(p), 1))], axis=1) / den[:, None]
            dy_dm = np.zeros((len(p), 2, 9))
            dy_dm[:, 0, 0:3] = ph
            dy_dm[:, 1, 3:6] = ph
            dy_dm[:, 0, 6:9] = -yo[:, :1] * ph
            dy_dm[:, 1, 6:9] = -yo[:, 1:] * ph
            dy_dd = dy_dm @ self._dm_dd(d)  # (N, 2, 8)
            G = vals[ok, 1:2] * dy_dd[:, 0] + vals[ok, 2:3] * dy_dd[:, 1]
            a, b = _normal_equations(G, _huber_weights(r, delta), r)
            improved = False
            for _ in range(6):
                try:
                    step = _lm_solve(a, b, mu)
                    cand = d + step
                    yc, vc, okc = objective(cand)
                except (np.linalg.LinAlgError, DegenerateCorners, SingularHomography):
                    mu *= 10.0
                    continue
                if okc.sum() >= 16:
                    lc = _huber(rv[okc] - vc[okc, 0], delta)
                    if lc < cur:
                        d, y, vals, ok, cur = cand, yc, vc, okc, lc
                        mu = max(mu / 10.0, 1e-7)
                        improved = True
                        break
                mu *= 10.0
            if not improved:
                break
        return d


def _global_proposal(cv: CostVolume, min_corr: float = 0.5):
    """Corner displacements from a consensus over all-pairs cell matches.

    Matches vote for an integer-cell translation; the strongest modes seed an
    inlier refit to a homography and the best-supported fit wins.
    """
    disp, corr = global_matches(cv)
    centers = cv.cell_centers().points()
    good = (corr >= min_corr) & ~cv.degenerate
    if good.sum() < 4:
        return None
    keys = np.round(disp[good] / CELL).astype(np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    votes = np.bincount(inv.ravel(), weights=corr[good])
    order = np.lexsort((uniq[:, 1], uniq[:, 0], -votes))[:3]
    src, dst, wts = centers[good], centers[good] + disp[good], corr[good]
    best, best_score = None, -1.0
    for m in order:
        t = uniq[m] * CELL
        inl = np.sqrt(((dst - src - t) ** 2).sum(axis=1)) <= 3 * CELL
        model = Homography.translation(*t)
        for _ in range(4):
            if inl.sum() >= 8:
                try:
                    model = fit_homography(src[inl], dst[inl], wts[inl])
                except (DegenerateCorners, SingularHomography, np.linalg.LinAlgError):
                    break
            res = np.sqrt(((model.project(src) - dst) ** 2).sum(axis=1))
            new = res <= 0.75 * CELL
            if new.sum() < 4 or np.array_equal(new, inl):
                inl = new if new.sum() >= 4 else inl
                break
            inl = new
        score = float(wts[inl].sum())
        if score > best_score:
            best, best_score = model, score
    return best


def _lookup_proposal(cv: CostVolume, h: Homography, tgt_size, radius: int):
    centers = cv.cell_centers()
    mapped = apply(h, centers)
    cs = lookup(cv, mapped, radius)
    flow, conf, usable = slice_flow(cs)
    src = centers.points()
    dst = mapped.points() + flow
    tw, th = tgt_size
    inside = (dst[:, 0] >= 0) & (dst[:, 0] <= tw - 1) & (dst[:, 1] >= 0) & (dst[:, 1] <= th - 1)
    use = usable & inside & ~cv.degenerate
    if use.sum() < 8:
        return None
    try:
        return fit_homography(src[use], dst[use], conf[use])
    except (DegenerateCorners, SingularHomography, np.linalg.LinAlgError):
        return None


def h_stage(ref: Image, tgt: Image, cv: CostVolume, cfg: AlignConfig, photo: Photometric = None):
    """Global stage; returns ``(homography, trace)``."""
    photo = photo or Photometric(ref, tgt)
    model = _HModel(photo, ref.width, ref.height)
    d = np.zeros(8)
    loss = model.loss(d)
    trace = AlignTrace()
    for k in range(1, cfg.iters_h + 1):
        sigma = H_SIGMAS[min(k - 1, len(H_SIGMAS) - 1)]
        cand = d.copy()
        if k == 1:
            prop = _global_proposal(cv)
        else:
            prop = _lookup_proposal(cv, model.homography(d), tgt.size, cfg.radius)
        if prop is not None:
            try:
                pd = corner_displacement(prop, ref.width, ref.height).ravel()
                pd = pd if k == 1 else d + _cap(pd - d, cfg.max_step_px)
                if model.loss(pd) < loss:
                    cand = pd
            except (DegenerateCorners, SingularHomography):
                pass
        cand = model.refine(cand, sigma, cfg.huber_delta)
        delta = cand - d
        if k > 1:
            delta = _cap(delta, cfg.max_step_px)
        step, new_loss, halv = _try_accept(model.loss, d, delta, loss)
        accepted = bool(step is not None and np.isfinite(new_loss))
        if accepted:
            d = d + step
        else:
            step = np.zeros(8)
        trace.records.append(IterationRecord("H", k, step.reshape(4, 2), d.reshape(4, 2).copy(),
                                             loss, new_loss if accepted else loss, accepted, halv))
        loss = new_loss if accepted else loss
    h = model.homography(d)
    if photo.loss(h.project(photo.points))[1] == 0:
        raise NoOverlap("no overlap after the global stage")
    return h, trace


# ---------------------------------------------------------------- T stage

def overlap_region(photo: Photometric, h: Homography, n: int):
    """Bounding box of lattice points with a valid target sample, or ``None``."""
    _, ok = photo.sample(h.project(photo.points))
    if not ok.any():
        return None
    p = photo.points[ok]
    x0, y0 = p.min(axis=0)
    x1, y1 = p.max(axis=0)
    x1 = min(x1 + photo.stride - 1, photo.ref.width - 1)
    y1 = min(y1 + photo.stride - 1, photo.ref.height - 1)
    if x1 - x0 < 2 * n or y1 - y0 < 2 * n:
        return None
    return (float(x0), float(y0), float(x1), float(y1))


def _in_region(pts: np.ndarray, region) -> np.ndarray:
    x0, y0, x1, y1 = region
    return (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)


def _interior_columns(n: int) -> np.ndarray:
    idx = np.arange(n * n).reshape(n, n)
    return idx[1:-1, 1:-1].ravel()


class _TModel:
    def __init__(self, photo: Photometric, h: Homography, region, n: int):
        self.photo, self.h, self.region, self.n = photo, h, region, n
        cols = _interior_columns(n)
        self.eval_in = np.flatnonzero(_in_region(photo.points, region))
        self.A_eval = field_basis(n, region, photo.points[self.eval_in], cols)
        _, ok = photo.sample(h.project(photo.points[self.eval_in]))
        fit = self.eval_in[ok]
        self.fit_idx = _thin(fit, FIT_POINTS_T)
        pos = np.searchsorted(self.eval_in, self.fit_idx)
        self.A_fit = self.A_eval[pos]

    def mapped(self, d: np.ndarray) -> np.ndarray:
        pts = self.photo.points.copy()
        pts[self.eval_in] += self.A_eval @ d.reshape(-1, 2)
        return self.h.project(pts)

    def loss(self, d: np.ndarray) -> float:
        return self.photo.loss(self.mapped(d))[0]

    def refine(self, d: np.ndarray, sigma: float, delta: float) -> np.ndarray:
        ref_b, _ = self.photo.planes(sigma)
        idx = self.fit_idx
        x = self.photo.points[idx]
        rv = ref_b[self.photo.iy[idx], self.photo.ix[idx]]
        A = self.A_fit
        m = A.shape[1]

        def objective(dd):
            q = x + A @ dd.reshape(-1, 2)
            y, jac = _proj_jac(self.h.m, q)
            vals, ok = self.photo.sample(y, sigma, grad=True)
            return jac, vals, ok

        d = d.copy()
        jac, vals, ok = objective(d)
        if ok.sum() < 16:
            return d
        cur = _huber(rv[ok] - vals[ok, 0], delta)
        mu = 1e-2
        for _ in range(INNER_STEPS):
            r = rv[ok] - vals[ok, 0]
            g = np.einsum("na,nab->nb", vals[ok, 1:], jac[ok])  # gradient w.r.t. reference coords
            Ao = A[ok]
            w = _huber_weights(r, delta)
            G = np.concatenate([Ao * g[:, :1], Ao * g[:, 1:]], axis=1)
            a, b = _normal_equations(G, w, r)
            improved = False
            for _ in range(6):
                try:
                    sol = _lm_solve(a, b, mu)
                except np.linalg.LinAlgError:
                    mu *= 10.0
                    continue
                cand = d + np.stack([sol[:m], sol[m:]], axis=1).ravel()
                jc, vc, okc = objective(cand)
                if okc.sum() >= 16:
                    lc = _huber(rv[okc] - vc[okc, 0], delta)
                    if lc < cur:
                        d, jac, vals, ok, cur = cand, jc, vc, okc, lc
                        mu = max(mu / 10.0, 1e-6)
                        improved = True
                        break
                mu *= 10.0
            if not improved:
                break
        return d


def _voronoi_proposal(cv: CostVolume, model: _TModel, d: np.ndarray, radius: int):
    """Mean cost-volume residual flow in the Voronoi cell of each interior control point."""
    n, region = model.n, model.region
    centers = cv.cell_centers().points()
    inside = _in_region(centers, region)
    if inside.sum() < 4:
        return None
    flow_now = np.zeros_like(centers)
    cols = _interior_columns(n)
    flow_now[inside] = field_basis(n, region, centers[inside], cols) @ d.reshape(-1, 2)
    rows, ccount = cv.ref_cells
    cs = lookup(cv, Grid((centers + flow_now).reshape(rows, ccount, 2)), radius)
    flow, conf, usable = slice_flow(cs)
    use = inside & usable & ~cv.degenerate
    if not use.any():
        return None
    ctrl = control_points(n, region)
    d2 = ((centers[use, None, :] - ctrl[None, :, :]) ** 2).sum(axis=2)
    owner = np.argmin(d2, axis=1)
    slot = np.full(n * n, -1)
    slot[cols] = np.arange(len(cols))
    k = slot[owner]
    keep = k >= 0
    wsum = np.bincount(k[keep], weights=conf[use][keep], minlength=len(cols))
    out = np.zeros((len(cols), 2))
    for a in range(2):
        out[:, a] = np.bincount(k[keep], weights=(conf[use] * flow[use, a])[keep], minlength=len(cols))
    has = wsum > 0
    out[has] /= wsum[has, None]
    return out.ravel()


def t_stage(ref: Image, tgt: Image, h: Homography, cfg: AlignConfig, j_t: Image = None,
            photo: Photometric = None):
    """Local residual stage; returns ``(control_grid or None, trace)``.

    ``j_t`` is the globally aligned target ``warp_image(tgt, apply(h, U))``;
    its cost volume against ``ref`` drives the proposals, while the
    photometric refinement samples ``tgt`` through ``h`` directly so the
    image is resampled only once.
    """
    photo = photo or Photometric(ref, tgt)
    trace = AlignTrace()
    n = cfg.grid_n
    region = overlap_region(photo, h, n)
    if region is None or cfg.iters_t == 0:
        return None, trace
    if j_t is None:
        j_t = warp_image(tgt, apply(h, make_uniform_grid(ref.width, ref.height)))
    cv = build_cost_volume(ref, j_t, cfg.pyramid_levels)
    model = _TModel(photo, h, region, n)
    m = (n - 2) * (n - 2)
    d = np.zeros(2 * m)
    loss = model.loss(d)
    for k in range(1, cfg.iters_t + 1):
        sigma = T_SIGMAS[min(k - 1, len(T_SIGMAS) - 1)]
        cand = d.copy()
        prop = _voronoi_proposal(cv, model, d, cfg.radius)
        if prop is not None:
            pd = d + _cap(prop, cfg.max_step_local_px)
            if model.loss(pd) < loss:
                cand = pd
        cand = model.refine(cand, sigma, cfg.huber_delta)
        delta = _cap(cfg.lambda_local * (cand - d), cfg.max_step_local_px)
        step, new_loss, halv = _try_accept(model.loss, d, delta, loss)
        accepted = bool(step is not None and np.isfinite(new_loss))
        if accepted:
            d = d + step
        else:
            step = np.zeros_like(d)
        trace.records.append(IterationRecord(
            "T", k, step.reshape(n - 2, n - 2, 2), d.reshape(n - 2, n - 2, 2).copy(),
            loss, new_loss if accepted else loss, accepted, halv))
        loss = new_loss if accepted else loss
    return ControlGrid.from_interior(region, d.reshape(n - 2, n - 2, 2)), trace


def dense_field(grid: ControlGrid, stride: int = FIELD_STRIDE) -> WarpField:
    """TPS flow over the grid's region, evaluated on a ``stride`` lattice and interpolated."""
    x0, y0, x1, y1 = (int(round(v)) for v in grid.region)
    w, h = x1 - x0 + 1, y1 - y0 + 1
    if not grid.displacement.any():
        return WarpField(np.zeros((h, w, 2)), (x0, y0))
    coeffs = solve_tps(grid)
    nx = int(np.ceil((w - 1) / stride)) + 1
    ny = int(np.ceil((h - 1) / stride)) + 1
    lx, ly = np.meshgrid(x0 + np.arange(nx) * stride, y0 + np.arange(ny) * stride)
    lat = np.stack([lx, ly], axis=-1).astype(np.float64).reshape(-1, 2)
    coarse = (coeffs.evaluate(lat) - lat).reshape(ny, nx, 2)
    u = make_uniform_grid(w, h).coords / stride
    flow, _ = bilinear(coarse, u)
    return WarpField(flow, (x0, y0))


# ---------------------------------------------------------------- pipeline

@dataclass
class StitchResult:
    image: Image | None
    metrics: "object"
    trace: AlignTrace
    homography: Homography | None = None
    control_grid: ControlGrid | None = None
    field: WarpField | None = None
    warped: Image | None = None  # J_t in the reference frame

    @property
    def failure(self):
        return self.metrics.failure


def mapping(result: StitchResult, width: int, height: int) -> np.ndarray:
    """Target position of every reference pixel under the estimated warp."""
    fld = result.field
    base = make_uniform_grid(width, height).coords
    if fld is not None:
        base = base + fld.dense(width, height)
    return result.homography.project(base)


def align(ref: Image, tgt: Image, cfg: AlignConfig):
    """Run both stages; returns ``(homography, control_grid, field, trace, photo)``."""
    trace = AlignTrace()
    cv = build_cost_volume(ref, tgt, cfg.pyramid_levels)
    photo = Photometric(ref, tgt)
    h, th = h_stage(ref, tgt, cv, cfg, photo)
    trace.extend(th)
    grid, fld = None, None
    if cfg.warp == "h+tps" and cfg.iters_t > 0:
        grid, tt = t_stage(ref, tgt, h, cfg, photo=photo)
        trace.extend(tt)
        if grid is not None:
            fld = dense_field(grid)
    return h, grid, fld, trace, photo


def _check_overlap(photo: Photometric, h: Homography, fld: WarpField | None, cfg: AlignConfig):
    pts = photo.points
    if fld is not None:
        ix, iy = photo.ix, photo.iy
        dense = fld.dense(photo.ref.width, photo.ref.height)
        pts = pts + dense[iy, ix]
    y = h.project(pts)
    _, count = photo.loss(y)
    if count == 0:
        raise NoOverlap("aligned images do not overlap")
    score = photo.ncc(y)
    if score < cfg.min_overlap_ncc:
        raise NoOverlap(f"overlap correlation {score:.3f} below {cfg.min_overlap_ncc:g}")


def stitch(ref: Image, tgt: Image, cfg: AlignConfig = None, blend_mode: str = "average") -> StitchResult:
    """Full pipeline. Stitching failures are returned in ``metrics.failure``, never raised."""
    from .metrics import Metrics, bucketize, mpsnr

    cfg = cfg or AlignConfig()
    t0 = time.perf_counter()
    trace = AlignTrace()
    h = grid = fld = None
    try:
        h, grid, fld, trace, photo = align(ref, tgt, cfg)
        _check_overlap(photo, h, fld, cfg)
        canvas = build_canvas(ref, [(tgt, h, fld)], cfg.area_cap)
    except StitchFailure as exc:
        ms = (time.perf_counter() - t0) * 1e3
        return StitchResult(None, Metrics(failure=exc.kind, time_ms=ms), trace, h, grid, fld)
    a, b = canvas.layers
    image = blend_pair(a, b, blend_mode)
    both = a.valid & b.valid
    value = mpsnr(a, b, OverlapMask(both))
    ox, oy = canvas.offset
    ratio = float(both[oy:oy + ref.height, ox:ox + ref.width].sum()) / (ref.width * ref.height)
    warped = Image(b.data[oy:oy + ref.height, ox:ox + ref.width],
                   b.valid[oy:oy + ref.height, ox:ox + ref.width])
    ms = (time.perf_counter() - t0) * 1e3
    metrics = Metrics(mpsnr=value, overlap_ratio=ratio, bucket=bucketize(ratio), time_ms=ms)
    return StitchResult(image, metrics, trace, h, grid, fld, warped)


@dataclass
class MultiStitchResult:
    image: Image | None
    results: list  # one StitchResult per target, input order

    @property
    def failures(self) -> int:
        return sum(r.failure is not None for r in self.results)


def multi_stitch(ref: Image, targets, cfg: AlignConfig = None,
                 blend_mode: str = "average") -> MultiStitchResult:
    """Align every target to ``ref`` independently and composite all that succeed."""
    if len(targets) < 1:
        raise ValueError("multi_stitch needs at least one target")
    cfg = cfg or AlignConfig()
    results = [stitch(ref, t, cfg, blend_mode) for t in targets]
    warps = [(t, r.homography, r.field) for t, r in zip(targets, results) if r.failure is None]
    if not warps:
        return MultiStitchResult(None, results)
    canvas = build_canvas(ref, warps, cfg.area_cap)
    out = canvas.layers[0]
    for layer in canvas.layers[1:]:
        out = blend_pair(out, layer, blend_mode)
    return MultiStitchResult(out, results)
