"""Ray rendering of depth/normal from the SDF and the consistency losses.

Depth and normal are accumulated NeuS-style along each ray: alpha per sample
interval from consecutive SDF values through the sharpness-s sigmoid, then
front-to-back transmittance weighting. Depth here is the *ray parameter* t;
callers converting from splatted z-buffers divide by the camera-space z
component of the unit ray direction (carried on the batch).

The splat-side depth/normal targets are constants: geometry feedback reaches
the Gaussians through the coupling losses, not through these.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import UsageError
from .scene import Camera, sigmoid
from .sdf_field import FieldCache, FieldGrads, SdfField

NORMAL_WEIGHT_CUTOFF = 1e-3  # blend weights below this skip the normal-gradient path


@dataclass
class RayBatch:
    origins: np.ndarray      # (R,3)
    directions: np.ndarray   # (R,3) unit
    pixel_ids: np.ndarray    # (R,3) int: camera index, u, v
    t_near: np.ndarray       # (R,)
    t_far: np.ndarray        # (R,)
    dir_z_cam: np.ndarray    # (R,) camera-space z component of the unit direction
    all_missed: bool = False

    def __len__(self) -> int:
        return len(self.origins)


def intersect_aabb(origins: np.ndarray, directions: np.ndarray, lo, hi):
    """Slab test: (t_near, t_far) per ray; t_near < t_far means a hit."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    tmin = np.maximum(tmin, 0.0)
    return tmin, tmax


def sample_rays(cameras, n: int, rng, masks=None, bounds=None) -> RayBatch:
    """Draw N rays through pixel centers, uniform over all cameras' pixels.

    masks (optional, one boolean H x W array per camera) restrict the draw to
    foreground. Rays that miss `bounds` are dropped; an all-miss draw returns
    an empty, flagged batch. Sampling is without replacement unless N exceeds
    the pixel population.
    """
    if n < 1:
        raise UsageError("sample_rays needs n >= 1")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    cameras = list(cameras)
    pools = []
    for ci, cam in enumerate(cameras):
        if masks is not None and masks[ci] is not None:
            ys, xs = np.nonzero(masks[ci])
        else:
            ys, xs = np.unravel_index(np.arange(cam.height * cam.width),
                                      (cam.height, cam.width))
        pools.append(np.column_stack([np.full(len(xs), ci), xs, ys]))
    pool = np.concatenate(pools, axis=0)
    replace = n > len(pool)
    pick = rng.choice(len(pool), size=n, replace=replace)
    chosen = pool[pick]

    origins = np.empty((n, 3))
    dirs = np.empty((n, 3))
    dirz = np.empty(n)
    for ci, cam in enumerate(cameras):
        sel = chosen[:, 0] == ci
        if not sel.any():
            continue
        uv = chosen[sel, 1:3] + 0.5
        o, d = cam.pixel_rays(uv)
        origins[sel] = o
        dirs[sel] = d
        dirz[sel] = d @ cam.rotation[2]
    if bounds is None:
        t_near = np.zeros(n)
        t_far = np.full(n, np.inf)
        hit = np.ones(n, dtype=bool)
    else:
        t_near, t_far = intersect_aabb(origins, dirs, bounds[0], bounds[1])
        hit = t_far > t_near
    batch = RayBatch(origins[hit], dirs[hit], chosen[hit].astype(np.int64),
                     t_near[hit], t_far[hit], dirz[hit], all_missed=not hit.any())
    return batch


def sample_along_ray(t_near, t_far, m: int, stratified: bool, rng=None) -> np.ndarray:
    """M t-values per ray in [t_near, t_far], ascending.

    Stratified: one uniform draw per equal sub-interval; otherwise midpoints.
    """
    if m < 2:
        raise UsageError("sample_along_ray needs m >= 2")
    t_near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    span = (t_far - t_near)[:, None]
    base = np.arange(m)[None, :] / m
    if stratified:
        if isinstance(rng, (int, np.integer)) or rng is None:
            rng = np.random.default_rng(rng)
        jitter = rng.uniform(size=(len(t_near), m))
    else:
        jitter = 0.5
    return t_near[:, None] + span * (base + jitter / m)


def neus_alpha(f_i, f_next, s):
    """alpha = max((phi_s(f_i) - phi_s(f_next)) / phi_s(f_i), 0), phi_s = sigmoid(s x)."""
    if np.any(np.asarray(s) <= 0):
        raise UsageError("s must be positive")
    phi_i = sigmoid(np.asarray(f_i, dtype=np.float64) * s)
    phi_n = sigmoid(np.asarray(f_next, dtype=np.float64) * s)
    out = np.maximum((phi_i - phi_n) / phi_i, 0.0)
    return float(out) if np.ndim(f_i) == 0 else out


def _neus_alpha_derivs(f_i, f_next, s):
    """(alpha, dalpha/df_i, dalpha/df_next, dalpha/ds); zero where clamped."""
    phi_i = sigmoid(f_i * s)
    phi_n = sigmoid(f_next * s)
    raw = 1.0 - phi_n / phi_i
    live = raw > 0.0
    dphi_i = s * phi_i * (1.0 - phi_i)
    dphi_n = s * phi_n * (1.0 - phi_n)
    dfi = np.where(live, phi_n * dphi_i / (phi_i * phi_i), 0.0)
    dfn = np.where(live, -dphi_n / phi_i, 0.0)
    ds = np.where(live,
                  (phi_n * (f_i * phi_i * (1.0 - phi_i)) -
                   phi_i * (f_next * phi_n * (1.0 - phi_n))) / (phi_i * phi_i),
                  0.0)
    return np.maximum(raw, 0.0), dfi, dfn, ds


def accumulate(alphas: np.ndarray, values: np.ndarray):
    """Front-to-back weighted sum: payload = sum T_i a_i v_i, weight W = sum T_i a_i.

    alphas (..., M); values (..., M) or (..., M, D). Returns (payload, W).
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    trans = np.cumprod(1.0 - alphas, axis=-1)
    T = np.concatenate([np.ones_like(alphas[..., :1]), trans[..., :-1]], axis=-1)
    w = T * alphas
    if values.ndim == alphas.ndim:
        payload = (w * values).sum(axis=-1)
    else:
        payload = (w[..., None] * values).sum(axis=-2)
    return payload, w.sum(axis=-1)


@dataclass
class VolumeRender:
    """Per-ray volumetric depth/normal with the caches needed for backward."""

    batch: RayBatch
    t: np.ndarray               # (R,M) sample positions
    depth: np.ndarray           # (R,) ray-parameter depth sum T a t
    normal_raw: np.ndarray      # (R,3) sum T a n_hat (not normalized)
    weight: np.ndarray          # (R,) accumulated T a
    alphas: np.ndarray          # (R,M-1)
    w: np.ndarray               # (R,M-1) blend weights
    trans: np.ndarray           # (R,M-1) transmittance before each interval
    dfi: np.ndarray
    dfn: np.ndarray
    ds: np.ndarray
    cache_f: FieldCache
    cache_sel: FieldCache | None
    sel_flat: np.ndarray        # flat (ray*(M)+i) indices with the normal path
    sel_nhat: np.ndarray        # unit normals at selected samples
    sel_gnorm: np.ndarray
    field: SdfField


def render_rays(field: SdfField, batch: RayBatch, m: int = 64,
                stratified: bool = False, rng=None, s: float | None = None,
                normal_cutoff: float = NORMAL_WEIGHT_CUTOFF) -> VolumeRender:
    """Volumetric depth/normal along the batch rays from the SDF.

    Normals are unit grad-f per sample; samples whose blend weight is below
    normal_cutoff are left out of the normal accumulation (and its backward),
    which bounds the gradient-bearing field evaluations to the surface shell.
    """
    R = len(batch)
    if R == 0:
        raise UsageError("render_rays needs a non-empty batch")
    t = sample_along_ray(batch.t_near, batch.t_far, m, stratified, rng)
    pts = batch.origins[:, None, :] + t[..., None] * batch.directions[:, None, :]
    flat = pts.reshape(-1, 3)
    cache_f = field.forward(flat)
    f = np.asarray(cache_f.f, dtype=np.float64).reshape(R, m)
    s_val = field.s if s is None else float(s)
    alphas, dfi, dfn, ds = _neus_alpha_derivs(f[:, :-1], f[:, 1:], s_val)
    trans = np.concatenate([np.ones((R, 1)),
                            np.cumprod(1.0 - alphas, axis=1)[:, :-1]], axis=1)
    w = trans * alphas
    depth = (w * t[:, :-1]).sum(axis=1)
    weight = w.sum(axis=1)

    sel_ray, sel_i = np.nonzero(w > normal_cutoff)
    sel_flat = sel_ray * m + sel_i
    normal_raw = np.zeros((R, 3))
    cache_sel = None
    sel_nhat = np.zeros((0, 3))
    sel_gnorm = np.zeros(0)
    if len(sel_flat):
        cache_sel = field.forward(flat[sel_flat], need_grad=True)
        g = np.asarray(cache_sel.g, dtype=np.float64)
        sel_gnorm = np.maximum(np.linalg.norm(g, axis=1), 1e-12)
        sel_nhat = g / sel_gnorm[:, None]
        contrib = w[sel_ray, sel_i][:, None] * sel_nhat
        np.add.at(normal_raw, sel_ray, contrib)
    return VolumeRender(batch, t, depth, normal_raw, weight, alphas, w, trans,
                        dfi, dfn, ds, cache_f, cache_sel, sel_flat, sel_nhat,
                        sel_gnorm, field)


def _backward_weights(vol: VolumeRender, d_w: np.ndarray, field_grads: FieldGrads):
    """Chain dL/d(blend weight) into f samples and log_s."""
    R, m1 = vol.alphas.shape
    m = m1 + 1
    # w_i = T_i a_i, T_i = prod_{j<i}(1-a_j):
    # dL/da_i = T_i d_w_i - (1/(1-a_i)) * sum_{j>i} w_j d_w_j
    wd = vol.w * d_w
    suffix = np.cumsum(wd[:, ::-1], axis=1)[:, ::-1] - wd
    d_alpha = vol.trans * d_w - suffix / (1.0 - vol.alphas)
    df = np.zeros((R, m))
    df[:, :-1] += d_alpha * vol.dfi
    df[:, 1:] += d_alpha * vol.dfn
    vol.cache_f.backward_value(df.reshape(-1), field_grads)
    ds_total = float((d_alpha * vol.ds).sum())
    field_grads.log_s += ds_total * vol.field.s


def consistency_losses(vol: VolumeRender, gs_depth: np.ndarray, gs_normal: np.ndarray,
                       gs_alpha: np.ndarray | None = None,
                       min_weight: float = 0.1, alpha_threshold: float = 0.5,
                       field_grads: FieldGrads | None = None,
                       weight_depth: float = 1.0, weight_normal: float = 1.0):
    """(L_vd, L_vn) between splat-derived and volumetric depth/normal.

    gs_depth is per-ray *ray-parameter* depth (convert z-buffers via dir_z_cam);
    gs_normal per-ray unit (or zero) world-frame normals; both are constants.
    Rays with splat alpha below alpha_threshold or accumulated weight below
    min_weight are excluded. Returns (0, 0) on an empty valid set.
    """
    R = len(vol.batch)
    gs_depth = np.asarray(gs_depth, dtype=np.float64)
    gs_normal = np.asarray(gs_normal, dtype=np.float64)
    valid = vol.weight >= min_weight
    if gs_alpha is not None:
        valid &= np.asarray(gs_alpha, dtype=np.float64) >= alpha_threshold
    gs_n_len = np.linalg.norm(gs_normal, axis=1)
    valid_n = valid & (gs_n_len > 1e-6)
    nv = int(valid.sum())
    nn = int(valid_n.sum())
    if nv == 0:
        return 0.0, 0.0

    diff = np.where(valid, gs_depth - vol.depth, 0.0)
    l_vd = float((diff * diff).sum() / nv)

    l_vn = 0.0
    d_nraw = np.zeros((R, 3))
    if nn:
        n_len = np.maximum(np.linalg.norm(vol.normal_raw, axis=1), 1e-12)
        n_hat = vol.normal_raw / n_len[:, None]
        gs_n = np.where(valid_n[:, None], gs_normal / np.maximum(gs_n_len, 1e-12)[:, None], 0.0)
        resid = gs_n - n_hat
        dots = np.sum(gs_n * n_hat, axis=1)
        per = np.abs(resid).sum(axis=1) + np.abs(1.0 - dots)
        l_vn = float(np.where(valid_n, per, 0.0).sum() / nn)
        if field_grads is not None:
            d_nhat = (np.sign(resid) * -1.0 - np.sign(1.0 - dots)[:, None] * gs_n)
            d_nhat *= (weight_normal / nn) * valid_n[:, None]
            d_nraw = (d_nhat - n_hat * np.sum(d_nhat * n_hat, axis=1, keepdims=True))
            d_nraw /= n_len[:, None]

    if field_grads is not None:
        d_depth = (-2.0 * weight_depth / nv) * diff
        d_w = d_depth[:, None] * vol.t[:, :-1]
        if len(vol.sel_flat):
            sel_ray = vol.sel_flat // vol.t.shape[1]
            sel_i = vol.sel_flat % vol.t.shape[1]
            # normal_raw = sum w n_hat: weight path and direction path
            d_w_sel = np.sum(d_nraw[sel_ray] * vol.sel_nhat, axis=1)
            d_w_full = d_w.copy()
            d_w_full[sel_ray, sel_i] += d_w_sel
            dg = (d_nraw[sel_ray] * vol.w[sel_ray, sel_i][:, None]
                  - vol.sel_nhat * np.sum(d_nraw[sel_ray] * vol.sel_nhat,
                                          axis=1, keepdims=True)
                  * vol.w[sel_ray, sel_i][:, None])
            dg /= vol.sel_gnorm[:, None]
            vol.cache_sel.backward_grad(dg, field_grads)
            _backward_weights(vol, d_w_full, field_grads)
        else:
            _backward_weights(vol, d_w, field_grads)
    return l_vd, l_vn
