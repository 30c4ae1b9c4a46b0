"""Differentiable CPU rasterizer for 3D Gaussians.

Forward: project every Gaussian with the EWA affine approximation, sort
globally by camera-space depth, expand (pixel, splat) pairs over conservative
screen bounding boxes, and alpha-blend front to back per pixel (numba kernel).
Pixels are tiled 16x16; tiles are independent by construction, so any tile
ordering is bit-identical.

Backward: exact adjoint of the blend (back-to-front suffix accumulation),
then vectorized chains from screen-space gradients to every raw Gaussian
parameter (position, quaternion, log-scale, opacity logit, SH coefficients).

Splatting constants follow the reference formulation: +0.3 px^2 covariance
floor, alpha clamp 0.99, skip threshold 1/255, early stop at transmittance
1e-4. The per-splat screen radius is chosen so every excluded pixel is below
the skip threshold, which keeps the bounding box from introducing its own
discontinuity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from . import _kernels
from .errors import NumericalError, UsageError
from .scene import (
    ActivatedGaussians,
    Camera,
    COV2D_FLOOR,
    GaussianGrads,
    GaussianSet,
    _projection_jacobian,
    activate,
    quat_to_rotmat,
    rotmat_grad_to_quat,
    sh_basis,
    sh_basis_jacobian,
    unit_quat_grad_to_raw,
)

ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
T_STOP = 1e-4
TILE = 16


@dataclass
class ContributionLog:
    """Per-pixel ordered splat contributions (front to back) from the forward pass."""

    pixel: np.ndarray         # (P,) flat pixel index
    gaussian: np.ndarray      # (P,) original gaussian id
    alpha: np.ndarray         # (P,) blended alpha
    transmittance: np.ndarray  # (P,) T before this splat


@dataclass
class RenderOutputs:
    color: np.ndarray          # (H,W,3), composited over background, >= 0
    depth: np.ndarray          # (H,W) camera-space z accumulation, 0 where empty
    alpha: np.ndarray          # (H,W) accumulated opacity
    contribution_log: ContributionLog | None
    cache: "_RasterCache | None"


@dataclass
class _RasterCache:
    gaussians: ActivatedGaussians
    cam: Camera
    background: np.ndarray
    opacity_override: np.ndarray | None
    vis: np.ndarray            # original indices of visible gaussians, depth order
    t_cam: np.ndarray          # (Nv,3)
    ratio_clamped: np.ndarray  # (Nv,2) bool: J tangent ratios hit the guard clamp
    mean2d: np.ndarray         # (Nv,2)
    conic: np.ndarray          # (Nv,3) upper-triangle (a,b,c) of inverse cov2d
    colors: np.ndarray         # (Nv,3) clamped SH colors
    color_mask: np.ndarray     # (Nv,3) 1 where the clamp is inactive
    basis: np.ndarray          # (Nv,K)
    view_dir: np.ndarray       # (Nv,3)
    view_len: np.ndarray       # (Nv,)
    opac: np.ndarray           # (Nv,) opacity used for blending
    radii: np.ndarray          # (Nv,) pixel radii
    # pairs (after skip-filter, sorted by pixel then depth)
    pair_pix: np.ndarray
    pair_g: np.ndarray         # index into the vis arrays
    pair_G: np.ndarray         # exp(-q/2) before opacity
    pair_alpha: np.ndarray
    pair_clamped: np.ndarray
    t_pair: np.ndarray
    keep: np.ndarray
    t_final: np.ndarray        # (H*W,)


def render(gaussians, cam: Camera, background=(0.0, 0.0, 0.0),
           opacity_override: np.ndarray | None = None, z_near: float = 0.01,
           guard: float = 1.3, active_sh_degree: int | None = None,
           region: tuple | None = None) -> RenderOutputs:
    """Rasterize the Gaussian set into color/depth/alpha images.

    opacity_override replaces sigmoid(logit) opacities (tight coupling).
    region=(y0,y1,x0,x1) restricts rendering to a pixel rectangle; the outputs
    keep full image shape with untouched pixels left at background/zero.
    """
    act = gaussians if isinstance(gaussians, ActivatedGaussians) else activate(gaussians)
    H, W = cam.height, cam.width
    background = np.asarray(background, dtype=np.float64)
    _check_finite(act, opacity_override)

    outputs = RenderOutputs(
        color=np.tile(background, (H, W, 1)),
        depth=np.zeros((H, W)),
        alpha=np.zeros((H, W)),
        contribution_log=None,
        cache=None,
    )
    if act.count == 0:
        outputs.contribution_log = _empty_log()
        return outputs

    # -- project, cull, sort -------------------------------------------------
    t_cam = act.positions @ cam.rotation.T + cam.translation
    in_front = t_cam[:, 2] > z_near
    u = cam.fx * t_cam[:, 0] / np.where(in_front, t_cam[:, 2], 1.0) + cam.cx
    v = cam.fy * t_cam[:, 1] / np.where(in_front, t_cam[:, 2], 1.0) + cam.cy
    margin = (guard - 1.0)
    on_screen = ((u >= -margin * W) & (u <= (1 + margin) * W)
                 & (v >= -margin * H) & (v <= (1 + margin) * H))
    opac_all = act.opacities if opacity_override is None else np.asarray(opacity_override,
                                                                         dtype=np.float64)
    visible = in_front & on_screen & (opac_all > ALPHA_SKIP)
    vis = np.flatnonzero(visible)
    if len(vis) == 0:
        outputs.contribution_log = _empty_log()
        return outputs
    order = np.argsort(t_cam[vis, 2], kind="stable")
    vis = vis[order]

    t_vis = t_cam[vis]
    mean2d = np.stack([u[vis], v[vis]], axis=1)
    opac = opac_all[vis]

    # -- screen-space covariance ----------------------------------------------
    lim_x = guard * (0.5 * W / cam.fx + np.abs(cam.cx - 0.5 * W) / cam.fx)
    lim_y = guard * (0.5 * H / cam.fy + np.abs(cam.cy - 0.5 * H) / cam.fy)
    rx = t_vis[:, 0] / t_vis[:, 2]
    ry = t_vis[:, 1] / t_vis[:, 2]
    ratio_clamped = np.stack([np.abs(rx) > lim_x, np.abs(ry) > lim_y], axis=1)
    J = _projection_jacobian(t_vis, cam, guard)
    R = quat_to_rotmat(act.quats[vis])
    M = R * act.scales[vis][:, None, :]
    P = J @ cam.rotation[None, :, :] @ M           # (Nv,2,3): cov2d = P P^T + floor
    cov2d = P @ np.swapaxes(P, 1, 2)
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR
    a_, b_, c_ = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a_ * c_ - b_ * b_
    conic = np.stack([c_ / det, -b_ / det, a_ / det], axis=1)
    mid = 0.5 * (a_ + c_)
    eig_max = mid + np.sqrt(np.maximum(mid * mid - det, 1e-12))
    radii = np.sqrt(2.0 * np.log(255.0 * np.minimum(opac, 1.0)) * eig_max) + 1.0

    # -- view-dependent color ---------------------------------------------------
    degree = act.sh_coeffs.shape[1]
    degree = int(np.sqrt(degree)) - 1
    if active_sh_degree is not None:
        degree = min(degree, active_sh_degree)
    view = act.positions[vis] - cam.center
    view_len = np.linalg.norm(view, axis=1)
    view_dir = view / view_len[:, None]
    basis = sh_basis(view_dir, degree)
    k = basis.shape[1]
    colors_raw = np.einsum("nk,nkc->nc", basis, act.sh_coeffs[vis, :k, :]) + 0.5
    color_mask = (colors_raw > 0.0).astype(np.float64)
    colors = np.maximum(colors_raw, 0.0)

    # -- pixel/splat pairs ------------------------------------------------------
    y0c, y1c, x0c, x1c = region if region is not None else (0, H, 0, W)
    x0 = np.maximum(np.ceil(mean2d[:, 0] - radii - 0.5).astype(np.int64), x0c)
    x1 = np.minimum(np.floor(mean2d[:, 0] + radii - 0.5).astype(np.int64) + 1, x1c)
    y0 = np.maximum(np.ceil(mean2d[:, 1] - radii - 0.5).astype(np.int64), y0c)
    y1 = np.minimum(np.floor(mean2d[:, 1] + radii - 0.5).astype(np.int64) + 1, y1c)
    wx = np.maximum(x1 - x0, 0)
    wy = np.maximum(y1 - y0, 0)
    counts = wx * wy
    total = int(counts.sum())
    log = _empty_log()
    cache = _RasterCache(act, cam, background, opacity_override, vis, t_vis,
                         ratio_clamped, mean2d, conic, colors, color_mask, basis,
                         view_dir, view_len, opac, radii,
                         pair_pix=np.empty(0, np.int64), pair_g=np.empty(0, np.int32),
                         pair_G=np.empty(0), pair_alpha=np.empty(0),
                         pair_clamped=np.empty(0, bool), t_pair=np.empty(0),
                         keep=np.empty(0, bool), t_final=np.ones(H * W))
    if total > 0:
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        pg = np.repeat(np.arange(len(vis), dtype=np.int32), counts)
        within = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
        wx_r = np.repeat(wx, counts)
        px = np.repeat(x0, counts) + within % wx_r
        py = np.repeat(y0, counts) + within // wx_r
        dx = (px + 0.5) - mean2d[pg, 0]
        dy = (py + 0.5) - mean2d[pg, 1]
        q = conic[pg, 0] * dx * dx + 2.0 * conic[pg, 1] * dx * dy + conic[pg, 2] * dy * dy
        G = np.exp(-0.5 * q)
        alpha_raw = opac[pg] * G
        keep_pair = alpha_raw >= ALPHA_SKIP
        pg, px, py, G, alpha_raw = (arr[keep_pair] for arr in (pg, px, py, G, alpha_raw))
        clamped = alpha_raw > ALPHA_CLAMP
        alpha = np.minimum(alpha_raw, ALPHA_CLAMP)
        pix = py * W + px
        order = np.argsort(pix, kind="stable")  # depth order preserved within pixel
        pix, pg, G, alpha, clamped = (np.ascontiguousarray(arr[order])
                                      for arr in (pix, pg, G, alpha, clamped))
        t_pair = np.zeros(len(pix))
        keep = np.zeros(len(pix), dtype=bool)
        color_flat = np.zeros((H * W, 3))
        depth_flat = np.zeros(H * W)
        acc_flat = np.zeros(H * W)
        t_final = np.ones(H * W)
        _kernels.blend_forward(pix, pg, alpha, colors, t_vis[:, 2], H * W, T_STOP,
                               color_flat, depth_flat, acc_flat, t_final, t_pair, keep)
        color_flat += (1.0 - acc_flat)[:, None] * background
        outputs.color = color_flat.reshape(H, W, 3)
        outputs.depth = depth_flat.reshape(H, W)
        outputs.alpha = acc_flat.reshape(H, W)
        cache.pair_pix, cache.pair_g, cache.pair_G = pix, pg, G
        cache.pair_alpha, cache.pair_clamped = alpha, clamped
        cache.t_pair, cache.keep, cache.t_final = t_pair, keep, t_final
        log = ContributionLog(pixel=pix[keep], gaussian=vis[pg[keep]].astype(np.int64),
                              alpha=alpha[keep], transmittance=t_pair[keep])
    outputs.contribution_log = log
    outputs.cache = cache
    return outputs


def _empty_log() -> ContributionLog:
    return ContributionLog(np.empty(0, np.int64), np.empty(0, np.int64),
                           np.empty(0), np.empty(0))


def _check_finite(act: ActivatedGaussians, override) -> None:
    if act.count == 0:
        return
    arrays = [act.positions, act.quats, act.scales, act.opacities, act.sh_coeffs]
    if override is not None:
        arrays.append(np.asarray(override))
    for arr in arrays:
        finite = np.isfinite(arr).reshape(len(arr), -1).all(axis=1)
        if not finite.all():
            raise NumericalError(f"non-finite gaussian parameter at id {int(np.argmin(finite))}")


@dataclass
class RasterGrads:
    """Raw-parameter gradients plus the densification statistics."""

    gaussian: GaussianGrads
    opacity_direct: np.ndarray | None  # dL/d(opacity_override) when overridden
    mean2d_ndc_norm: np.ndarray        # per-gaussian |dL/d(mean2d)| in NDC units
    visible: np.ndarray                # bool mask of gaussians that reached the screen


def render_backward(outputs: RenderOutputs, dL_dcolor: np.ndarray,
                    dL_ddepth: np.ndarray | None = None,
                    dL_dalpha: np.ndarray | None = None) -> RasterGrads:
    """Exact adjoint of `render` for all Gaussian parameters."""
    cache = outputs.cache
    if cache is None:
        raise UsageError("render_backward needs outputs from render() with its cache")
    act = cache.gaussians
    cam = cache.cam
    H, W = cam.height, cam.width
    n = act.count
    grads = GaussianGrads.zeros_like(act.raw) if act.raw is not None else None
    if grads is None:
        raise UsageError("render_backward needs gaussians built from a raw GaussianSet")
    d_opacity_direct = np.zeros(n) if cache.opacity_override is not None else None
    ndc_norm = np.zeros(n)
    visible = np.zeros(n, dtype=bool)
    nv = len(cache.vis)
    if nv == 0:
        return RasterGrads(grads, d_opacity_direct, ndc_norm, visible)
    visible[cache.vis] = True

    dC = np.ascontiguousarray(dL_dcolor.reshape(H * W, 3), dtype=np.float64)
    dD = (np.zeros(H * W) if dL_ddepth is None
          else np.ascontiguousarray(dL_ddepth.reshape(H * W), dtype=np.float64))
    dA = (np.zeros(H * W) if dL_dalpha is None
          else np.ascontiguousarray(dL_dalpha.reshape(H * W), dtype=np.float64))

    d_colors = np.zeros((nv, 3))
    d_depth_g = np.zeros(nv)
    d_alpha_pair = np.zeros(len(cache.pair_pix))
    if len(cache.pair_pix):
        _kernels.blend_backward(cache.pair_pix, cache.pair_g, cache.pair_alpha,
                                cache.t_pair, cache.keep, cache.colors,
                                cache.t_cam[:, 2], cache.t_final, cache.background,
                                dC, dD, dA, d_alpha_pair, d_colors, d_depth_g)
    # background path: alpha_img = 1 - prod(1-a) also feeds the composited color
    # through (1-alpha)*bg; that term is already inside blend_backward's suffix.

    # -- pair-level chain: alpha -> (opacity, mean2d, conic) --------------------
    pg = cache.pair_g
    live = cache.keep & ~cache.pair_clamped
    dal = np.where(live, d_alpha_pair, 0.0)
    G = cache.pair_G
    d_opac = np.bincount(pg, weights=dal * G, minlength=nv)
    dG = dal * cache.opac[pg]
    dq = -0.5 * dG * G
    px = cache.pair_pix % W
    py = cache.pair_pix // W
    dx = (px + 0.5) - cache.mean2d[pg, 0]
    dy = (py + 0.5) - cache.mean2d[pg, 1]
    da = dq * dx * dx
    db = dq * 2.0 * dx * dy
    dc = dq * dy * dy
    dqx = dq * (2.0 * cache.conic[pg, 0] * dx + 2.0 * cache.conic[pg, 1] * dy)
    dqy = dq * (2.0 * cache.conic[pg, 1] * dx + 2.0 * cache.conic[pg, 2] * dy)
    d_mean2d = np.stack([
        -np.bincount(pg, weights=dqx, minlength=nv),
        -np.bincount(pg, weights=dqy, minlength=nv),
    ], axis=1)
    d_conic = np.stack([np.bincount(pg, weights=da, minlength=nv),
                        np.bincount(pg, weights=db, minlength=nv),
                        np.bincount(pg, weights=dc, minlength=nv)], axis=1)

    # -- conic -> cov2d (dM = -C^T dC C for the inverse) -------------------------
    Cmat = np.empty((nv, 2, 2))
    Cmat[:, 0, 0] = cache.conic[:, 0]
    Cmat[:, 0, 1] = Cmat[:, 1, 0] = cache.conic[:, 1]
    Cmat[:, 1, 1] = cache.conic[:, 2]
    dCmat = np.empty((nv, 2, 2))
    dCmat[:, 0, 0] = d_conic[:, 0]
    dCmat[:, 0, 1] = dCmat[:, 1, 0] = 0.5 * d_conic[:, 1]
    dCmat[:, 1, 1] = d_conic[:, 2]
    d_cov2d = -Cmat @ dCmat @ Cmat  # symmetric

    # -- cov2d = P Sigma' P^T with P = J W M ------------------------------------
    R = quat_to_rotmat(act.quats[cache.vis])
    scales = act.scales[cache.vis]
    M = R * scales[:, None, :]
    JW = _projection_jacobian(cache.t_cam, cam) @ cam.rotation[None, :, :]
    P = JW @ M
    dP = 2.0 * d_cov2d @ P                      # (Nv,2,3)
    dM = np.swapaxes(JW, 1, 2) @ dP             # (Nv,3,3)
    dJW = dP @ np.swapaxes(M, 1, 2)
    dJ = dJW @ cam.rotation.T[None, :, :]

    # -- J entries back to camera-space mean -------------------------------------
    tx, ty, tz = cache.t_cam[:, 0], cache.t_cam[:, 1], cache.t_cam[:, 2]
    rcx = cache.ratio_clamped[:, 0]
    rcy = cache.ratio_clamped[:, 1]
    inv_z = 1.0 / tz
    inv_z2 = inv_z * inv_z
    d_tcam = np.zeros((nv, 3))
    # J00 = fx/tz, J11 = fy/tz
    d_tcam[:, 2] += dJ[:, 0, 0] * (-cam.fx * inv_z2)
    d_tcam[:, 2] += dJ[:, 1, 1] * (-cam.fy * inv_z2)
    # J02 = -fx * clamp(tx/tz) ; J12 = -fy * clamp(ty/tz)  (per-unit of 1/tz... )
    # J02 = -fx * rx/tz with rx = clamp(tx/tz): d/dtx = -fx/tz^2 (unclamped), 0 (clamped)
    #       d/dtz = 2 fx tx / tz^3 (unclamped), +fx rx /tz^2 ... handled via rx const
    rx = np.clip(tx * inv_z, -_limx(cam), _limx(cam))
    ry = np.clip(ty * inv_z, -_limy(cam), _limy(cam))
    d_tcam[:, 0] += np.where(rcx, 0.0, dJ[:, 0, 2] * (-cam.fx * inv_z2))
    d_tcam[:, 2] += np.where(rcx,
                             dJ[:, 0, 2] * (cam.fx * rx * inv_z2),
                             dJ[:, 0, 2] * (2.0 * cam.fx * tx * inv_z2 * inv_z))
    d_tcam[:, 1] += np.where(rcy, 0.0, dJ[:, 1, 2] * (-cam.fy * inv_z2))
    d_tcam[:, 2] += np.where(rcy,
                             dJ[:, 1, 2] * (cam.fy * ry * inv_z2),
                             dJ[:, 1, 2] * (2.0 * cam.fy * ty * inv_z2 * inv_z))

    # -- mean2d back to camera-space mean ----------------------------------------
    d_tcam[:, 0] += d_mean2d[:, 0] * cam.fx * inv_z
    d_tcam[:, 2] += d_mean2d[:, 0] * (-cam.fx * tx * inv_z2)
    d_tcam[:, 1] += d_mean2d[:, 1] * cam.fy * inv_z
    d_tcam[:, 2] += d_mean2d[:, 1] * (-cam.fy * ty * inv_z2)
    # depth payload is tz itself
    d_tcam[:, 2] += d_depth_g

    # -- color path: SH coefficients and view direction --------------------------
    d_colors_eff = d_colors * cache.color_mask
    k = cache.basis.shape[1]
    d_sh = np.einsum("nk,nc->nkc", cache.basis, d_colors_eff)
    degree = int(np.sqrt(k)) - 1
    d_mu_color = np.zeros((nv, 3))
    if degree > 0:
        jac = sh_basis_jacobian(cache.view_dir, degree)  # (Nv,K,3)
        d_dir = np.einsum("nkd,nkc,nc->nd", jac, act.sh_coeffs[cache.vis, :k, :],
                          d_colors_eff)
        # dir = view/|view|: project and scale
        proj = d_dir - cache.view_dir * np.sum(d_dir * cache.view_dir, axis=1,
                                               keepdims=True)
        d_mu_color = proj / cache.view_len[:, None]

    # -- assemble world-space position gradient ----------------------------------
    d_mu = d_tcam @ cam.rotation + d_mu_color

    # -- M = R diag(s): split into quaternion and log-scale gradients -------------
    d_scales = np.einsum("nij,nij->nj", dM, R)
    d_log_scales = d_scales * scales
    dR = dM * scales[:, None, :]
    d_quat_unit = rotmat_grad_to_quat(act.quats[cache.vis], dR)
    d_quat_raw = unit_quat_grad_to_raw(act.raw.rotations[cache.vis], d_quat_unit)

    # -- opacity ------------------------------------------------------------------
    if cache.opacity_override is not None:
        d_opacity_direct[cache.vis] = d_opac
    else:
        sig = act.opacities[cache.vis]
        grads.opacity_logits[cache.vis] += d_opac * sig * (1.0 - sig)

    grads.positions[cache.vis] += d_mu
    grads.log_scales[cache.vis] += d_log_scales
    grads.rotations[cache.vis] += d_quat_raw
    grads.sh_coeffs[cache.vis, :k, :] += d_sh
    # screen-position gradient magnitude in NDC units (ndc_x = 2u/W - 1), the
    # statistic the adaptive density control thresholds against
    ndc = d_mean2d * np.array([[W / 2.0, H / 2.0]])
    ndc_norm[cache.vis] = np.linalg.norm(ndc, axis=1)
    return RasterGrads(grads, d_opacity_direct, ndc_norm, visible)


def _limx(cam: Camera, guard: float = 1.3) -> float:
    return guard * (0.5 * cam.width / cam.fx + abs(cam.cx - 0.5 * cam.width) / cam.fx)


def _limy(cam: Camera, guard: float = 1.3) -> float:
    return guard * (0.5 * cam.height / cam.fy + abs(cam.cy - 0.5 * cam.height) / cam.fy)


# ---------------------------------------------------------------------------
# pseudo-normal from depth
# ---------------------------------------------------------------------------

def pseudo_normal_from_depth(depth: np.ndarray, alpha: np.ndarray, cam: Camera,
                             alpha_threshold: float = 0.5,
                             frame: str = "camera") -> np.ndarray:
    """Normals from the local plane of backprojected depth neighbors.

    Central differences over the 4-neighborhood; pixels with alpha below the
    threshold, or any neighbor below it, get a zero normal. Normals face the
    camera (n . view < 0). frame = "camera" | "world".
    """
    H, W = depth.shape
    us, vs = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    z = depth
    pts = np.stack([(us - cam.cx) / cam.fx * z, (vs - cam.cy) / cam.fy * z, z], axis=-1)
    normal = np.zeros((H, W, 3))
    if H < 3 or W < 3:
        return normal
    du = pts[1:-1, 2:] - pts[1:-1, :-2]
    dv = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    n = np.divide(n, norm, out=np.zeros_like(n), where=norm > 1e-12)
    # orient toward the camera
    flip = np.sum(n * pts[1:-1, 1:-1], axis=-1) > 0
    n[flip] *= -1.0
    ok = alpha >= alpha_threshold
    valid = (ok[1:-1, 1:-1] & ok[1:-1, 2:] & ok[1:-1, :-2] & ok[2:, 1:-1] & ok[:-2, 1:-1])
    n[~valid] = 0.0
    normal[1:-1, 1:-1] = n
    if frame == "world":
        normal = normal @ cam.rotation  # R^T applied row-wise
    elif frame != "camera":
        raise UsageError("frame must be 'camera' or 'world'")
    return normal


# ---------------------------------------------------------------------------
# photometric loss (L1 + D-SSIM)
# ---------------------------------------------------------------------------

_SSIM_WIN = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _ssim_kernel():
    half = (_SSIM_WIN - 1) / 2.0
    xs = np.arange(_SSIM_WIN) - half
    k = np.exp(-0.5 * (xs / _SSIM_SIGMA) ** 2)
    return k / k.sum()


_KERNEL_1D = _ssim_kernel()


def _blur(img: np.ndarray) -> np.ndarray:
    # zero padding keeps the operator self-adjoint (kernel is symmetric)
    out = correlate1d(img, _KERNEL_1D, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _KERNEL_1D, axis=1, mode="constant", cval=0.0)


def ssim_maps(x: np.ndarray, y: np.ndarray):
    """Per-pixel SSIM map and the intermediates needed for its gradient."""
    mu_x = _blur(x)
    mu_y = _blur(y)
    ex2 = _blur(x * x)
    ey2 = _blur(y * y)
    exy = _blur(x * y)
    sx2 = ex2 - mu_x * mu_x
    sy2 = ey2 - mu_y * mu_y
    sxy = exy - mu_x * mu_y
    c1 = _SSIM_K1 ** 2
    c2 = _SSIM_K2 ** 2
    a1 = 2.0 * mu_x * mu_y + c1
    a2 = 2.0 * sxy + c2
    b1 = mu_x * mu_x + mu_y * mu_y + c1
    b2 = sx2 + sy2 + c2
    smap = (a1 * a2) / (b1 * b2)
    return smap, (mu_x, mu_y, a1, a2, b1, b2)


def _ssim_grad(x, y, upstream, inter):
    """d(sum(upstream * smap))/dx via the closed-form filter adjoint."""
    mu_x, mu_y, a1, a2, b1, b2 = inter
    ia = 1.0 / (b1 * b2)
    pa1 = upstream * (a2 * ia)           # dS/dA1
    pa2 = upstream * (a1 * ia)           # dS/dA2
    pb1 = upstream * (-(a1 * a2) * ia / b1)
    pb2 = upstream * (-(a1 * a2) * ia / b2)
    dmu = 2.0 * (mu_y * pa1 + mu_x * pb1 - mu_y * pa2 - mu_x * pb2)
    return _blur(dmu) + 2.0 * x * _blur(pb2) + 2.0 * y * _blur(pa2)


def photometric_loss(rendered: np.ndarray, target: np.ndarray, lam: float = 0.2):
    """L_c = lam * D-SSIM + (1 - lam) * L1, with the gradient w.r.t. rendered.

    D-SSIM = (1 - SSIM)/2, SSIM averaged over pixels and channels
    (11x11 gaussian window, K1=0.01, K2=0.03, dynamic range 1).
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise UsageError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    n = rendered.size
    diff = rendered - target
    l1 = float(np.abs(diff).mean())
    grad = (1.0 - lam) / n * np.sign(diff)
    dssim = 0.0
    if lam != 0.0:
        ssim_sum = 0.0
        channels = rendered.shape[2] if rendered.ndim == 3 else 1
        pix = rendered.shape[0] * rendered.shape[1]
        upstream = np.full((rendered.shape[0], rendered.shape[1]),
                           -0.5 * lam / (pix * channels))
        for ch in range(channels):
            xc = rendered[..., ch] if rendered.ndim == 3 else rendered
            yc = target[..., ch] if rendered.ndim == 3 else target
            smap, inter = ssim_maps(xc, yc)
            ssim_sum += float(smap.mean())
            gch = _ssim_grad(xc, yc, upstream, inter)
            if rendered.ndim == 3:
                grad[..., ch] += gch
            else:
                grad += gch
        mssim = ssim_sum / channels
        dssim = (1.0 - mssim) / 2.0
    loss = lam * dssim + (1.0 - lam) * l1
    return loss, grad
