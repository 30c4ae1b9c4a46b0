"""SDF <-> Gaussian alignment: tight opacity control and loose regularization.

Tight coupling replaces each Gaussian's opacity with phi_beta(f(center)),
binding appearance optimization to the field. Loose coupling leaves opacity
free and instead pulls centers onto the zero level set (projection distance)
while aligning each Gaussian's shortest axis with the field normal.

Sign conventions: the shortest axis has no canonical orientation, so the
alignment term uses |n_g . n_hat|; surface projection moves against the
gradient for positive f (x - f * n_hat), the direction that actually lands on
the level set. The field normal is treated as a constant direction inside the
projection loss gradient; its own parameter gradient enters through f and, in
the alignment loss, through the full d(grad f) chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import (
    ActivatedGaussians,
    GaussianGrads,
    GaussianSet,
    activate,
    quat_to_rotmat,
    rotmat_grad_to_quat,
    shortest_axis_index,
    unit_quat_grad_to_raw,
)
from .sdf_field import FieldGrads, SdfField, sdf_to_opacity_derivs

GRAD_FLOOR = 1e-8  # |grad f| below this marks a degenerate normal


@dataclass
class TightOpacityResult:
    opacities: np.ndarray  # per-gaussian replacement opacities
    _cache: tuple

    def backward(self, d_opacity: np.ndarray, field_grads: FieldGrads,
                 gaussian_grads: GaussianGrads, weight: float = 1.0) -> None:
        """Chain dL/d(opacity) into the field (f, beta) and the centers."""
        cache, dphi_df, dphi_dbeta, scale, field = self._cache
        d_phi = np.asarray(d_opacity, dtype=np.float64) * scale * weight
        df = d_phi * dphi_df
        field_grads.log_beta += float(np.dot(d_phi, dphi_dbeta)) * field.beta
        dx = cache.backward_value(df, field_grads, need_dx=True)
        gaussian_grads.positions += dx


def tight_opacity(field: SdfField, gaussians, opacity_scale: float = 1.0) -> TightOpacityResult:
    """opacity_i = opacity_scale * phi_beta(f(mu_i)); carries its backward hook."""
    act = gaussians if isinstance(gaussians, ActivatedGaussians) else activate(gaussians)
    cache = field.forward(act.positions, need_grad=True)
    phi, dphi_df, dphi_dbeta = sdf_to_opacity_derivs(np.asarray(cache.f, dtype=np.float64),
                                                     field.beta)
    res = TightOpacityResult(opacities=opacity_scale * phi, _cache=None)
    res._cache = (cache, dphi_df, dphi_dbeta, opacity_scale, field)
    return res


def _field_normals(field: SdfField, x: np.ndarray):
    cache = field.forward(x, need_grad=True)
    g = np.asarray(cache.g, dtype=np.float64)
    norms = np.linalg.norm(g, axis=1)
    ok = norms >= GRAD_FLOOR
    safe = np.maximum(norms, GRAD_FLOOR)
    n_hat = g / safe[:, None]
    return cache, g, n_hat, norms, ok


def alignment_loss(field: SdfField, gaussians,
                   field_grads: FieldGrads | None = None,
                   gaussian_grads: GaussianGrads | None = None,
                   weight: float = 1.0) -> float:
    """mean(1 - |n_g . n_hat|) over Gaussians with a usable field gradient.

    Gradients flow to the quaternions (through the shortest axis) and to the
    field (through the normalized gradient); centers are fixed query points.
    """
    act = gaussians if isinstance(gaussians, ActivatedGaussians) else activate(gaussians)
    if act.count == 0:
        return 0.0
    cache, g, n_hat, norms, ok = _field_normals(field, act.positions)
    R = quat_to_rotmat(act.quats)
    axis = shortest_axis_index(act.scales)
    n_g = R[np.arange(act.count), :, axis]
    dots = np.sum(n_g * n_hat, axis=1)
    per = np.where(ok, 1.0 - np.abs(dots), 0.0)
    count = int(ok.sum())
    if count == 0:
        return 0.0
    loss = float(per.sum() / count)
    if field_grads is not None or gaussian_grads is not None:
        sgn = np.sign(dots)
        scale = -weight / count
        if gaussian_grads is not None and act.raw is not None:
            d_ng = (scale * sgn * ok)[:, None] * n_hat
            dR = np.zeros((act.count, 3, 3))
            dR[np.arange(act.count), :, axis] = d_ng
            dq_unit = rotmat_grad_to_quat(act.quats, dR)
            gaussian_grads.rotations += unit_quat_grad_to_raw(act.raw.rotations, dq_unit)
        if field_grads is not None:
            d_nhat = (scale * sgn * ok)[:, None] * n_g
            # n_hat = g/|g|: project out the radial component
            dg = (d_nhat - n_hat * np.sum(d_nhat * n_hat, axis=1, keepdims=True))
            dg /= np.maximum(norms, GRAD_FLOOR)[:, None]
            cache.backward_grad(dg, field_grads)
    return loss


def nearest_surface_point(field: SdfField, x: np.ndarray):
    """Project x onto the zero level set: x - f(x) * grad f / |grad f|.

    Returns (points, degenerate_mask); degenerate gradients leave the point
    unchanged and set the flag.
    """
    single = np.asarray(x).ndim == 1
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    cache, g, n_hat, norms, ok = _field_normals(field, x2)
    f = np.asarray(cache.f, dtype=np.float64)
    out = np.where(ok[:, None], x2 - f[:, None] * n_hat, x2)
    if single:
        return out[0], bool(~ok[0])
    return out, ~ok


def projection_distance_loss(field: SdfField, gaussians,
                             field_grads: FieldGrads | None = None,
                             gaussian_grads: GaussianGrads | None = None,
                             weight: float = 1.0) -> float:
    """mean_i sum_axis |f(mu_i) * n_hat_axis(mu_i)| — L1 distance to the projection.

    n_hat is held constant in the gradient; f's dependence on the center and the
    field parameters is exact.
    """
    act = gaussians if isinstance(gaussians, ActivatedGaussians) else activate(gaussians)
    if act.count == 0:
        return 0.0
    cache, g, n_hat, norms, ok = _field_normals(field, act.positions)
    f = np.asarray(cache.f, dtype=np.float64)
    l1_dir = np.abs(n_hat).sum(axis=1)
    per = np.where(ok, np.abs(f) * l1_dir, 0.0)
    count = int(ok.sum())
    if count == 0:
        return 0.0
    loss = float(per.sum() / count)
    if field_grads is not None or gaussian_grads is not None:
        df = np.where(ok, np.sign(f) * l1_dir, 0.0) * (weight / count)
        sink = field_grads if field_grads is not None else FieldGrads(field)
        dx = cache.backward_value(df, sink, need_dx=True)
        if gaussian_grads is not None and act.raw is not None:
            gaussian_grads.positions += dx
    return loss
