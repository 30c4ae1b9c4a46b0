"""Gaussian scene representation: raw parameters, activations, cameras, projection.

Gaussians are stored structure-of-arrays with *raw* (pre-activation)
parameters; `activate` produces unit quaternions, positive scales and
opacities in (0,1) along with everything the backward pass needs to chain
gradients back to the raw arrays.

Conventions: quaternions are (w, x, y, z); cameras are pinhole, y-down,
looking along +z in camera space; all geometry is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ParseError, UsageError

# Real spherical-harmonic constants, degrees 0..3 (y/z/x ordering at degree 1).
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sh_dim(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass
class GaussianSet:
    """Structure-of-arrays of raw per-Gaussian parameters.

    positions      (N, 3) world-space centers
    rotations      (N, 4) quaternions, normalized on activation
    log_scales     (N, 3) scale = exp(log_scale)
    opacity_logits (N,)   opacity = sigmoid(logit)
    sh_coeffs      (N, K, 3) RGB SH coefficients, K = (degree+1)^2
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray

    def __post_init__(self):
        n = len(self.positions)
        shapes = {
            "positions": (n, 3),
            "rotations": (n, 4),
            "log_scales": (n, 3),
            "opacity_logits": (n,),
        }
        for name, want in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != want:
                raise UsageError(f"{name} has shape {arr.shape}, expected {want}")
            setattr(self, name, arr)
        sh = np.asarray(self.sh_coeffs, dtype=np.float64)
        if sh.ndim != 3 or sh.shape[0] != n or sh.shape[2] != 3:
            raise UsageError(f"sh_coeffs has shape {sh.shape}, expected (N, K, 3)")
        k = sh.shape[1]
        if k not in (1, 4, 9, 16):
            raise UsageError(f"sh_coeffs K={k} is not (d+1)^2 for d in 0..3")
        self.sh_coeffs = sh

    @property
    def count(self) -> int:
        return len(self.positions)

    @property
    def sh_degree(self) -> int:
        return int(np.sqrt(self.sh_coeffs.shape[1])) - 1

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.positions.copy(),
            self.rotations.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.sh_coeffs.copy(),
        )

    def select(self, mask_or_idx) -> "GaussianSet":
        return GaussianSet(
            self.positions[mask_or_idx],
            self.rotations[mask_or_idx],
            self.log_scales[mask_or_idx],
            self.opacity_logits[mask_or_idx],
            self.sh_coeffs[mask_or_idx],
        )

    @staticmethod
    def concatenate(a: "GaussianSet", b: "GaussianSet") -> "GaussianSet":
        return GaussianSet(
            np.concatenate([a.positions, b.positions]),
            np.concatenate([a.rotations, b.rotations]),
            np.concatenate([a.log_scales, b.log_scales]),
            np.concatenate([a.opacity_logits, b.opacity_logits]),
            np.concatenate([a.sh_coeffs, b.sh_coeffs]),
        )

    def param_arrays(self) -> dict:
        return {
            "positions": self.positions,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "sh_coeffs": self.sh_coeffs,
        }


@dataclass
class GaussianGrads:
    """Gradients w.r.t. the raw GaussianSet arrays."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray

    @staticmethod
    def zeros_like(gs: GaussianSet) -> "GaussianGrads":
        return GaussianGrads(
            np.zeros_like(gs.positions),
            np.zeros_like(gs.rotations),
            np.zeros_like(gs.log_scales),
            np.zeros_like(gs.opacity_logits),
            np.zeros_like(gs.sh_coeffs),
        )

    def add_(self, other: "GaussianGrads", weight: float = 1.0) -> "GaussianGrads":
        self.positions += weight * other.positions
        self.rotations += weight * other.rotations
        self.log_scales += weight * other.log_scales
        self.opacity_logits += weight * other.opacity_logits
        self.sh_coeffs += weight * other.sh_coeffs
        return self

    def param_arrays(self) -> dict:
        return {
            "positions": self.positions,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "sh_coeffs": self.sh_coeffs,
        }


# ---------------------------------------------------------------------------
# quaternions and activations
# ---------------------------------------------------------------------------

def normalize_quaternions(q: np.ndarray, tol: float = 1e-12):
    """Return unit quaternions plus the norms needed for the backward pass."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    norms = np.linalg.norm(q, axis=-1)
    if np.any(norms < tol):
        bad = int(np.argmin(norms))
        raise ParameterError(f"zero-norm quaternion at index {bad}")
    return q / norms[:, None], norms


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (N, 4) -> rotation matrices (N, 3, 3)."""
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_grad_to_quat(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Chain dL/dR (N,3,3) back to dL/dq for *unit* q (N,4)."""
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    # dR/dw, dR/dx, dR/dy, dR/dz of the matrix in quat_to_rotmat
    zero = np.zeros_like(w)

    def mat(rows):
        m = np.empty((len(q), 3, 3))
        for i in range(3):
            for j in range(3):
                m[:, i, j] = rows[i][j]
        return m

    dRw = mat([[zero, -2 * z, 2 * y], [2 * z, zero, -2 * x], [-2 * y, 2 * x, zero]])
    dRx = mat([[zero, 2 * y, 2 * z], [2 * y, -4 * x, -2 * w], [2 * z, 2 * w, -4 * x]])
    dRy = mat([[-4 * y, 2 * x, 2 * w], [2 * x, zero, 2 * z], [-2 * w, 2 * z, -4 * y]])
    dRz = mat([[-4 * z, -2 * w, 2 * x], [2 * w, -4 * z, 2 * y], [2 * x, 2 * y, zero]])
    dq = np.stack(
        [
            np.einsum("nij,nij->n", dR, dRw),
            np.einsum("nij,nij->n", dR, dRx),
            np.einsum("nij,nij->n", dR, dRy),
            np.einsum("nij,nij->n", dR, dRz),
        ],
        axis=-1,
    )
    return dq


def unit_quat_grad_to_raw(q_raw: np.ndarray, dq_unit: np.ndarray) -> np.ndarray:
    """Backprop through q_hat = q / |q|: dL/dq_raw from dL/dq_hat."""
    q_raw = np.atleast_2d(q_raw)
    norms = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    qh = q_raw / norms
    return (dq_unit - qh * np.sum(dq_unit * qh, axis=-1, keepdims=True)) / norms


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def inverse_sigmoid(y):
    y = np.asarray(y, dtype=np.float64)
    return np.log(y) - np.log1p(-y)


@dataclass
class ActivatedGaussians:
    """Activated view of a GaussianSet (unit quats, positive scales, opacity in (0,1))."""

    positions: np.ndarray
    quats: np.ndarray        # unit
    scales: np.ndarray       # exp(log_scales)
    opacities: np.ndarray    # sigmoid(logits)
    sh_coeffs: np.ndarray
    raw: GaussianSet = field(repr=False, default=None)

    @property
    def count(self) -> int:
        return len(self.positions)


def activate(gs: GaussianSet) -> ActivatedGaussians:
    """Apply the activations; raises ParameterError on zero-norm quaternions."""
    quats, _ = normalize_quaternions(gs.rotations)
    return ActivatedGaussians(
        positions=gs.positions,
        quats=quats,
        scales=np.exp(gs.log_scales),
        opacities=sigmoid(gs.opacity_logits),
        sh_coeffs=gs.sh_coeffs,
        raw=gs,
    )


# ---------------------------------------------------------------------------
# covariance
# ---------------------------------------------------------------------------

def build_covariance(rotation: np.ndarray, scale: np.ndarray, quat_tol: float = 1e-6) -> np.ndarray:
    """Sigma = R S S^T R^T for unit quaternion(s) and positive scale(s).

    Accepts a single (4,)/(3,) pair or batches (N,4)/(N,3); returns (3,3) or (N,3,3).
    """
    q = np.atleast_2d(np.asarray(rotation, dtype=np.float64))
    s = np.atleast_2d(np.asarray(scale, dtype=np.float64))
    norms = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(norms - 1.0) > quat_tol):
        raise ParameterError("quaternion is not unit-norm within tolerance")
    if np.any(s <= 0):
        raise ParameterError("scales must be positive")
    R = quat_to_rotmat(q)
    M = R * s[:, None, :]  # R @ diag(s)
    cov = M @ np.swapaxes(M, -1, -2)
    return cov[0] if np.asarray(rotation).ndim == 1 else cov


def shortest_axis_index(scale: np.ndarray, tie_tol: float = 1e-9) -> np.ndarray:
    """Index of the minimal scale, ties within tie_tol resolved to the lowest index."""
    s = np.atleast_2d(np.asarray(scale, dtype=np.float64))
    close = s - s.min(axis=-1, keepdims=True) <= tie_tol
    return np.argmax(close, axis=-1)


def shortest_axis_normal(rotation: np.ndarray, scale: np.ndarray, tie_tol: float = 1e-9) -> np.ndarray:
    """Rotated basis axis with the minimal activated scale (unit vector).

    Ties within tie_tol pick the lowest axis index, keeping tests deterministic.
    """
    q = np.atleast_2d(np.asarray(rotation, dtype=np.float64))
    s = np.atleast_2d(np.asarray(scale, dtype=np.float64))
    R = quat_to_rotmat(q)
    axis = shortest_axis_index(s, tie_tol)
    n = R[np.arange(len(q)), :, axis]
    return n[0] if np.asarray(rotation).ndim == 1 else n


# ---------------------------------------------------------------------------
# camera
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole camera; world_to_camera is a rigid 4x4, camera looks down +z."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        if self.world_to_camera.shape != (4, 4):
            raise UsageError("world_to_camera must be 4x4")
        if self.fx <= 0 or self.fy <= 0:
            raise ParameterError("focal lengths must be positive")
        R = self.world_to_camera[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ParameterError("world_to_camera rotation block is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        return pts @ self.rotation.T + self.translation

    def project(self, points: np.ndarray):
        """World points -> (pixel uv, camera-space depth z)."""
        pts = np.atleast_2d(points)
        cam = self.to_camera(pts)
        z = cam[:, 2]
        u = self.fx * cam[:, 0] / z + self.cx
        v = self.fy * cam[:, 1] / z + self.cy
        uv = np.stack([u, v], axis=-1)
        if np.asarray(points).ndim == 1:
            return uv[0], z[0]
        return uv, z

    def unproject(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Pixel uv + camera-space depth -> world points."""
        uv = np.atleast_2d(uv)
        z = np.atleast_1d(np.asarray(depth, dtype=np.float64))
        x = (uv[:, 0] - self.cx) / self.fx * z
        y = (uv[:, 1] - self.cy) / self.fy * z
        cam = np.stack([x, y, z], axis=-1)
        world = (cam - self.translation) @ self.rotation
        if np.asarray(uv).ndim == 1:
            return world[0]
        return world

    def pixel_rays(self, uv: np.ndarray):
        """Rays through the given pixel coordinates: (origins, unit world directions)."""
        uv = np.atleast_2d(uv)
        d_cam = np.stack(
            [
                (uv[:, 0] - self.cx) / self.fx,
                (uv[:, 1] - self.cy) / self.fy,
                np.ones(len(uv)),
            ],
            axis=-1,
        )
        d_world = d_cam @ self.rotation
        d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
        origins = np.broadcast_to(self.center, d_world.shape).copy()
        return origins, d_world

    @staticmethod
    def look_at(position, target, up=(0.0, 0.0, 1.0), width=64, height=64, fov_x=0.85):
        """Camera at `position` looking at `target`; fov_x in radians."""
        position = np.asarray(position, dtype=np.float64)
        zc = np.asarray(target, dtype=np.float64) - position
        zc /= np.linalg.norm(zc)
        up = np.asarray(up, dtype=np.float64)
        xc = np.cross(zc, up)
        nx = np.linalg.norm(xc)
        if nx < 1e-8:  # looking straight along up: fall back to y axis
            xc = np.cross(zc, np.array([0.0, 1.0, 0.0]))
            nx = np.linalg.norm(xc)
        xc /= nx
        yc = np.cross(zc, xc)
        R = np.stack([xc, yc, zc])
        w2c = np.eye(4)
        w2c[:3, :3] = R
        w2c[:3, 3] = -R @ position
        fx = 0.5 * width / np.tan(0.5 * fov_x)
        return Camera(width, height, fx, fx, width / 2.0, height / 2.0, w2c)


# ---------------------------------------------------------------------------
# EWA projection
# ---------------------------------------------------------------------------

COV2D_FLOOR = 0.3  # px^2 low-pass added to the projected covariance diagonal


def project_gaussian(mean: np.ndarray, cov: np.ndarray, cam: Camera,
                     z_near: float = 0.01, guard: float = 1.3):
    """Project one 3D Gaussian to screen space.

    Returns (mean2d, cov2d, depth) or None when culled (behind z_near).
    cov2d includes the +0.3 px^2 diagonal floor.
    """
    t = cam.to_camera(mean)[0]
    if t[2] <= z_near:
        return None
    J = _projection_jacobian(t[None, :], cam, guard)[0]
    W = cam.rotation
    cov2d = J @ W @ np.asarray(cov, dtype=np.float64) @ W.T @ J.T
    cov2d = cov2d + COV2D_FLOOR * np.eye(2)
    mean2d = np.array([cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy])
    return mean2d, cov2d, t[2]


def _projection_jacobian(t_cam: np.ndarray, cam: Camera, guard: float = 1.3):
    """Affine Jacobian of perspective projection at camera-space means (N,3).

    The tangent ratios feeding the off-axis terms are clamped to guard * tan(fov/2),
    matching the reference splatting formulation.
    """
    tx, ty, tz = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    lim_x = guard * (0.5 * cam.width / cam.fx + np.abs(cam.cx - 0.5 * cam.width) / cam.fx)
    lim_y = guard * (0.5 * cam.height / cam.fy + np.abs(cam.cy - 0.5 * cam.height) / cam.fy)
    rx = np.clip(tx / tz, -lim_x, lim_x)
    ry = np.clip(ty / tz, -lim_y, lim_y)
    J = np.zeros((len(t_cam), 2, 3))
    J[:, 0, 0] = cam.fx / tz
    J[:, 0, 2] = -cam.fx * rx / tz
    J[:, 1, 1] = cam.fy / tz
    J[:, 1, 2] = -cam.fy * ry / tz
    return J


# ---------------------------------------------------------------------------
# spherical harmonics
# ---------------------------------------------------------------------------

def sh_basis(view_dir: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values at unit directions (N,3) -> (N, (degree+1)^2)."""
    d = np.atleast_2d(view_dir)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    out = np.empty((len(d), sh_dim(degree)))
    out[:, 0] = SH_C0
    if degree >= 1:
        out[:, 1] = -SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = SH_C2[0] * x * y
        out[:, 5] = SH_C2[1] * y * z
        out[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[:, 7] = SH_C2[3] * x * z
        out[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[:, 10] = SH_C3[1] * x * y * z
        out[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[:, 14] = SH_C3[5] * z * (xx - yy)
        out[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_jacobian(view_dir: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(dir): (N, K, 3) for unit directions (before re-normalization chain)."""
    d = np.atleast_2d(view_dir)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    n = len(d)
    jac = np.zeros((n, sh_dim(degree), 3))
    if degree >= 1:
        jac[:, 1, 1] = -SH_C1
        jac[:, 2, 2] = SH_C1
        jac[:, 3, 0] = -SH_C1
    if degree >= 2:
        jac[:, 4, 0] = SH_C2[0] * y
        jac[:, 4, 1] = SH_C2[0] * x
        jac[:, 5, 1] = SH_C2[1] * z
        jac[:, 5, 2] = SH_C2[1] * y
        jac[:, 6, 0] = SH_C2[2] * (-2.0 * x)
        jac[:, 6, 1] = SH_C2[2] * (-2.0 * y)
        jac[:, 6, 2] = SH_C2[2] * 4.0 * z
        jac[:, 7, 0] = SH_C2[3] * z
        jac[:, 7, 2] = SH_C2[3] * x
        jac[:, 8, 0] = SH_C2[4] * 2.0 * x
        jac[:, 8, 1] = SH_C2[4] * (-2.0 * y)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        jac[:, 9, 0] = SH_C3[0] * 6.0 * x * y
        jac[:, 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
        jac[:, 10, 0] = SH_C3[1] * y * z
        jac[:, 10, 1] = SH_C3[1] * x * z
        jac[:, 10, 2] = SH_C3[1] * x * y
        jac[:, 11, 0] = SH_C3[2] * (-2.0 * x * y)
        jac[:, 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
        jac[:, 11, 2] = SH_C3[2] * 8.0 * y * z
        jac[:, 12, 0] = SH_C3[3] * (-6.0 * x * z)
        jac[:, 12, 1] = SH_C3[3] * (-6.0 * y * z)
        jac[:, 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        jac[:, 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
        jac[:, 13, 1] = SH_C3[4] * (-2.0 * x * y)
        jac[:, 13, 2] = SH_C3[4] * 8.0 * x * z
        jac[:, 14, 0] = SH_C3[5] * 2.0 * x * z
        jac[:, 14, 1] = SH_C3[5] * (-2.0 * y * z)
        jac[:, 14, 2] = SH_C3[5] * (xx - yy)
        jac[:, 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
        jac[:, 15, 1] = SH_C3[6] * (-6.0 * x * y)
    return jac


def sh_to_color(sh_coeffs: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """Evaluate SH color at unit view directions; includes the +0.5 degree-0 offset.

    sh_coeffs (N, K, 3) with per-row view_dir (N, 3) or a single direction.
    Output is unclamped; the renderer clamps to [0, inf).
    """
    sh = np.asarray(sh_coeffs, dtype=np.float64)
    single = sh.ndim == 2
    if single:
        sh = sh[None]
    degree = int(np.sqrt(sh.shape[1])) - 1
    d = np.atleast_2d(np.asarray(view_dir, dtype=np.float64))
    if len(d) == 1 and len(sh) > 1:
        d = np.broadcast_to(d, (len(sh), 3))
    basis = sh_basis(d, degree)
    color = np.einsum("nk,nkc->nc", basis, sh) + 0.5
    return color[0] if single else color


# ---------------------------------------------------------------------------
# PLY serialization (de-facto 3DGS property layout)
# ---------------------------------------------------------------------------

def write_gaussians_ply(gs: GaussianSet, path) -> None:
    """Binary little-endian PLY with the community 3DGS property layout."""
    n = gs.count
    k = gs.sh_coeffs.shape[1]
    rest = k - 1
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * rest)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]

    cols = [gs.positions, np.zeros((n, 3))]
    cols.append(gs.sh_coeffs[:, 0, :])
    if rest:
        # channel-major: all R higher-order coeffs, then G, then B
        cols.append(gs.sh_coeffs[:, 1:, :].transpose(0, 2, 1).reshape(n, 3 * rest))
    cols += [gs.opacity_logits[:, None], gs.log_scales, gs.rotations]
    data = np.concatenate(cols, axis=1).astype("<f4")

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())


def read_gaussians_ply(path) -> GaussianSet:
    """Read a 3DGS-layout PLY (binary little-endian or ascii)."""
    props, rows = _read_ply_vertices(path)
    col = {name: i for i, name in enumerate(props)}
    for required in ("x", "y", "z", "opacity", "scale_0", "rot_0", "f_dc_0"):
        if required not in col:
            raise ParseError(f"{path}: missing gaussian property '{required}'")
    n = len(rows)
    rest = sum(1 for p in props if p.startswith("f_rest_")) // 3
    k = rest + 1
    sh = np.zeros((n, k, 3))
    sh[:, 0, 0] = rows[:, col["f_dc_0"]]
    sh[:, 0, 1] = rows[:, col["f_dc_1"]]
    sh[:, 0, 2] = rows[:, col["f_dc_2"]]
    for ch in range(3):
        for j in range(rest):
            sh[:, 1 + j, ch] = rows[:, col[f"f_rest_{ch * rest + j}"]]
    return GaussianSet(
        positions=rows[:, [col["x"], col["y"], col["z"]]],
        rotations=rows[:, [col["rot_0"], col["rot_1"], col["rot_2"], col["rot_3"]]],
        log_scales=rows[:, [col["scale_0"], col["scale_1"], col["scale_2"]]],
        opacity_logits=rows[:, col["opacity"]],
        sh_coeffs=sh,
    )


def _read_ply_vertices(path):
    """Minimal PLY vertex reader: float32 vertex properties only."""
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"end_header")
    if end < 0:
        raise ParseError(f"{path}: no end_header in PLY")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end:]
    body = body[body.find(b"\n") + 1:]
    fmt = None
    count = 0
    props = []
    in_vertex = False
    for line_no, line in enumerate(header, 1):
        tok = line.strip().split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] not in ("float", "float32", "double", "float64"):
                raise ParseError(f"{path}:{line_no}: unsupported vertex property type {tok[1]}")
            props.append((tok[2], tok[1]))
    if fmt is None:
        raise ParseError(f"{path}: missing PLY format line")
    names = [p[0] for p in props]
    if fmt == "ascii":
        vals = []
        lines = body.decode("ascii").splitlines()
        for i in range(count):
            parts = lines[i].split()
            if len(parts) != len(props):
                raise ParseError(f"{path}: vertex line {i} has {len(parts)} fields, expected {len(props)}")
            vals.append([float(v) for v in parts])
        rows = np.array(vals, dtype=np.float64).reshape(count, len(props))
    elif fmt == "binary_little_endian":
        fmt_map = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8"}
        dtype = np.dtype([(name, fmt_map[t]) for name, t in props])
        rows_struct = np.frombuffer(body[: count * dtype.itemsize], dtype=dtype, count=count)
        rows = np.stack([rows_struct[name].astype(np.float64) for name in names], axis=1) \
            if count else np.zeros((0, len(props)))
    else:
        raise ParseError(f"{path}: unsupported PLY format {fmt}")
    return names, rows
