"""Neural signed distance field: multi-resolution hash grid + one-hidden-layer MLP.

The field is f(x) = w2 . softplus(W1 [enc(x); x] + b1) + b2, with enc the
trilinearly-interpolated hash-grid features. Everything is hand-differentiated:
`backward_value` chains an upstream dL/df into parameter gradients, and
`backward_grad` chains an upstream dL/d(grad f) — the machinery behind the
Eikonal, alignment and volumetric-normal losses (those differentiate the
*spatial gradient* of f w.r.t. the parameters, which needs the second
sigmoid derivative and the feature terms of the interpolation Jacobian).

Also hosts the opacity transform phi_beta, the Eikonal loss and the sphere
initialization. Level tables live in one flat array so the optimizer and the
numba kernels see a single contiguous buffer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import InitializationError, UsageError
from .scene import sigmoid

CHECKPOINT_MAGIC = b"SPLATSURF-SDF-1\n"
ACT_EPS = 0.04  # curvature scale of the smooth-ReLU MLP activation


@dataclass
class FieldConfig:
    n_levels: int = 8
    features_per_level: int = 2
    base_resolution: int = 16
    growth: float = 1.5
    log2_table_size: int = 15
    hidden: int = 64
    feature_init: float = 1e-4
    bounds_lo: tuple = (-1.0, -1.0, -1.0)
    bounds_hi: tuple = (1.0, 1.0, 1.0)
    beta_init: float = 10.0
    s_init: float = 10.0

    def resolutions(self):
        return [int(np.floor(self.base_resolution * self.growth ** l))
                for l in range(self.n_levels)]


class SdfField:
    """Hash-grid SDF with learnable opacity sharpness beta and sigmoid sharpness s.

    dtype picks the compute/storage precision: float32 keeps desk-scale training
    inside the CPU memory-bandwidth budget, float64 serves the finite-difference
    gradient suites. Checkpoints always store float64.
    """

    def __init__(self, config: FieldConfig | None = None, rng=None, dtype=np.float32):
        self.config = config or FieldConfig()
        self.dtype = np.dtype(dtype)
        rng = rng or np.random.default_rng(0)
        cfg = self.config
        self.bounds = np.array([cfg.bounds_lo, cfg.bounds_hi], dtype=self.dtype)
        self.resolutions = np.array(cfg.resolutions(), dtype=np.int64)
        table_size = 1 << cfg.log2_table_size
        entries = [min(int(r) ** 3, table_size) for r in self.resolutions]
        self.table_offsets = np.concatenate([[0], np.cumsum(entries)]).astype(np.int64)
        self.table_data = rng.uniform(
            -cfg.feature_init, cfg.feature_init,
            size=(self.table_offsets[-1], cfg.features_per_level)).astype(self.dtype)
        d_in = cfg.n_levels * cfg.features_per_level + 3
        h = cfg.hidden
        # geometric-ish init: xyz columns dominant so f starts out roughly radial
        self.w1 = np.zeros((h, d_in), dtype=self.dtype)
        self.w1[:, :d_in - 3] = rng.normal(0.0, 1e-2, size=(h, d_in - 3))
        self.w1[:, d_in - 3:] = rng.normal(0.0, np.sqrt(2.0 / 3.0), size=(h, 3))
        self.b1 = np.zeros(h, dtype=self.dtype)
        self.w2 = np.full(h, np.sqrt(np.pi / h), dtype=self.dtype)
        self.b2 = np.array([-0.5], dtype=self.dtype)
        self.log_beta = np.array([np.log(cfg.beta_init)], dtype=self.dtype)
        self.log_s = np.array([np.log(cfg.s_init)], dtype=self.dtype)

    # -- parameter bookkeeping ------------------------------------------------

    def params(self) -> dict:
        return {
            "tables": self.table_data,
            "w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
            "log_beta": self.log_beta, "log_s": self.log_s,
        }

    def level_table(self, l: int) -> np.ndarray:
        return self.table_data[self.table_offsets[l]:self.table_offsets[l + 1]]

    @property
    def beta(self) -> float:
        return float(np.exp(self.log_beta[0]))

    @property
    def s(self) -> float:
        return float(np.exp(self.log_s[0]))

    @property
    def bounds_diagonal(self) -> float:
        return float(np.linalg.norm(self.bounds[1] - self.bounds[0]))

    def finest_cell(self) -> float:
        ext = (self.bounds[1] - self.bounds[0]).min()
        return float(ext / (self.resolutions[-1] - 1))

    # -- forward / gradients ---------------------------------------------------

    def encode(self, x: np.ndarray):
        """Hash-grid features (B, L*F) plus out-of-bounds flags (B,)."""
        cache = self.forward(x)
        d_enc = self.config.n_levels * self.config.features_per_level
        return cache.h[:, :d_enc], cache.oob

    def forward(self, x: np.ndarray, need_grad: bool = False) -> "FieldCache":
        """Evaluate f (and optionally grad f) at x, retaining the backward cache."""
        dt = self.dtype
        x = np.ascontiguousarray(np.atleast_2d(x), dtype=dt)
        lo, hi = self.bounds
        oob = np.any((x < lo) | (x > hi), axis=1)
        xc = np.clip(x, lo, hi)
        in_ax = ((x >= lo) & (x <= hi)).astype(dt)
        B = len(x)
        cfg = self.config
        L, F = cfg.n_levels, cfg.features_per_level
        d_enc = L * F

        h = np.empty((B, d_enc + 3), dtype=dt)
        enc = h[:, :d_enc]
        enc[:] = 0.0
        h[:, d_enc:] = x
        denc = np.zeros((B, d_enc, 3), dtype=dt) if need_grad else np.zeros((0, d_enc, 3), dtype=dt)
        idx = np.empty((B, L, 8), dtype=np.int32)
        w = np.empty((B, L, 8), dtype=dt)
        dwdx = np.empty((B, L, 8, 3), dtype=dt) if need_grad else np.empty((0, L, 8, 3), dtype=dt)
        _kernels.encode_forward(xc, in_ax, lo, hi, self.resolutions,
                                self.table_offsets, self.table_data, F,
                                np.int64((1 << cfg.log2_table_size) - 1),
                                need_grad, enc, denc, idx, w, dwdx)

        z1 = h @ self.w1.T
        z1 += self.b1
        # smooth-ReLU activation 0.5 (z + sqrt(z^2 + eps)): softplus-shaped but
        # algebraic, so the activation and both derivatives cost one sqrt
        r = z1 * z1
        r += ACT_EPS
        np.sqrt(r, out=r)
        f = 0.5 * (z1 @ self.w2 + r @ self.w2) + self.b2[0]

        g = None
        v = None
        d_act = None
        if need_grad:
            d_act = 0.5 * (1.0 + z1 / r)
            v = (self.w2 * d_act) @ self.w1  # (B, D)
            g = np.einsum("bdk,bd->bk", denc, v[:, :d_enc]) + v[:, d_enc:]
        return FieldCache(self, x, idx, w, dwdx, oob, h, z1, r, d_act, f, g, denc, v)

    def eval(self, x: np.ndarray) -> np.ndarray:
        """Signed distance at x: (B,) for batches, float for a single point."""
        single = np.asarray(x).ndim == 1
        f = self.forward(x).f
        return float(f[0]) if single else f

    def grad(self, x: np.ndarray) -> np.ndarray:
        """Spatial gradient of f at x via the analytic chain rule."""
        single = np.asarray(x).ndim == 1
        g = self.forward(x, need_grad=True).g
        return g[0] if single else g

    # -- checkpointing ----------------------------------------------------------

    def save(self, path) -> None:
        cfg = self.config
        header = {
            "n_levels": cfg.n_levels,
            "features_per_level": cfg.features_per_level,
            "base_resolution": cfg.base_resolution,
            "growth": cfg.growth,
            "log2_table_size": cfg.log2_table_size,
            "hidden": cfg.hidden,
            "bounds_lo": [float(b) for b in self.bounds[0]],
            "bounds_hi": [float(b) for b in self.bounds[1]],
            "resolutions": [int(r) for r in self.resolutions],
            "table_rows": int(self.table_offsets[-1]),
        }
        blob = json.dumps(header).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(len(blob).to_bytes(8, "little"))
            fh.write(blob)
            for arr in (self.table_data, self.w1, self.b1, self.w2, self.b2,
                        self.log_beta, self.log_s):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @staticmethod
    def load(path, dtype=np.float32) -> "SdfField":
        with open(path, "rb") as fh:
            magic = fh.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise UsageError(f"{path}: not a field checkpoint")
            n = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(n).decode("utf-8"))
            cfg = FieldConfig(
                n_levels=header["n_levels"],
                features_per_level=header["features_per_level"],
                base_resolution=header["base_resolution"],
                growth=header["growth"],
                log2_table_size=header["log2_table_size"],
                hidden=header["hidden"],
                bounds_lo=tuple(header["bounds_lo"]),
                bounds_hi=tuple(header["bounds_hi"]),
            )
            field = SdfField(cfg, dtype=dtype)

            def read_arr(shape):
                size = int(np.prod(shape))
                return np.frombuffer(fh.read(size * 8), dtype="<f8").reshape(shape).astype(field.dtype)

            F = cfg.features_per_level
            field.table_data = read_arr((header["table_rows"], F))
            d_in = cfg.n_levels * F + 3
            field.w1 = read_arr((cfg.hidden, d_in))
            field.b1 = read_arr((cfg.hidden,))
            field.w2 = read_arr((cfg.hidden,))
            field.b2 = read_arr((1,))
            field.log_beta = read_arr((1,))
            field.log_s = read_arr((1,))
        return field


@dataclass
class FieldCache:
    """Forward intermediates retained for the analytic backward passes."""

    field: SdfField
    x: np.ndarray
    idx: np.ndarray
    w: np.ndarray
    dwdx: np.ndarray
    oob: np.ndarray
    h: np.ndarray
    z1: np.ndarray
    r: np.ndarray              # sqrt(z1^2 + eps)
    _d_act: np.ndarray | None  # activation derivative, lazily materialized
    f: np.ndarray
    g: np.ndarray | None
    denc: np.ndarray
    v: np.ndarray | None

    @property
    def d_act(self) -> np.ndarray:
        if self._d_act is None:
            self._d_act = 0.5 * (1.0 + self.z1 / self.r)
        return self._d_act

    def backward_value(self, df: np.ndarray, grads: "FieldGrads", need_dx: bool = False):
        """Chain dL/df (B,) into parameter grads; optionally return dL/dx (B,3)."""
        fld = self.field
        df = np.asarray(df, dtype=fld.dtype)
        # act = 0.5 (z1 + r), so act^T df splits into two matvecs
        grads.w2 += 0.5 * (self.z1.T @ df + self.r.T @ df)
        grads.b2 += df.sum()
        dz1 = df[:, None] * fld.w2[None, :]
        dz1 *= self.d_act
        grads.w1 += dz1.T @ self.h
        grads.b1 += dz1.sum(axis=0)
        dh = dz1 @ fld.w1
        d_enc = fld.config.n_levels * fld.config.features_per_level
        self._scatter_features(dh[:, :d_enc], grads)
        if need_dx:
            if self.g is None:
                raise UsageError("need_dx requires forward(..., need_grad=True)")
            dx = np.einsum("bdk,bd->bk", self.denc, dh[:, :d_enc]) + dh[:, d_enc:]
            return dx
        return None

    def backward_grad(self, dg: np.ndarray, grads: "FieldGrads"):
        """Chain dL/d(grad f) (B,3) into parameter grads (first order in parameters)."""
        if self.g is None:
            raise UsageError("forward was run without need_grad=True")
        fld = self.field
        dg = np.ascontiguousarray(dg, dtype=fld.dtype)
        cfg = fld.config
        d_enc = cfg.n_levels * cfg.features_per_level
        B = len(self.x)

        # g = J^T v with J the encoding Jacobian (identity rows for the xyz skip)
        dv = np.empty_like(self.v)
        dv[:, :d_enc] = np.einsum("bdk,bk->bd", self.denc, dg)
        dv[:, d_enc:] = dg
        # v = (w2 * d_act) @ w1
        u = fld.w2[None, :] * self.d_act  # (B,H)
        grads.w1 += u.T @ dv
        du = dv @ fld.w1.T
        grads.w2 += (self.d_act * du).sum(axis=0)
        # second derivative of the smooth ReLU: 0.5 * eps / r^3
        dz1 = du * fld.w2[None, :]
        dz1 *= 0.5 * ACT_EPS
        dz1 /= self.r * self.r * self.r
        grads.w1 += dz1.T @ self.h
        grads.b1 += dz1.sum(axis=0)
        dh = dz1 @ fld.w1
        self._scatter_features(dh[:, :d_enc], grads)
        # J itself is linear in the features: dF[c,f] += (dw_c/dx . dg) * v[(l,f)]
        v_enc = np.ascontiguousarray(self.v[:, :d_enc].reshape(B, cfg.n_levels,
                                                               cfg.features_per_level))
        _kernels.scatter_jacobian(self.idx, self.dwdx, dg, v_enc, grads.tables)

    def _scatter_features(self, denc_flat: np.ndarray, grads: "FieldGrads"):
        cfg = self.field.config
        dlevel = np.ascontiguousarray(
            denc_flat.reshape(len(self.x), cfg.n_levels, cfg.features_per_level))
        _kernels.scatter_weighted(self.idx, self.w, dlevel, grads.tables)


class FieldGrads:
    """Gradient accumulator matching SdfField.params()."""

    def __init__(self, field: SdfField):
        self.tables = np.zeros_like(field.table_data)
        self.w1 = np.zeros_like(field.w1)
        self.b1 = np.zeros_like(field.b1)
        self.w2 = np.zeros_like(field.w2)
        self.b2 = np.zeros_like(field.b2)
        self.log_beta = np.zeros_like(field.log_beta)
        self.log_s = np.zeros_like(field.log_s)

    def params(self) -> dict:
        return {
            "tables": self.tables,
            "w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
            "log_beta": self.log_beta, "log_s": self.log_s,
        }

    def add_(self, other: "FieldGrads", weight: float = 1.0) -> "FieldGrads":
        for mine, theirs in zip(self.params().values(), other.params().values()):
            mine += weight * theirs
        return self

    def scale_(self, weight: float) -> "FieldGrads":
        for arr in self.params().values():
            arr *= weight
        return self


# ---------------------------------------------------------------------------
# SDF-to-opacity transform
# ---------------------------------------------------------------------------

def sdf_to_opacity(f_value, beta):
    """Bell-shaped transform exp(-beta f) / (1 + exp(-beta f))^2, peak 0.25 at f=0."""
    if np.any(np.asarray(beta) <= 0):
        raise UsageError("beta must be positive")
    t = np.asarray(f_value, dtype=np.float64) * beta
    s = sigmoid(np.atleast_1d(t))
    out = s * (1.0 - s)
    return float(out[0]) if np.ndim(f_value) == 0 else out.reshape(np.shape(f_value))


def sdf_to_opacity_derivs(f_value, beta):
    """(phi, dphi/df, dphi/dbeta) for the tight-coupling backward."""
    f = np.asarray(f_value, dtype=np.float64)
    s = sigmoid(np.atleast_1d(f * beta)).reshape(f.shape)
    phi = s * (1.0 - s)
    dphi_dt = phi * (1.0 - 2.0 * s)
    return phi, dphi_dt * beta, dphi_dt * f


# ---------------------------------------------------------------------------
# Eikonal loss
# ---------------------------------------------------------------------------

def eikonal_loss(field: SdfField, samples: np.ndarray) -> float:
    """Mean (|grad f| - 1)^2 over the sample set."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if len(samples) == 0:
        raise UsageError("eikonal_loss needs at least one sample")
    cache = field.forward(samples, need_grad=True)
    return eikonal_from_cache(cache)


def eikonal_from_cache(cache: FieldCache, grads: FieldGrads | None = None,
                       weight: float = 1.0) -> float:
    """Eikonal loss over an existing gradient-bearing forward cache.

    When `grads` is given, accumulates weight * d(loss)/d(params) into it.
    """
    norms = np.linalg.norm(cache.g, axis=1)
    resid = norms - 1.0
    loss = float(np.mean(resid ** 2))
    if grads is not None and weight != 0.0:
        safe = np.maximum(norms, 1e-12)
        dg = (2.0 * resid / (len(norms) * safe))[:, None] * cache.g * weight
        cache.backward_grad(dg, grads)
    return loss


# ---------------------------------------------------------------------------
# sphere initialization
# ---------------------------------------------------------------------------

def init_sphere(field: SdfField, radius: float = 0.5, steps: int = 1500,
                batch: int = 4096, seed: int = 0, grad_weight: float = 0.2,
                lr_tables: float = 1e-2, lr_mlp: float = 1e-3) -> SdfField:
    """Fit f to the analytic sphere SDF |x| - radius by Adam on L1 residuals.

    A small squared penalty pulling grad f toward the radial direction keeps
    the gradient field clean between samples (the L1 value fit alone leaves it
    too noisy for downstream normal estimates). A quarter of each batch is
    drawn near the center so the deep interior is not starved of samples.

    Raises InitializationError if the loss diverges (10x over a 100-step window)
    or the held-out residual misses the 1%-of-diagonal postcondition.
    """
    from .trainer import AdamState, adam_update  # deferred: trainer imports us too

    lo, hi = field.bounds
    center = 0.5 * (lo + hi)
    if radius > 0.5 * float((hi - lo).min()):
        raise UsageError("sphere radius exceeds the field bounds")
    rng = np.random.default_rng(seed)
    params = field.params()
    lrs = {name: lr_tables if name == "tables" else lr_mlp for name in params}
    lrs["log_beta"] = 0.0  # not part of the geometry fit
    lrs["log_s"] = 0.0
    adam = AdamState(params)
    # uniform bulk plus two center-heavy clusters and an apex cluster: the box
    # volume starves the deep interior (and the cone apex) of samples otherwise
    n1, n2, n3 = batch // 4, batch // 16, batch // 32
    history = []
    for step in range(1, steps + 1):
        x = rng.uniform(lo, hi, size=(batch, 3))
        x[:n1] = np.clip(center + rng.normal(0.0, 0.5 * radius + 1e-3, size=(n1, 3)), lo, hi)
        x[n1:n1 + n2] = np.clip(center + rng.normal(0.0, 0.16 * radius + 1e-3, size=(n2, 3)),
                                lo, hi)
        x[n1 + n2:n1 + n2 + n3] = center + rng.uniform(-0.06 * radius, 0.06 * radius,
                                                       size=(n3, 3))
        delta = x - center
        dist = np.linalg.norm(delta, axis=1)
        target = dist - radius
        cache = field.forward(x, need_grad=True)
        resid = cache.f - target
        loss = float(np.mean(np.abs(resid)))
        history.append(loss)
        if step > 100 and history[-1] > 10.0 * history[-101] and history[-101] > 1e-6:
            raise InitializationError(f"sphere init diverged at step {step}: "
                                      f"{history[-101]:.4g} -> {history[-1]:.4g}")
        grads = FieldGrads(field)
        cache.backward_value(np.sign(resid) / batch, grads)
        if grad_weight > 0.0:
            safe = np.maximum(dist, 0.05 * radius)[:, None]
            gdiff = cache.g - delta / safe
            gdiff[dist < 0.05 * radius] = 0.0  # direction undefined at the center
            cache.backward_grad((2.0 * grad_weight / batch) * gdiff, grads)
        adam_update(params, grads.params(), adam, lrs, t=step)
    holdout = rng.uniform(lo, hi, size=(8192, 3))
    target = np.linalg.norm(holdout - center, axis=1) - radius
    resid = float(np.mean(np.abs(field.eval(holdout) - target)))
    if resid > 0.01 * field.bounds_diagonal:
        raise InitializationError(f"sphere init residual {resid:.4g} exceeds "
                                  f"{0.01 * field.bounds_diagonal:.4g}")
    return field
