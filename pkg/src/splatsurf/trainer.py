"""Training loop: loss assembly, Adam, warm-up schedule, adaptive density control."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

from .errors import NumericalError, UsageError


class AdamState:
    """First/second moments per named parameter array."""

    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def resize(self, name: str, keep_mask=None, extra: int = 0):
        """Drop moments for pruned rows and append zeros for new ones (axis 0)."""
        for store in (self.m, self.v):
            arr = store[name]
            if keep_mask is not None:
                arr = arr[keep_mask]
            if extra:
                pad = np.zeros((extra,) + arr.shape[1:], dtype=arr.dtype)
                arr = np.concatenate([arr, pad], axis=0)
            store[name] = arr


def adam_update(params: dict, grads: dict, state: AdamState, lr, t: int,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                weight_decay: float = 0.0) -> None:
    """Standard bias-corrected Adam step, in place. `lr` is a float or per-name dict.

    weight_decay applies decoupled (AdamW-style) decay; the default 0 makes it
    plain Adam.
    """
    if t < 1:
        raise UsageError("adam_update step counter t starts at 1")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise UsageError(f"gradient shape mismatch for {name}: {g.shape} vs {p.shape}")
        step_lr = lr[name] if isinstance(lr, dict) else lr
        if step_lr == 0.0:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        if weight_decay:
            p *= 1.0 - step_lr * weight_decay
        p -= step_lr * m_hat / (np.sqrt(v_hat) + eps)
