"""Evaluation metrics: PSNR, SSIM, Chamfer-L1, F-score."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import UsageError
from .rasterizer import ssim_maps

PSNR_CAP = 100.0
LUMA = np.array([0.299, 0.587, 0.114])


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0,1]; identical images cap at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM on luma, 11x11 gaussian window sigma 1.5, K1/K2 = 0.01/0.03."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a = a @ LUMA
        b = b @ LUMA
    if min(a.shape) < 11:
        raise UsageError("image smaller than the 11x11 SSIM window")
    return float(ssim_maps(a, b)[0].mean())


def chamfer_l1(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance, with the 1/2 factor.

    0.5 * (mean_a min_b |a-b| + mean_b min_a |a-b|), exact nearest neighbors.
    """
    a = np.atleast_2d(np.asarray(points_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(points_b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise UsageError("chamfer_l1 needs non-empty point sets")
    d_ab = cKDTree(b).query(a, k=1)[0]
    d_ba = cKDTree(a).query(b, k=1)[0]
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def f_score(points_a: np.ndarray, points_b: np.ndarray, tau: float) -> float:
    """F1 = 2PR/(P+R): P = fraction of a within tau of b, R the reverse."""
    if tau <= 0:
        raise UsageError("f_score needs tau > 0")
    a = np.atleast_2d(np.asarray(points_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(points_b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise UsageError("f_score needs non-empty point sets")
    precision = float((cKDTree(b).query(a, k=1)[0] <= tau).mean())
    recall = float((cKDTree(a).query(b, k=1)[0] <= tau).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)
