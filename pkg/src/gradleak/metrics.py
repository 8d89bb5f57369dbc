"""Reconstruction scoring: PSNR, uniform-window SSIM, and the SSIM-threshold
success rate used in the privacy evaluation."""

from __future__ import annotations

import numpy as np

# Stated in the source material as "SSIM > 3.0", which is impossible (SSIM <= 1);
# interpreted as 0.3 and kept configurable.
DEFAULT_SSIM_THRESHOLD = 0.3

SSIM_WINDOW = 8
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


class MetricError(ValueError):
    pass


def psnr(x_rec: np.ndarray, x_true: np.ndarray) -> float:
    """-10 * log10(MSE) for [0,1] images; identical images give +inf."""
    x_rec, x_true = np.asarray(x_rec), np.asarray(x_true)
    if x_rec.shape != x_true.shape:
        raise MetricError(f"shape mismatch {x_rec.shape} vs {x_true.shape}")
    mse = float(np.mean((x_rec - x_true) ** 2))
    if mse == 0.0:
        return float("inf")
    return -10.0 * np.log10(mse)


def _windows(ch: np.ndarray) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(ch, (SSIM_WINDOW, SSIM_WINDOW))


def ssim(x_rec: np.ndarray, x_true: np.ndarray) -> float:
    """Single-scale SSIM: uniform 8x8 windows, stride 1, dynamic range 1,
    averaged over windows and channels."""
    x_rec, x_true = np.asarray(x_rec, float), np.asarray(x_true, float)
    if x_rec.shape != x_true.shape:
        raise MetricError(f"shape mismatch {x_rec.shape} vs {x_true.shape}")
    if x_rec.ndim == 2:
        x_rec, x_true = x_rec[None], x_true[None]
    if x_rec.shape[1] < SSIM_WINDOW or x_rec.shape[2] < SSIM_WINDOW:
        raise MetricError(f"image {x_rec.shape} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window")
    vals = []
    for a, b in zip(x_rec, x_true):
        wa, wb = _windows(a), _windows(b)
        mu_a = wa.mean(axis=(-1, -2))
        mu_b = wb.mean(axis=(-1, -2))
        var_a = wa.var(axis=(-1, -2))
        var_b = wb.var(axis=(-1, -2))
        cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
        num = (2 * mu_a * mu_b + _C1) * (2 * cov + _C2)
        den = (mu_a ** 2 + mu_b ** 2 + _C1) * (var_a + var_b + _C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def reconstruction_rate(pairs, ssim_threshold: float = DEFAULT_SSIM_THRESHOLD) -> float:
    """Fraction of (reconstruction, ground truth) pairs with SSIM above
    threshold."""
    pairs = list(pairs)
    if not pairs:
        raise MetricError("no pairs")
    hits = sum(1 for rec, true in pairs if ssim(rec, true) > ssim_threshold)
    return hits / len(pairs)
