"""Training objective terms and evaluation metrics, with analytic gradients.

The objective is a weighted sum of an L1 term, a structural-similarity term
and an optional perceptual term supplied through a hook (the perceptual
network itself is out of scope; the hook keeps the objective's structure).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

PerceptualHook = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


@dataclass
class LossWeights:
    l1: float = 0.6
    ssim: float = 0.4
    lpips: float = 0.4

    def __post_init__(self):
        vals = (self.l1, self.ssim, self.lpips)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("loss weights must be finite and non-negative")


def loss_l1(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error and its subgradient (sign(0) = 0)."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    diff = pred - gt
    value = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    return value, grad


def _gauss_window(n: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(n) - (n - 1) / 2.0
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


def _corr_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable windowed mean, valid region only (2D input)."""
    r = len(w) // 2
    out = correlate1d(img, w, axis=0, mode="constant")
    out = correlate1d(out, w, axis=1, mode="constant")
    return out[r:-r, r:-r]


def _corr_adjoint(g: np.ndarray, w: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Adjoint of _corr_valid: scatter window-position gradients to pixels."""
    r = len(w) // 2
    gz = np.zeros(shape)
    gz[r:-r, r:-r] = g
    wf = w[::-1]
    out = correlate1d(gz, wf, axis=0, mode="constant")
    return correlate1d(out, wf, axis=1, mode="constant")


def _as_channels(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img[:, :, None]
    if img.ndim == 3:
        return img
    raise ValueError(f"expected HxW or HxWxC image, got shape {img.shape}")


def loss_ssim(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """1 - mean SSIM over valid 11x11 Gaussian windows, plus d/d(pred).

    Standard stabilizers C1 = 0.01^2, C2 = 0.03^2 on [0, 1] images.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    x3 = _as_channels(pred)
    y3 = _as_channels(gt)
    H, W = x3.shape[:2]
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}px per side for SSIM")
    w = _gauss_window()

    grad = np.zeros_like(x3)
    total = 0.0
    n_windows = (H - SSIM_WINDOW + 1) * (W - SSIM_WINDOW + 1) * x3.shape[2]
    for ch in range(x3.shape[2]):
        x, y = x3[:, :, ch], y3[:, :, ch]
        mx = _corr_valid(x, w)
        my = _corr_valid(y, w)
        ex2 = _corr_valid(x * x, w)
        ey2 = _corr_valid(y * y, w)
        exy = _corr_valid(x * y, w)
        a1 = 2.0 * mx * my + SSIM_C1
        a2 = 2.0 * (exy - mx * my) + SSIM_C2
        b1 = mx * mx + my * my + SSIM_C1
        b2 = (ex2 - mx * mx) + (ey2 - my * my) + SSIM_C2
        s = (a1 * a2) / (b1 * b2)
        total += float(s.sum())

        ds_dmx = 2.0 * my * (a2 - a1) / (b1 * b2) - 2.0 * mx * s * (1.0 / b1 - 1.0 / b2)
        ds_dexy = 2.0 * a1 / (b1 * b2)
        ds_dex2 = -s / b2
        g = (
            _corr_adjoint(ds_dmx, w, (H, W))
            + y * _corr_adjoint(ds_dexy, w, (H, W))
            + 2.0 * x * _corr_adjoint(ds_dex2, w, (H, W))
        )
        grad[:, :, ch] = -g / n_windows

    value = 1.0 - total / n_windows
    if pred.ndim == 2:
        grad = grad[:, :, 0]
    return value, grad


def ssim_value(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean SSIM (the metric, higher is better)."""
    v, _ = loss_ssim(pred, gt)
    return 1.0 - v


def total_loss(
    pred: np.ndarray,
    gt: np.ndarray,
    weights: LossWeights,
    perceptual_hook: PerceptualHook | None = None,
) -> tuple[float, np.ndarray, dict[str, float]]:
    """Weighted objective; returns (value, d/d(pred), per-term values).

    Zero-weight terms are skipped entirely so they contribute an exact 0.
    """
    grad = np.zeros_like(pred)
    parts = {"l1": 0.0, "ssim": 0.0, "lpips": 0.0}
    value = 0.0
    if weights.l1 > 0:
        v, g = loss_l1(pred, gt)
        parts["l1"] = v
        value += weights.l1 * v
        grad += weights.l1 * g
    if weights.ssim > 0:
        v, g = loss_ssim(pred, gt)
        parts["ssim"] = v
        value += weights.ssim * v
        grad += weights.ssim * g
    if weights.lpips > 0 and perceptual_hook is not None:
        v, g = perceptual_hook(pred, gt)
        parts["lpips"] = float(v)
        value += weights.lpips * v
        grad += weights.lpips * g
    return value, grad, parts


def metric_psnr(pred: np.ndarray, gt: np.ndarray, cap: float = 100.0) -> float:
    """10 log10(1 / MSE) for [0, 1] images; exact matches return the cap."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return cap
    return min(10.0 * np.log10(1.0 / mse), cap)
