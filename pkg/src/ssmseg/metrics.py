"""Evaluation metrics on binary masks and preview images.

Dice and ASD accept 2D masks [H, W] or stacks [S, H, W] (one metric per
stacked sample). ASD boundary convention: a foreground pixel is boundary
if any of its 4-neighbors within the slice is background, with the image
border counting as background; distances are Euclidean on integer pixel
coordinates (slice index included for stacks) via a KD-tree, averaged
over the pooled boundary points of both directions.

An empty mask makes ASD undefined: the op raises UndefinedMetricError
and evaluation reports record the exclusion instead of a value.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree


class UndefinedMetricError(ValueError):
    """Metric has no defined value for these inputs (e.g. empty mask)."""


def _check_binary_pair(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3):
        raise ValueError(f"masks must be 2D or stacked 3D, got ndim={a.ndim}")
    return (a > 0.5), (b > 0.5)


def dice_coefficient(a, b) -> float:
    """2|A n B| / (|A| + |B|); two empty masks score 1.0 by convention."""
    a, b = _check_binary_pair(a, b)
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (sa + sb)


def boundary_points(mask) -> np.ndarray:
    """Coordinates of foreground pixels with a background 4-neighbor
    (border = background). 2D input -> [n, 2]; stacks are handled
    slice-wise and gain a leading slice coordinate -> [n, 3]."""
    mask = np.asarray(mask) > 0.5
    if mask.ndim == 3:
        pts = []
        for s, sl in enumerate(mask):
            p = boundary_points(sl)
            if len(p):
                pts.append(np.column_stack([np.full(len(p), s), p]))
        return np.concatenate(pts) if pts else np.empty((0, 3))
    padded = np.pad(mask, 1)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(mask & ~interior).astype(np.float64)


def average_surface_distance(a, b) -> float:
    """Symmetric mean nearest-boundary distance in pixel units."""
    a, b = _check_binary_pair(a, b)
    if not a.any() or not b.any():
        raise UndefinedMetricError("ASD undefined for an empty mask")
    pa = boundary_points(a)
    pb = boundary_points(b)
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return float((d_ab.sum() + d_ba.sum()) / (len(pa) + len(pb)))


# -- preview metrics (intensities in [0, 1]) -------------------------------


def psnr(a, b) -> float:
    """10*log10(1/MSE) in dB; +inf for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(win: int, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(win) - (win - 1) / 2.0
    k1 = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k2 = np.outer(k1, k1)
    return k2 / k2.sum()


def _local_corr(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    win = kernel.shape[0]
    windows = sliding_window_view(img, (win, win))
    return np.tensordot(windows, kernel, axes=([2, 3], [0, 1]))


def ssim(a, b, win: int = 11, sigma: float = 1.5) -> float:
    """Mean local SSIM with a Gaussian window (stabilizers for unit range).

    Images smaller than the window use the largest odd window that fits.
    Multi-channel inputs ([C,H,W] or [H,W,C] with C=3) average the
    per-channel scores."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        ch_axis = 0 if a.shape[0] in (1, 3) else 2
        per = [ssim(np.take(a, c, ch_axis), np.take(b, c, ch_axis), win, sigma)
               for c in range(a.shape[ch_axis])]
        return float(np.mean(per))
    h, w = a.shape
    win = min(win, h - (h + 1) % 2, w - (w + 1) % 2)
    win = max(win, 1)
    kernel = _gaussian_kernel(win, sigma)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a = _local_corr(a, kernel)
    mu_b = _local_corr(b, kernel)
    var_a = _local_corr(a * a, kernel) - mu_a ** 2
    var_b = _local_corr(b * b, kernel) - mu_b ** 2
    cov = _local_corr(a * b, kernel) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def summarize(values: list[float]) -> dict[str, float | int]:
    """Mean/std/count over defined values plus the exclusion count
    (entries that were NaN)."""
    arr = np.asarray(values, dtype=np.float64)
    ok = arr[np.isfinite(arr)]
    return {
        "mean": float(ok.mean()) if len(ok) else float("nan"),
        "std": float(ok.std()) if len(ok) else float("nan"),
        "n": int(len(ok)),
        "excluded": int(len(arr) - len(ok)),
    }
