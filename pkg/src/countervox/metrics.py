"""Volumetric image-quality metrics.

Implements the distributional and structural metrics used to compare a
synthetic population against a real one: multi-scale SSIM over 3D grids,
kernel maximum mean discrepancy between sample sets, and the trajectory
statistics (Pearson correlation, normalized MSE).
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .grid import VoxelGrid

__all__ = [
    "ms_ssim_3d",
    "relative_msssim_diff",
    "mmd",
    "median_bandwidth",
    "pearson",
    "nmse",
]

# Standard five-scale MS-SSIM weights, renormalized when a small volume
# supports fewer dyadic scales.
_MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _gaussian_window(window: int, sigma: float) -> np.ndarray:
    r = np.arange(window) - (window - 1) / 2.0
    w = np.exp(-0.5 * (r / sigma) ** 2)
    return w / w.sum()


def _filter3d(a: np.ndarray, win: np.ndarray) -> np.ndarray:
    for axis in range(3):
        a = ndimage.correlate1d(a, win, axis=axis, mode="constant")
    r = len(win) // 2
    return a[r:-r, r:-r, r:-r]


def _ssim_maps(a, b, win, c1, c2):
    """Local luminance and contrast-structure maps on the valid region."""
    mu_a = _filter3d(a, win)
    mu_b = _filter3d(b, win)
    var_a = _filter3d(a * a, win) - mu_a * mu_a
    var_b = _filter3d(b * b, win) - mu_b * mu_b
    cov = _filter3d(a * b, win) - mu_a * mu_b
    luminance = (2 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return luminance, cs


def _downsample2(a: np.ndarray) -> np.ndarray:
    nx, ny, nz = (d - d % 2 for d in a.shape)
    a = a[:nx, :ny, :nz]
    return a.reshape(nx // 2, 2, ny // 2, 2, nz // 2, 2).mean(axis=(1, 3, 5))


def ms_ssim_3d(
    a: VoxelGrid | np.ndarray,
    b: VoxelGrid | np.ndarray,
    levels: int | None = None,
    window: int = 11,
    sigma: float = 1.5,
    data_range: float | None = None,
) -> float:
    """Multi-scale structural similarity between two volumes, in [0, 1].

    A 3D Gaussian window (default 11 voxels, sigma 1.5) produces local
    luminance/contrast/structure statistics; scales are halved by average
    pooling. ``levels=None`` uses as many dyadic scales as the volume
    supports (at most five); an explicit level count that the volume
    cannot support raises. Weights are the standard five-scale constants
    renormalized over the scales used. Negative local terms are clamped
    at zero so the score stays in [0, 1]; the metric is symmetric.
    """
    a = a.values if isinstance(a, VoxelGrid) else np.asarray(a, dtype=np.float64)
    b = b.values if isinstance(b, VoxelGrid) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"volume dims differ: {a.shape} vs {b.shape}")
    max_levels = 0
    d = min(a.shape)
    while d >= window and max_levels < len(_MSSSIM_WEIGHTS):
        max_levels += 1
        d //= 2
    if max_levels == 0:
        raise ValueError(f"volume of dims {a.shape} too small for window {window}")
    if levels is None:
        levels = max_levels
    elif not 1 <= levels <= max_levels:
        raise ValueError(f"volume supports at most {max_levels} levels, requested {levels}")
    if data_range is None:
        lo = min(a.min(), b.min())
        hi = max(a.max(), b.max())
        data_range = hi - lo if hi > lo else 1.0
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    win = _gaussian_window(window, sigma)

    weights = np.asarray(_MSSSIM_WEIGHTS[:levels])
    weights = weights / weights.sum()
    score = 1.0
    for level in range(levels):
        luminance, cs = _ssim_maps(a, b, win, c1, c2)
        if level == levels - 1:
            term = float(np.mean(luminance * cs))
        else:
            term = float(np.mean(cs))
        score *= max(term, 0.0) ** weights[level]
        if level < levels - 1:
            a = _downsample2(a)
            b = _downsample2(b)
    return float(score)


def relative_msssim_diff(synth_pop_score: float, real_pop_score: float) -> float:
    """Absolute relative difference between population MS-SSIM scores, in percent."""
    if real_pop_score <= 0:
        raise ValueError("real population score must be positive")
    return abs(synth_pop_score - real_pop_score) / real_pop_score * 100.0


# ---------------------------------------------------------------------------
# Maximum mean discrepancy


def median_bandwidth(X: np.ndarray, Y: np.ndarray, max_points: int = 4096) -> float:
    """Median pairwise Euclidean distance over the pooled samples.

    Larger pools are deterministically strided down to ``max_points``
    rows to bound memory. A zero median falls back to 1.
    """
    pooled = np.vstack([X, Y])
    if len(pooled) > max_points:
        stride = int(math.ceil(len(pooled) / max_points))
        pooled = pooled[::stride]
    d2 = _sq_dists(pooled, pooled)
    iu = np.triu_indices(len(pooled), k=1)
    med = float(np.sqrt(np.median(d2[iu]))) if len(iu[0]) else 0.0
    return med if med > 0 else 1.0


def _sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    aa = np.sum(A * A, axis=1)[:, None]
    bb = np.sum(B * B, axis=1)[None, :]
    return np.maximum(aa + bb - 2.0 * (A @ B.T), 0.0)


def _kernel_sums(A, B, kernel, bandwidth, block=1024):
    """(total sum, diagonal sum) of the kernel matrix, accumulated blockwise."""
    total = 0.0
    for i in range(0, len(A), block):
        Ai = A[i:i + block]
        for j in range(0, len(B), block):
            Bj = B[j:j + block]
            if kernel == "rbf":
                K = np.exp(-_sq_dists(Ai, Bj) / (2.0 * bandwidth * bandwidth))
            else:
                K = Ai @ Bj.T
            total += float(K.sum())
    if A is B:
        if kernel == "rbf":
            diag = float(len(A))
        else:
            diag = float(np.sum(A * A))
    else:
        diag = 0.0
    return total, diag


def mmd(
    X: np.ndarray,
    Y: np.ndarray,
    kernel: str = "rbf",
    unbiased: bool = True,
    bandwidth: float | None = None,
) -> float:
    """Squared maximum mean discrepancy between two sample sets.

    Rows are samples of equal dimension. The default is the unbiased
    estimator (within-set sums exclude the diagonal), which can be
    slightly negative; the biased variant is exactly 0 for identical
    multisets. RBF bandwidth defaults to the median heuristic over the
    pooled pairwise distances. Sums are accumulated blockwise so memory
    stays flat for large sets. For singleton sets the empty within-set
    average is taken as 0.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ValueError(f"sample dims differ: {X.shape} vs {Y.shape}")
    if len(X) == 0 or len(Y) == 0:
        raise ValueError("sample sets must be nonempty")
    if kernel not in ("rbf", "linear"):
        raise ValueError(f"kernel must be 'rbf' or 'linear', got {kernel!r}")
    if kernel == "rbf" and bandwidth is None:
        bandwidth = median_bandwidth(X, Y)
    m, n = len(X), len(Y)
    sum_xx, diag_x = _kernel_sums(X, X, kernel, bandwidth)
    sum_yy, diag_y = _kernel_sums(Y, Y, kernel, bandwidth)
    sum_xy, _ = _kernel_sums(X, Y, kernel, bandwidth)
    if unbiased:
        term_x = (sum_xx - diag_x) / (m * (m - 1)) if m > 1 else 0.0
        term_y = (sum_yy - diag_y) / (n * (n - 1)) if n > 1 else 0.0
    else:
        term_x = sum_xx / (m * m)
        term_y = sum_yy / (n * n)
    return term_x + term_y - 2.0 * sum_xy / (m * n)


# ---------------------------------------------------------------------------
# Trajectory statistics


def pearson(x, y) -> float:
    """Pearson correlation coefficient of two equal-length series."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("need two 1-D series of equal length >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(np.dot(xc, xc)) * float(np.dot(yc, yc)))
    if denom == 0:
        raise ValueError("pearson undefined for a zero-variance series")
    return float(np.dot(xc, yc) / denom)


def nmse(pred, ref) -> float:
    """Normalized mean squared error ``|pred - ref|^2 / |ref|^2``."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    denom = float(np.sum(ref * ref))
    if denom == 0:
        raise ValueError("nmse undefined for an all-zero reference")
    return float(np.sum((pred - ref) ** 2) / denom)
