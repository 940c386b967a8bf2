"""Image quality and representation similarity metrics."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

PSNR_CAP_DB = 99.0
_LUMA = np.array([0.299, 0.587, 0.114])


class PsnrResult(NamedTuple):
    value: float
    exact: bool


def psnr_detail(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> PsnrResult:
    """Peak signal-to-noise ratio in dB; identical inputs are capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PsnrResult(PSNR_CAP_DB, True)
    return PsnrResult(min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB), False)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    return psnr_detail(a, b, peak).value


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def to_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 3:
        return np.tensordot(_LUMA, img, axes=([0], [0]))
    if img.ndim == 2:
        return img
    raise ValueError(f"expected (3,H,W) or (H,W) image, got shape {img.shape}")


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0,
         window: int = 11, sigma: float = 1.5) -> float:
    """Mean local structural similarity over valid Gaussian-weighted windows.

    Stabilizers C1=(0.01*peak)^2 and C2=(0.03*peak)^2; color inputs are
    converted to luma first.
    """
    ga = to_gray(a)
    gb = to_gray(b)
    if ga.shape != gb.shape:
        raise ValueError(f"shape mismatch: {ga.shape} vs {gb.shape}")
    h, w = ga.shape
    if h < window or w < window:
        raise ValueError(f"image {h}x{w} smaller than the {window}x{window} window")
    kern = _gaussian_window(window, sigma)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2

    from numpy.lib.stride_tricks import sliding_window_view

    wa = sliding_window_view(ga, (window, window))
    wb = sliding_window_view(gb, (window, window))
    mu_a = np.einsum("ijkl,kl->ij", wa, kern)
    mu_b = np.einsum("ijkl,kl->ij", wb, kern)
    aa = np.einsum("ijkl,kl->ij", wa * wa, kern)
    bb = np.einsum("ijkl,kl->ij", wb * wb, kern)
    ab = np.einsum("ijkl,kl->ij", wa * wb, kern)
    var_a = aa - mu_a * mu_a
    var_b = bb - mu_b * mu_b
    cov = ab - mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(score.mean())


def cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear centered kernel alignment between two sample-by-feature matrices.

    Invariant to orthogonal transforms and nonzero isotropic scaling of
    either representation; 1.0 iff the (centered) representations span the
    same similarity structure.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError(f"expected 2-D feature matrices, got {x.shape} and {y.shape}")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    xx = np.linalg.norm(xc.T @ xc)
    yy = np.linalg.norm(yc.T @ yc)
    if xx == 0.0 or yy == 0.0:
        raise ValueError("zero-variance representation")
    cross = np.linalg.norm(yc.T @ xc) ** 2
    return float(cross / (xx * yy))
