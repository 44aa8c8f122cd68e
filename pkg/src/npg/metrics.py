"""Image metrics (PSNR, SSIM) and the differentiable D-SSIM training loss."""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
LUMA = np.array([0.299, 0.587, 0.114])


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """10 log10(1 / MSE) with peak 1; ``math.inf`` when the images are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes differ {a.shape} vs {b.shape}")
    diff = (a - b) ** 2
    if mask is not None:
        m = np.asarray(mask) > 0.5
        if m.ndim == 2 and diff.ndim == 3:
            m = np.broadcast_to(m[..., None], diff.shape)
        diff = diff[m]
    mse = float(diff.mean()) if diff.size else 0.0
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def to_luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA if img.ndim == 3 and img.shape[2] == 3 else img.reshape(img.shape[:2])


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


@lru_cache(maxsize=32)
def _valid_filter(n: int, size: int, sigma: float) -> np.ndarray:
    """Toeplitz matrix (n - size + 1, n) for 'valid' 1D filtering."""
    if n < size:
        raise ValueError(f"image side {n} is smaller than the SSIM window {size}")
    w = gaussian_window(size, sigma)
    out = np.zeros((n - size + 1, n))
    for i in range(n - size + 1):
        out[i, i:i + size] = w
    return out


def _ssim_map(x, y, size, sigma):
    """SSIM map of (..., H, W) tensors over 'valid' window positions."""
    H, W = x.shape[-2:]
    A = _valid_filter(H, size, sigma).astype(x.dtype)
    B = _valid_filter(W, size, sigma).T.astype(x.dtype)

    def blur(z):
        return A @ z @ B

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    num = (2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """Mean SSIM on the luminance of two images in [0, 1]."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    x, y = Tensor(to_luminance(a)), Tensor(to_luminance(b))
    return float(_ssim_map(x, y, size, sigma).data.mean())


def dssim_loss(pred, target: np.ndarray, size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> Tensor:
    """(1 - SSIM) / 2 averaged over colour channels; ``pred`` is (H, W, C)."""
    p = ad.as_tensor(pred)
    x = ad.swapaxes(ad.swapaxes(p, 0, 2), 1, 2)  # (C, H, W)
    y = np.ascontiguousarray(np.moveaxis(np.asarray(target, dtype=p.dtype), 2, 0))
    return (1.0 - _ssim_map(x, y, size, sigma).mean()) * 0.5


def l1_loss(pred, target: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    p = ad.as_tensor(pred)
    diff = ad.abs_(p - np.asarray(target, dtype=p.dtype))
    if mask is None:
        return diff.mean()
    m = np.asarray(mask, dtype=p.dtype)
    if m.ndim == 2 and diff.ndim == 3:
        m = np.broadcast_to(m[..., None], diff.shape)
    return (diff * m).sum() * (1.0 / max(float(m.sum()), 1.0))


def trajectory_endpoint_error(gt: np.ndarray, recovered: np.ndarray, reference: int = 0) -> float:
    """Mean distance between ground-truth and recovered trajectory endpoints.

    ``gt`` (P, N, 3) and ``recovered`` (M, N, 3) are matched per ground-truth
    point by nearest neighbour at frame ``reference``; the error is taken at
    the last frame.
    """
    from scipy.spatial import cKDTree

    _, nn = cKDTree(recovered[:, reference]).query(gt[:, reference])
    return float(np.linalg.norm(gt[:, -1] - recovered[nn, -1], axis=1).mean())
