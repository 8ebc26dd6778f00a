"""Image-quality metrics."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InvalidInputError
from .grid import ScalarField

__all__ = ["metric_ssd", "metric_ssim"]


def _images(a, b):
    if isinstance(a, ScalarField) and isinstance(b, ScalarField):
        if a.grid.m != b.grid.m or a.grid.dim != b.grid.dim:
            raise InvalidInputError("images live on different grids")
        return a.image, b.image, a.grid.h
    a = np.asarray(getattr(a, "image", a), dtype=float)
    b = np.asarray(getattr(b, "image", b), dtype=float)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b, 1.0 / a.shape[0]


def metric_ssd(a, b):
    """``0.5 h^d |a - b|^2``."""
    a, b, h = _images(a, b)
    r = a - b
    return 0.5 * h**a.ndim * float((r * r).sum())


def metric_ssim(a, b, data_range=1.0, sigma=1.5, K1=0.01, K2=0.03):
    """Mean structural similarity with an 11-tap Gaussian window.

    Statistics use population (biased) moments; only windows that fit
    entirely inside the image contribute to the mean.
    """
    a, b, _ = _images(a, b)
    radius = 5
    if min(a.shape) <= 2 * radius:
        raise InvalidInputError("SSIM needs images larger than the 11-pixel window")
    filt = lambda x: gaussian_filter(x, sigma, truncate=radius / sigma, mode="reflect")
    mu_a, mu_b = filt(a), filt(b)
    va = filt(a * a) - mu_a**2
    vb = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
    inner = tuple(slice(radius, -radius) for _ in range(a.ndim))
    return float(s[inner].mean())
