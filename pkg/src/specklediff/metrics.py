"""Image quality measures: PSNR, windowed SSIM, and region ENL."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .validation import ShapeError, as_image, check_same_shape

__all__ = ["RegionSpec", "DegenerateRegionError", "psnr", "ssim", "enl"]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 1.0


class DegenerateRegionError(ValueError):
    """The region has zero variance, so ENL is undefined."""


@dataclass(frozen=True)
class RegionSpec:
    """A rectangle marking a homogeneous region, in pixel units."""

    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.top < 0 or self.left < 0:
            raise ValueError(f"region origin must be non-negative, got ({self.top}, {self.left})")
        if self.height < 1 or self.width < 1 or self.height * self.width < 2:
            raise ValueError("region must contain at least 2 pixels")

    def crop(self, image: np.ndarray) -> np.ndarray:
        if self.top + self.height > image.shape[0] or self.left + self.width > image.shape[1]:
            raise ValueError(
                f"region {self} exceeds image bounds {image.shape[0]}x{image.shape[1]}"
            )
        return image[self.top : self.top + self.height, self.left : self.left + self.width]


def psnr(reference: np.ndarray, test: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give +inf."""
    reference = as_image(reference, "reference")
    test = as_image(test, "test")
    check_same_shape(reference, test, "psnr")
    if peak <= 0:
        raise ValueError(f"peak must be > 0, got {peak}")
    mse = float(np.mean((reference.astype(np.float64) - test.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _ssim_kernel() -> np.ndarray:
    r = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * SSIM_SIGMA**2))
    k = np.outer(g, g)
    return k / k.sum()


def _windowed_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    win = sliding_window_view(img, kernel.shape)
    return np.tensordot(win, kernel, axes=([2, 3], [0, 1]))


def ssim(reference: np.ndarray, test: np.ndarray) -> float:
    """Mean local structural similarity with the standard Gaussian window.

    11x11 window, sigma 1.5, K1/K2 = 0.01/0.03 on a unit dynamic range.
    """
    a = as_image(reference, "reference").astype(np.float64)
    b = as_image(test, "test").astype(np.float64)
    check_same_shape(a, b, "ssim")
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    kernel = _ssim_kernel()
    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2
    mu_a = _windowed_mean(a, kernel)
    mu_b = _windowed_mean(b, kernel)
    var_a = _windowed_mean(a * a, kernel) - mu_a * mu_a
    var_b = _windowed_mean(b * b, kernel) - mu_b * mu_b
    cov = _windowed_mean(a * b, kernel) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def enl(image: np.ndarray, region: RegionSpec) -> float:
    """Equivalent number of looks: mean^2 over population variance."""
    image = as_image(image, "image")
    patch = region.crop(image).astype(np.float64)
    var = float(patch.var())
    if var == 0.0:
        raise DegenerateRegionError(f"region {region} has zero variance")
    mean = float(patch.mean())
    return mean * mean / var
