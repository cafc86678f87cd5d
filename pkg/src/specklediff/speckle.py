"""Multiplicative gamma speckle: fields, paired patches, synthetic textures.

A speckled observation is the elementwise product of a clean intensity in
[0, 1] with a unit-mean gamma field (shape L, rate L, so variance 1/L).
Products above 1 are clipped, mirroring saturation of 8-bit imagery.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .validation import ShapeError, as_image, check_same_shape, check_unit_range

__all__ = [
    "SpeckleParams",
    "ImagePair",
    "sample_speckle",
    "apply_speckle",
    "make_dataset",
    "pair_rng",
    "synthetic_textures",
]


@dataclass(frozen=True)
class SpeckleParams:
    """Number of looks and the RNG seed that together fix a speckle draw."""

    looks: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.looks >= 1.0:
            raise ValueError(f"looks must be >= 1, got {self.looks}")


@dataclass(frozen=True)
class ImagePair:
    """A clean patch, its clipped speckled counterpart, and provenance.

    ``rng_key`` = (dataset seed, pair index); :func:`pair_rng` rebuilds the
    exact generator that produced the patch offsets and speckle field.
    """

    clean: np.ndarray
    speckled: np.ndarray
    looks: float
    rng_key: tuple[int, int] | None = None


def _gamma_unit_mean(looks: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw Gamma(shape=L, rate=L) variates via the Marsaglia-Tsang squeeze.

    Valid for L >= 1 (callers enforce this). Rejected proposals are
    refilled in vectorized rounds, so the draw count consumed from ``rng``
    varies but is fully determined by the stream.
    """
    d = looks - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty(size, dtype=np.float64)
    filled = 0
    while filled < size:
        n = size - filled
        x = rng.standard_normal(n)
        u = rng.random(n)
        v = (1.0 + c * x) ** 3
        pos = v > 0
        x2 = x * x
        squeeze = u < 1.0 - 0.0331 * x2 * x2
        with np.errstate(divide="ignore", invalid="ignore"):
            slow = np.log(u) < 0.5 * x2 + d * (1.0 - v + np.log(np.where(pos, v, 1.0)))
        accept = pos & (squeeze | slow)
        vals = d * v[accept]
        k = vals.size
        out[filled : filled + k] = vals
        filled += k
    return out / looks


def sample_speckle(
    shape: Sequence[int],
    params: SpeckleParams,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """I.i.d. unit-mean gamma speckle field of the given shape.

    With no explicit generator the draw is seeded from ``params.seed``.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"speckle field shape must be non-empty and positive, got {shape}")
    if rng is None:
        rng = np.random.default_rng(params.seed)
    field = _gamma_unit_mean(params.looks, int(np.prod(shape)), rng)
    return field.reshape(shape).astype(np.float32)


def apply_speckle(clean: np.ndarray, field: np.ndarray, clip: bool = True) -> np.ndarray:
    """Multiply a clean [0, 1] image by a speckle field, clipping to [0, 1]."""
    clean = as_image(clean, "clean")
    field = np.asarray(field)
    check_same_shape(clean, field, "apply_speckle")
    check_unit_range(clean, "clean")
    out = clean * field
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32)


def pair_rng(seed: int, index: int) -> np.random.Generator:
    """The independent sub-stream used for dataset pair ``index``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def make_dataset(
    clean_images: Sequence[np.ndarray],
    params: SpeckleParams,
    patch_size: int,
    count: int,
    seed: int,
) -> list[ImagePair]:
    """Cut ``count`` random patches and speckle each one independently.

    Every pair is reproducible from (seed, index) alone: the source image,
    patch offsets, and speckle field are all drawn from that pair's
    sub-stream. Images smaller than the patch are skipped with a warning.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if len(clean_images) == 0:
        raise ValueError("make_dataset: empty source image set")
    usable = []
    for i, im in enumerate(clean_images):
        im = as_image(im, f"clean_images[{i}]")
        if im.shape[0] < patch_size or im.shape[1] < patch_size:
            warnings.warn(
                f"skipping source image {i}: shape {im.shape} smaller than patch {patch_size}"
            )
            continue
        usable.append(im.astype(np.float32))
    if not usable:
        raise ValueError(f"make_dataset: no source image admits a {patch_size}x{patch_size} patch")

    pairs: list[ImagePair] = []
    for i in range(count):
        rng = pair_rng(seed, i)
        src = usable[int(rng.integers(len(usable)))]
        oy = int(rng.integers(src.shape[0] - patch_size + 1))
        ox = int(rng.integers(src.shape[1] - patch_size + 1))
        clean = src[oy : oy + patch_size, ox : ox + patch_size].copy()
        field = sample_speckle((patch_size, patch_size), params, rng)
        pairs.append(
            ImagePair(
                clean=clean,
                speckled=apply_speckle(clean, field),
                looks=params.looks,
                rng_key=(seed, i),
            )
        )
    return pairs


# ---------------------------------------------------------------------------
# synthetic clean imagery for desk-scale experiments


def _periodic_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian low-pass with wrap-around boundaries, via the frequency domain."""
    h, w = img.shape
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    transfer = np.exp(-2.0 * (np.pi**2) * (sigma**2) * (fy**2 + fx**2))
    return np.real(np.fft.ifft2(np.fft.fft2(img) * transfer))


def synthetic_textures(count: int, size: int, seed: int = 0) -> list[np.ndarray]:
    """Deterministic family of smooth test textures in [0.1, 0.9].

    Mixes band-limited noise, oriented gratings, ramps, and blurred block
    patterns; values stay inside [0.1, 0.9] so single-look speckle is not
    dominated by clipping. Periodic blur keeps the textures cyclic, which
    suits wrap-around shifts.
    """
    if count < 1 or size < 8:
        raise ValueError("need count >= 1 and size >= 8")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    out: list[np.ndarray] = []
    for i in range(count):
        kind = i % 4
        if kind == 0:
            img = _periodic_blur(rng.standard_normal((size, size)), rng.uniform(1.5, 6.0))
        elif kind == 1:
            k = int(rng.integers(1, 5))
            theta = rng.uniform(0, np.pi)
            img = np.sin(2 * np.pi * k * (np.cos(theta) * xx + np.sin(theta) * yy))
            img = img + 0.4 * _periodic_blur(rng.standard_normal((size, size)), 3.0)
        elif kind == 2:
            img = rng.uniform(-1, 1) * xx + rng.uniform(-1, 1) * yy
            img = np.sin(2 * np.pi * img) if rng.random() < 0.5 else img
            img = img + 0.3 * _periodic_blur(rng.standard_normal((size, size)), 2.0)
        else:
            blocks = rng.standard_normal((size // 8, size // 8))
            img = _periodic_blur(np.kron(blocks, np.ones((8, 8))), rng.uniform(1.0, 3.0))
        lo, hi = img.min(), img.max()
        span = hi - lo if hi > lo else 1.0
        img = 0.1 + 0.8 * (img - lo) / span
        out.append(img.astype(np.float32))
    return out
