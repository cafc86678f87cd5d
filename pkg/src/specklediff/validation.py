"""Shared input checks for images and array arguments."""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand dimensions are incompatible for the requested operation."""


def as_image(x, name: str = "image") -> np.ndarray:
    """Coerce ``x`` to a 2-D float array, rejecting anything else."""
    arr = np.asarray(x)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D (H, W), got shape {arr.shape}")
    if arr.size == 0:
        raise ShapeError(f"{name} must be non-empty")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


def as_image_stack(X, name: str = "X") -> np.ndarray:
    """Coerce a single image, a stack, or a list of images to (n, H, W).

    Accepts a 2-D array (promoted to a stack of one), a 3-D array, or a
    sequence of equally-sized 2-D arrays.
    """
    if isinstance(X, np.ndarray):
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3:
            raise ShapeError(f"{name} must be (n, H, W) or (H, W), got shape {X.shape}")
        stack = X
    else:
        imgs = [as_image(im, name=f"{name}[{i}]") for i, im in enumerate(X)]
        if not imgs:
            raise ValueError(f"{name} must contain at least one image")
        if len({im.shape for im in imgs}) > 1:
            raise ShapeError(f"{name} images must share one shape")
        stack = np.stack(imgs)
    if stack.size == 0:
        raise ShapeError(f"{name} must be non-empty")
    if not np.issubdtype(stack.dtype, np.floating):
        stack = stack.astype(np.float32)
    return stack


def check_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def check_unit_range(x: np.ndarray, name: str = "image", tol: float = 1e-6) -> None:
    lo, hi = float(x.min()), float(x.max())
    if lo < -tol or hi > 1.0 + tol:
        raise ValueError(f"{name} values must lie in [0, 1], got range [{lo:.4g}, {hi:.4g}]")
