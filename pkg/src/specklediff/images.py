"""8-bit grayscale image files mapped to and from [0, 1] float arrays."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .validation import as_image

__all__ = ["ImageFormatError", "load_image", "save_image"]


class ImageFormatError(ValueError):
    """The file is not an 8-bit single-channel grayscale image."""


def load_image(path) -> np.ndarray:
    """Read an 8-bit grayscale file; byte b maps to b/255."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image file: {path}")
    with Image.open(path) as img:
        if img.mode != "L":
            raise ImageFormatError(
                f"{path}: expected 8-bit grayscale (mode 'L'), got mode {img.mode!r}"
            )
        arr = np.asarray(img, dtype=np.float32)
    return arr / np.float32(255.0)


def save_image(image: np.ndarray, path) -> None:
    """Write a [0, 1] image as 8-bit grayscale PNG via round(x * 255)."""
    image = as_image(image, "image")
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {path.parent}")
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)
