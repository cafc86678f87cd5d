"""Shared test oracles: finite differences and configs kept deliberately small."""
from __future__ import annotations

import numpy as np

from specklediff.autodiff import Tape, Tensor, backward
from specklediff.predictor import PredictorConfig


def tiny_predictor_config(input_size: int = 8) -> PredictorConfig:
    """Smallest architecture exercising every layer type (down/up/attention)."""
    return PredictorConfig(
        input_size=input_size,
        base_channels=8,
        channel_mults=(1, 1),
        blocks_per_level=1,
        time_embed_dim=8,
    )


def finite_difference(f, array: np.ndarray, step: float = 1e-6, indices=None) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. ``array`` in place.

    ``f`` must read the array's current contents; entries outside
    ``indices`` (flat) are left at zero when a subset is requested.
    """
    flat = array.reshape(-1)
    grad = np.zeros_like(flat)
    todo = range(flat.size) if indices is None else indices
    for i in todo:
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(array.shape)


def tape_gradients(build, tensors: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Run ``build()`` under a fresh tape and return gradients as arrays."""
    with Tape(watch=tensors) as tape:
        loss = build()
    return {k: v.data for k, v in backward(tape, loss).items()}
