"""Adaptive-moment optimizer over named parameter maps."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .validation import ShapeError


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or infinity; the update was rejected."""


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            step=0,
        )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update; returns fresh params and state.

    Inputs are never mutated, so the same (params, grads, state) triple
    always produces bit-identical outputs.
    """
    if set(grads) != set(params):
        missing = set(params) ^ set(grads)
        raise KeyError(f"adam_step: params and grads disagree on names: {sorted(missing)}")
    t = state.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_params: dict[str, Tensor] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name].data if isinstance(grads[name], Tensor) else np.asarray(grads[name])
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        m0 = state.m.get(name)
        v0 = state.v.get(name)
        if m0 is None or m0.shape != p.shape:
            raise ShapeError(f"adam_step: optimizer state does not match parameter {name!r}")
        m = beta1 * m0 + (1.0 - beta1) * g
        v = beta2 * v0 + (1.0 - beta2) * (g * g)
        update = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        new_params[name] = Tensor(p.data - update.astype(p.data.dtype), requires_grad=True, name=name)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v, step=t)
