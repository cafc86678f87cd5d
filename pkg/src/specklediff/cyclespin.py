"""Cyclic shifts and the shift-ensemble despeckler.

Each ensemble member wraps the speckled image by its (rows, cols) shift,
runs a full reverse chain from fresh Gaussian noise conditioned on the
shifted image, unshifts the result, and the members are averaged. Member
i draws from the sub-stream ``SeedSequence(seed, spawn_key=(i,))``; its
chain consumes the initial state first, then one innovation per step
down to t=2, so a member's draws are identical whether the ensemble runs
batched (the default) or alone.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .diffusion import DiffusionSchedule, from_signed, reverse_step, to_signed
from .validation import as_image

__all__ = ["CycleSpinPlan", "cyclic_shift", "despeckle_cs", "member_rng"]


@dataclass(frozen=True)
class CycleSpinPlan:
    """Ordered (rows, cols) cyclic shifts for one ensemble run."""

    shifts: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.shifts) < 1:
            raise ValueError("cycle-spin plan needs at least one shift")
        object.__setattr__(
            self, "shifts", tuple((int(u), int(v)) for u, v in self.shifts)
        )

    @property
    def members(self) -> int:
        return len(self.shifts)

    @classmethod
    def paired(cls, values: Sequence[int]) -> "CycleSpinPlan":
        """Read one list of offsets as diagonal (v, v) shift pairs."""
        return cls(tuple((int(v), int(v)) for v in values))

    @classmethod
    def cross(cls, us: Sequence[int], vs: Sequence[int]) -> "CycleSpinPlan":
        """Full cross product of row and column offsets."""
        return cls(tuple((int(u), int(v)) for u in us for v in vs))

    @classmethod
    def parse(cls, text: str) -> "CycleSpinPlan":
        """Parse ``"u1,v1;u2,v2;..."`` as used by the command line."""
        shifts = []
        for item in text.split(";"):
            item = item.strip()
            if not item:
                continue
            parts = item.split(",")
            if len(parts) != 2:
                raise ValueError(f"bad shift {item!r}, expected 'u,v'")
            shifts.append((int(parts[0]), int(parts[1])))
        return cls(tuple(shifts))

    def reduced(self, height: int, width: int) -> tuple[tuple[int, int], ...]:
        return tuple((u % height, v % width) for u, v in self.shifts)


def cyclic_shift(x: np.ndarray, u: int, v: int) -> np.ndarray:
    """Wrap an image down by ``u`` rows and right by ``v`` columns.

    output[r, c] = x[(r - u) mod H, (c - v) mod W]; the inverse is the
    (-u, -v) shift.
    """
    x = np.asarray(x)
    if x.ndim < 2:
        raise ValueError(f"cyclic_shift needs a 2-D image, got shape {x.shape}")
    return np.roll(x, (int(u), int(v)), axis=(-2, -1))


def member_rng(seed: int, index: int) -> np.random.Generator:
    """Independent RNG sub-stream for ensemble member ``index``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def despeckle_cs(
    x_s: np.ndarray,
    plan: CycleSpinPlan,
    predict_fn: Callable[[np.ndarray, np.ndarray, int], np.ndarray],
    sched: DiffusionSchedule,
    seed: int = 0,
) -> np.ndarray:
    """Full shift-ensemble despeckling of one [0, 1] image.

    ``predict_fn(x_t, cond, t)`` must map batched NCHW arrays to the
    predicted noise (see :func:`specklediff.predictor.as_noise_fn`). All
    members advance through the chain together as one batch.
    """
    x_s = as_image(x_s, "x_s")
    h, w = x_s.shape
    shifts = plan.reduced(h, w)
    m = len(shifts)
    cond = np.stack([to_signed(cyclic_shift(x_s, u, v)) for u, v in shifts])[:, None]

    rngs = [member_rng(seed, i) for i in range(m)]
    x = np.stack([r.standard_normal((1, h, w), dtype=np.float32) for r in rngs])
    for t in range(sched.T, 0, -1):
        eps_hat = np.asarray(predict_fn(x, cond, t))
        if t > 1:
            z = np.stack([r.standard_normal((1, h, w), dtype=np.float32) for r in rngs])
        else:
            z = None
        x = reverse_step(x, t, eps_hat, z, sched)

    acc = np.zeros((h, w), dtype=np.float64)
    for i, (u, v) in enumerate(shifts):
        acc += cyclic_shift(x[i, 0], -u, -v)
    return from_signed((acc / m).astype(np.float32))
