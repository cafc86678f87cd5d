"""Variance schedule, forward/reverse steps, objective, and training loop.

The chain operates on the signed range [-1, 1]; images in [0, 1] are
mapped on entry and unmapped (with a final clamp) on exit. The reverse
step uses the fixed noise scale sigma_t^2 = beta_t.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .optim import AdamState, adam_step
from .predictor import PredictorConfig, predict_noise
from .speckle import ImagePair
from .validation import ShapeError, check_same_shape

__all__ = [
    "DiffusionSchedule",
    "TrainConfig",
    "TrainResult",
    "NonFiniteLossError",
    "make_schedule",
    "q_sample",
    "reverse_step",
    "loss_simple",
    "train_step",
    "train",
    "to_signed",
    "from_signed",
]

# Linear schedule endpoints at the reference length; shorter chains scale
# the endpoints up so total injected variance stays comparable.
REFERENCE_T = 1000
REFERENCE_BETA_START = 1e-4
REFERENCE_BETA_END = 0.02
MAX_BETA = 0.999


class NonFiniteLossError(FloatingPointError):
    """Training loss became NaN/inf; the step was aborted before updating."""


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step variances and the derived products, indexed by t in 1..T."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def __post_init__(self):
        if np.any(self.beta <= 0.0) or np.any(self.beta >= 1.0):
            raise ValueError("schedule requires 0 < beta_t < 1 for all t")


def make_schedule(
    T: int,
    beta_start: float | None = None,
    beta_end: float | None = None,
) -> DiffusionSchedule:
    """Linear variance schedule over T steps.

    Explicit endpoints are used verbatim. When omitted, the reference
    endpoints (1e-4, 0.02 at T=1000) are scaled by 1000/T and capped
    below 1.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if beta_start is None and beta_end is None:
        s = REFERENCE_T / T
        beta_start = min(REFERENCE_BETA_START * s, MAX_BETA)
        beta_end = min(REFERENCE_BETA_END * s, MAX_BETA)
    elif beta_start is None or beta_end is None:
        raise ValueError("give both beta endpoints or neither")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return DiffusionSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=np.sqrt(beta))


def to_signed(x: np.ndarray) -> np.ndarray:
    """Map [0, 1] intensities to the chain's working range [-1, 1]."""
    return (2.0 * np.asarray(x, dtype=np.float32) - 1.0).astype(np.float32)


def from_signed(x: np.ndarray) -> np.ndarray:
    """Map chain outputs back to clamped [0, 1] intensities."""
    return np.clip((np.asarray(x) + 1.0) / 2.0, 0.0, 1.0).astype(np.float32)


def _check_t(t, T: int):
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > T):
        raise ValueError(f"t must lie in 1..{T}, got {t}")
    return t


def _gather(coeffs: np.ndarray, t, x: np.ndarray) -> np.ndarray:
    """Look up per-step coefficients for scalar or per-sample t."""
    vals = coeffs[np.asarray(t) - 1]
    if vals.ndim == 0:
        return vals.astype(x.dtype)
    if x.ndim < 1 or vals.shape[0] != x.shape[0]:
        raise ShapeError(f"per-sample t of length {vals.shape[0]} does not match batch {x.shape}")
    return vals.reshape((-1,) + (1,) * (x.ndim - 1)).astype(x.dtype)


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Closed-form forward sample: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` may be a scalar or a per-sample vector matching the leading axis.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    check_same_shape(x0, eps, "q_sample")
    t = _check_t(t, sched.T)
    a = _gather(sched.alpha_bar, t, x0)
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def reverse_step(
    x_t: np.ndarray,
    t: int,
    eps_hat: np.ndarray,
    z: np.ndarray | None,
    sched: DiffusionSchedule,
) -> np.ndarray:
    """One reverse-chain update from x_t to x_{t-1}.

    The mean rescales x_t minus the predicted-noise correction by
    1/sqrt(alpha_t); sigma_t z adds the fixed-variance innovation and must
    be zero (or None) at t=1.
    """
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(eps_hat)
    check_same_shape(x_t, eps_hat, "reverse_step")
    t_arr = _check_t(t, sched.T)
    if t_arr.ndim != 0:
        raise ValueError("reverse_step expects a scalar t")
    ti = int(t_arr)
    if z is not None:
        z = np.asarray(z)
        check_same_shape(x_t, z, "reverse_step(z)")
        if ti == 1 and np.any(z != 0):
            raise ValueError("reverse_step: z must be all-zero at t=1")
    dt = x_t.dtype
    beta = dt.type(sched.beta[ti - 1])
    inv_sqrt_alpha = dt.type(1.0 / np.sqrt(sched.alpha[ti - 1]))
    coef = dt.type(beta / np.sqrt(1.0 - sched.alpha_bar[ti - 1]))
    out = inv_sqrt_alpha * (x_t - coef * eps_hat)
    if z is not None and ti > 1:
        out = out + dt.type(sched.sigma[ti - 1]) * z
    return out


def loss_simple(eps, eps_hat):
    """Mean squared noise-prediction error over every element.

    Returns a scalar :class:`Tensor` when either argument carries a
    gradient graph, otherwise a plain float.
    """
    if isinstance(eps, Tensor) or isinstance(eps_hat, Tensor):
        a = ad.astensor(eps)
        b = ad.astensor(eps_hat)
        check_same_shape(a.data, b.data, "loss_simple")
        d = ad.sub(a, b)
        return ad.mean_all(ad.mul(d, d))
    a = np.asarray(eps)
    b = np.asarray(eps_hat)
    check_same_shape(a, b, "loss_simple")
    d = a - b
    return float(np.mean(d * d))


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for the training loop."""

    iterations: int = 3000
    batch_size: int = 4
    learning_rate: float = 3e-4
    T: int = 100
    beta_start: float | None = None
    beta_end: float | None = None
    seed: int = 0
    checkpoint_interval: int = 1000

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1 or self.T < 1:
            raise ValueError("iterations, batch_size and T must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be positive")


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    opt_state: AdamState
    schedule: DiffusionSchedule
    losses: list[float]


def _stack_batch(pairs: Sequence[ImagePair], idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    clean = np.stack([pairs[i].clean for i in idx])[:, None]
    speckled = np.stack([pairs[i].speckled for i in idx])[:, None]
    return to_signed(clean), to_signed(speckled)


def train_step(
    clean: np.ndarray,
    speckled: np.ndarray,
    params: dict[str, Tensor],
    opt_state: AdamState,
    sched: DiffusionSchedule,
    config: PredictorConfig,
    rng: np.random.Generator,
    lr: float,
) -> tuple[float, dict[str, Tensor], AdamState]:
    """One optimizer step on a signed-range (clean, speckled) batch.

    Draws per-sample timesteps and noise, forms x_t from the clean batch,
    predicts the noise conditioned on the speckled batch, and applies one
    Adam update on the mean-squared objective. Non-finite losses abort the
    step without touching the parameters.
    """
    b = clean.shape[0]
    t = rng.integers(1, sched.T + 1, size=b)
    eps = rng.standard_normal(clean.shape, dtype=np.float32).astype(clean.dtype, copy=False)
    x_t = q_sample(clean, t, eps, sched)
    with Tape(watch=params) as tape:
        eps_hat = predict_noise(x_t, speckled, t, params, config)
        loss = loss_simple(eps, eps_hat)
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteLossError(f"loss {value!r} at optimizer step {opt_state.step + 1}")
    grads = backward(tape, loss)
    params, opt_state = adam_step(params, grads, opt_state, lr=lr)
    return value, params, opt_state


def train(
    pairs: Sequence[ImagePair],
    params: dict[str, Tensor],
    config: PredictorConfig,
    train_config: TrainConfig,
    log_path=None,
    checkpoint_fn: Callable[[int, dict[str, Tensor], AdamState], None] | None = None,
    opt_state: AdamState | None = None,
) -> TrainResult:
    """Run the training loop over randomly drawn batches of pairs.

    Emits one line-delimited JSON record per iteration to ``log_path``
    (path or open file) and invokes ``checkpoint_fn`` every
    ``checkpoint_interval`` iterations and at the end.
    """
    if not pairs:
        raise ValueError("train: need at least one image pair")
    sched = make_schedule(train_config.T, train_config.beta_start, train_config.beta_end)
    if opt_state is None:
        opt_state = AdamState.for_params(params)
    rng = np.random.default_rng(np.random.SeedSequence(train_config.seed))
    losses: list[float] = []

    own_handle = False
    log = None
    if log_path is not None:
        if hasattr(log_path, "write"):
            log = log_path
        else:
            log = open(log_path, "w", encoding="utf-8")
            own_handle = True
    start = time.monotonic()
    try:
        for it in range(1, train_config.iterations + 1):
            idx = rng.integers(len(pairs), size=train_config.batch_size)
            clean, speckled = _stack_batch(pairs, idx)
            value, params, opt_state = train_step(
                clean, speckled, params, opt_state, sched, config, rng,
                lr=train_config.learning_rate,
            )
            losses.append(value)
            if log is not None:
                rec = {"iteration": it, "loss": value, "elapsed_s": time.monotonic() - start}
                log.write(json.dumps(rec) + "\n")
            if checkpoint_fn is not None and (
                it % train_config.checkpoint_interval == 0 or it == train_config.iterations
            ):
                checkpoint_fn(it, params, opt_state)
    finally:
        if own_handle and log is not None:
            log.close()
    return TrainResult(params=params, opt_state=opt_state, schedule=sched, losses=losses)
