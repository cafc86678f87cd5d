"""Scikit-learn style estimators wrapping the simulation and despeckling core.

``GammaSpeckleNoiser`` is a stateless transformer that multiplies images
by fresh unit-mean gamma fields. ``DiffusionDespeckler`` learns a
conditional noise predictor from clean images in ``fit`` and removes
speckle in ``transform`` via shift-ensemble sampling. Both follow the
usual conventions (constructor stores hyperparameters verbatim,
``get_params``/``set_params``/``clone`` work, fitted state carries a
trailing underscore).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoints import load_checkpoint, save_checkpoint
from .cyclespin import CycleSpinPlan, despeckle_cs
from .diffusion import TrainConfig, make_schedule, train
from .metrics import psnr
from .predictor import PredictorConfig, as_noise_fn, init_params
from .speckle import SpeckleParams, make_dataset, sample_speckle
from .validation import as_image_stack

__all__ = ["GammaSpeckleNoiser", "DiffusionDespeckler"]


class GammaSpeckleNoiser(TransformerMixin, BaseEstimator):
    """Corrupt clean [0, 1] images with multiplicative gamma speckle.

    Parameters
    ----------
    looks : number of looks L; the field has unit mean and variance 1/L.
    clip : clip products to [0, 1] (saturation of 8-bit imagery).
    random_state : seed for the speckle draws; ``transform`` is
        deterministic given the seed and the input shape.
    """

    def __init__(self, looks: float = 1.0, clip: bool = True, random_state: int = 0):
        self.looks = looks
        self.clip = clip
        self.random_state = random_state

    def fit(self, X, y=None):
        as_image_stack(X)
        return self

    def transform(self, X) -> np.ndarray:
        stack = as_image_stack(X)
        params = SpeckleParams(looks=self.looks, seed=self.random_state)
        rng = np.random.default_rng(self.random_state)
        field = sample_speckle(stack.shape, params, rng)
        out = stack * field
        if self.clip:
            out = np.clip(out, 0.0, 1.0)
        return out.astype(np.float32)


class DiffusionDespeckler(TransformerMixin, BaseEstimator):
    """Conditional-diffusion despeckler with cycle-spinning inference.

    ``fit(X)`` takes clean images, cuts random patches, speckles them, and
    trains the noise predictor; ``transform(X)`` takes speckled images of
    the native patch size and returns despeckled estimates averaged over
    the configured cyclic shifts.
    """

    def __init__(
        self,
        looks: float = 1.0,
        patch_size: int = 32,
        train_patches: int = 2000,
        iterations: int = 3000,
        batch_size: int = 4,
        learning_rate: float = 3e-4,
        T: int = 100,
        beta_start: float | None = None,
        beta_end: float | None = None,
        base_channels: int = 32,
        channel_mults: tuple[int, ...] = (1, 2, 4),
        blocks_per_level: int = 2,
        attention_resolutions: tuple[int, ...] | None = None,
        time_embed_dim: int = 128,
        shifts: tuple[tuple[int, int], ...] = ((0, 0),),
        random_state: int = 0,
    ):
        self.looks = looks
        self.patch_size = patch_size
        self.train_patches = train_patches
        self.iterations = iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.base_channels = base_channels
        self.channel_mults = channel_mults
        self.blocks_per_level = blocks_per_level
        self.attention_resolutions = attention_resolutions
        self.time_embed_dim = time_embed_dim
        self.shifts = shifts
        self.random_state = random_state

    # -- configuration plumbing -------------------------------------------

    def _predictor_config(self) -> PredictorConfig:
        return PredictorConfig(
            input_size=self.patch_size,
            base_channels=self.base_channels,
            channel_mults=tuple(self.channel_mults),
            blocks_per_level=self.blocks_per_level,
            attention_resolutions=(
                tuple(self.attention_resolutions) if self.attention_resolutions else None
            ),
            time_embed_dim=self.time_embed_dim,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            T=self.T,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
            seed=self.random_state,
        )

    # -- estimator API ------------------------------------------------------

    def fit(self, X, y=None, log_path=None):
        """Train the noise predictor on speckled patches cut from ``X``."""
        stack = as_image_stack(X)
        config = self._predictor_config()
        pairs = make_dataset(
            list(stack),
            SpeckleParams(looks=self.looks, seed=self.random_state),
            patch_size=self.patch_size,
            count=self.train_patches,
            seed=self.random_state,
        )
        params = init_params(config, seed=self.random_state)
        result = train(pairs, params, config, self._train_config(), log_path=log_path)
        self.config_ = config
        self.params_ = result.params
        self.schedule_ = result.schedule
        self.loss_history_ = result.losses
        self.n_iter_ = len(result.losses)
        return self

    def transform(self, X) -> np.ndarray:
        """Despeckle a stack of speckled images at the native size."""
        check_is_fitted(self, "params_")
        stack = as_image_stack(X)
        plan = CycleSpinPlan(tuple(self.shifts))
        fn = as_noise_fn(self.params_, self.config_)
        out = np.empty_like(stack, dtype=np.float32)
        for i, img in enumerate(stack):
            seed = np.random.SeedSequence(self.random_state, spawn_key=(int(i),))
            out[i] = despeckle_cs(
                img, plan, fn, self.schedule_, seed=_seed_int(seed)
            )
        return out

    def score(self, X, y) -> float:
        """Mean despeckled PSNR in dB against clean references ``y``."""
        clean = as_image_stack(y)
        restored = self.transform(X)
        return float(np.mean([psnr(c, r) for c, r in zip(clean, restored)]))

    # -- persistence ----------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        check_is_fitted(self, "params_")
        schedule = {
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }
        save_checkpoint(path, self.params_, self.config_, schedule, self.n_iter_)

    @classmethod
    def from_checkpoint(cls, path, shifts=((0, 0),), random_state: int = 0) -> "DiffusionDespeckler":
        params, config, schedule, iteration = load_checkpoint(path)
        est = cls(
            patch_size=config.input_size,
            T=int(schedule["T"]),
            beta_start=schedule.get("beta_start"),
            beta_end=schedule.get("beta_end"),
            base_channels=config.base_channels,
            channel_mults=config.channel_mults,
            blocks_per_level=config.blocks_per_level,
            attention_resolutions=config.attention_resolutions,
            time_embed_dim=config.time_embed_dim,
            shifts=shifts,
            random_state=random_state,
        )
        est.config_ = config
        est.params_ = params
        est.schedule_ = make_schedule(
            int(schedule["T"]), schedule.get("beta_start"), schedule.get("beta_end")
        )
        est.loss_history_ = []
        est.n_iter_ = iteration
        return est


def _seed_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, np.uint64)[0])
