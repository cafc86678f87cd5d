"""Diffusion-based despeckling of multiplicative gamma noise.

The public surface follows scikit-learn conventions: train a
:class:`DiffusionDespeckler` on clean images with ``fit`` and remove
speckle with ``transform``; :class:`GammaSpeckleNoiser` synthesizes the
corruption. The underlying pieces (speckle simulation, diffusion
schedule, noise predictor, cycle-spin sampler, quality metrics) are
importable from their submodules.
"""
from .cyclespin import CycleSpinPlan, cyclic_shift, despeckle_cs
from .diffusion import (
    DiffusionSchedule,
    TrainConfig,
    loss_simple,
    make_schedule,
    q_sample,
    reverse_step,
    train,
)
from .estimators import DiffusionDespeckler, GammaSpeckleNoiser
from .metrics import RegionSpec, enl, psnr, ssim
from .predictor import PredictorConfig, init_params, predict_noise, sinusoidal_embedding
from .speckle import ImagePair, SpeckleParams, apply_speckle, make_dataset, sample_speckle

__version__ = "0.1.0"

__all__ = [
    "CycleSpinPlan",
    "DiffusionDespeckler",
    "DiffusionSchedule",
    "GammaSpeckleNoiser",
    "ImagePair",
    "PredictorConfig",
    "RegionSpec",
    "SpeckleParams",
    "TrainConfig",
    "apply_speckle",
    "cyclic_shift",
    "despeckle_cs",
    "enl",
    "init_params",
    "loss_simple",
    "make_dataset",
    "make_schedule",
    "predict_noise",
    "psnr",
    "q_sample",
    "reverse_step",
    "sample_speckle",
    "sinusoidal_embedding",
    "ssim",
    "train",
    "__version__",
]
