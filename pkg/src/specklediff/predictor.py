"""Conditional noise predictor: a compact U-shaped convolutional network.

The noisy chain state and the speckled conditioning image are
channel-concatenated at the stem. Residual blocks receive a projected
sinusoidal timestep embedding additively; level transitions live inside
residual blocks (strided convolution down, nearest-neighbour + convolution
up); single-head self-attention runs at the configured feature-map sizes.
The output convolution is zero-initialized so a fresh network predicts
zero noise.

Everything is functional: parameters travel as a named tensor map, and
the same architecture walk drives initialization, checkpoint validation,
and the forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .validation import ShapeError

__all__ = [
    "GROUPS",
    "PredictorConfig",
    "sinusoidal_embedding",
    "parameter_shapes",
    "parameter_count",
    "init_params",
    "predict_noise",
    "as_noise_fn",
]

GROUPS = 8  # group-normalization group count; channel widths must divide by it
_COND_CHANNELS = 2  # chain state + speckled conditioning image


@dataclass(frozen=True)
class PredictorConfig:
    """Architecture hyperparameters.

    ``attention_resolutions=None`` resolves to the coarsest realized
    feature-map size. ``input_size`` must be divisible by 2**(levels-1).
    """

    input_size: int = 32
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    blocks_per_level: int = 2
    attention_resolutions: tuple[int, ...] | None = None
    time_embed_dim: int = 128

    def __post_init__(self):
        if self.blocks_per_level < 1:
            raise ValueError("blocks_per_level must be >= 1")
        if not self.channel_mults:
            raise ValueError("channel_mults must be non-empty")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError(f"time_embed_dim must be even and >= 2, got {self.time_embed_dim}")
        down = 1 << (self.levels - 1)
        if self.input_size < down or self.input_size % down:
            raise ValueError(
                f"input_size {self.input_size} must be divisible by 2^(levels-1) = {down}"
            )
        for ch in self.channels:
            if ch % GROUPS:
                raise ValueError(f"channel width {ch} not divisible by {GROUPS} norm groups")
        if self.attention_resolutions is None:
            object.__setattr__(self, "attention_resolutions", (self.resolutions[-1],))
        else:
            object.__setattr__(
                self, "attention_resolutions", tuple(sorted(set(self.attention_resolutions)))
            )
        bad = set(self.attention_resolutions) - set(self.resolutions)
        if bad:
            raise ValueError(
                f"attention resolutions {sorted(bad)} not among realized sizes {self.resolutions}"
            )

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_mults)

    @property
    def resolutions(self) -> tuple[int, ...]:
        return tuple(self.input_size >> i for i in range(self.levels))

    def with_input_size(self, size: int) -> "PredictorConfig":
        """Same weights-compatible architecture at a different native size.

        Parameter shapes do not depend on the spatial size, so a trained
        map can be reused; attention placements are rescaled to keep their
        level.
        """
        if (size * max(self.attention_resolutions)) % self.input_size:
            raise ValueError(f"cannot rescale attention resolutions to input size {size}")
        attn = tuple(r * size // self.input_size for r in self.attention_resolutions)
        return replace(self, input_size=size, attention_resolutions=attn)


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Transformer-style positional features: sin halves then cos halves.

    Frequencies are 10000**(-2i/dim). Accepts a scalar step or a vector of
    per-sample steps; returns (dim,) or (n, dim) in double precision.
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ValueError("timestep must be >= 0")
    scalar = t_arr.ndim == 0
    t_arr = np.atleast_1d(t_arr)
    half = dim // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half) / dim)
    ang = t_arr[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return emb[0] if scalar else emb


# ---------------------------------------------------------------------------
# architecture walk


@dataclass(frozen=True)
class _Layer:
    kind: str  # "res" | "attn"
    name: str
    in_ch: int
    out_ch: int
    resample: str = "none"  # "none" | "down" | "up"
    pops_skip: bool = False
    pushes_skip: bool = False

    @property
    def has_skip_conv(self) -> bool:
        return self.in_ch != self.out_ch or self.resample != "none"


def _layers(config: PredictorConfig) -> list[_Layer]:
    chans = config.channels
    attn = set(config.attention_resolutions)
    res = config.input_size
    ch = chans[0]
    skip_stack = [ch]
    layers: list[_Layer] = []
    for i, c in enumerate(chans):
        for b in range(config.blocks_per_level):
            has_attn = res in attn
            layers.append(_Layer("res", f"enc{i}.res{b}", ch, c, pushes_skip=not has_attn))
            ch = c
            if has_attn:
                layers.append(_Layer("attn", f"enc{i}.attn{b}", ch, ch, pushes_skip=True))
            skip_stack.append(ch)
        if i < config.levels - 1:
            layers.append(_Layer("res", f"enc{i}.down", ch, ch, resample="down", pushes_skip=True))
            skip_stack.append(ch)
            res //= 2
    layers.append(_Layer("res", "mid.res0", ch, ch))
    layers.append(_Layer("attn", "mid.attn", ch, ch))
    layers.append(_Layer("res", "mid.res1", ch, ch))
    for i in reversed(range(config.levels)):
        for b in range(config.blocks_per_level + 1):
            sk = skip_stack.pop()
            layers.append(_Layer("res", f"dec{i}.res{b}", ch + sk, chans[i], pops_skip=True))
            ch = chans[i]
            if res in attn:
                layers.append(_Layer("attn", f"dec{i}.attn{b}", ch, ch))
        if i > 0:
            layers.append(_Layer("res", f"dec{i}.up", ch, ch, resample="up"))
            res *= 2
    assert not skip_stack
    return layers


def parameter_shapes(config: PredictorConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map for every learnable tensor."""
    shapes: dict[str, tuple[int, ...]] = {}
    d = config.time_embed_dim
    shapes["time.lin1.weight"] = (d, d)
    shapes["time.lin1.bias"] = (d,)
    shapes["time.lin2.weight"] = (d, d)
    shapes["time.lin2.bias"] = (d,)
    c0 = config.channels[0]
    shapes["stem.weight"] = (c0, _COND_CHANNELS, 3, 3)
    shapes["stem.bias"] = (c0,)
    for layer in _layers(config):
        p = layer.name
        if layer.kind == "res":
            ci, co = layer.in_ch, layer.out_ch
            shapes[f"{p}.norm1.gain"] = (ci,)
            shapes[f"{p}.norm1.bias"] = (ci,)
            shapes[f"{p}.conv1.weight"] = (co, ci, 3, 3)
            shapes[f"{p}.conv1.bias"] = (co,)
            shapes[f"{p}.emb.weight"] = (d, co)
            shapes[f"{p}.emb.bias"] = (co,)
            shapes[f"{p}.norm2.gain"] = (co,)
            shapes[f"{p}.norm2.bias"] = (co,)
            shapes[f"{p}.conv2.weight"] = (co, co, 3, 3)
            shapes[f"{p}.conv2.bias"] = (co,)
            if layer.has_skip_conv:
                shapes[f"{p}.skip.weight"] = (co, ci, 1, 1)
                shapes[f"{p}.skip.bias"] = (co,)
        else:
            c = layer.in_ch
            shapes[f"{p}.norm.gain"] = (c,)
            shapes[f"{p}.norm.bias"] = (c,)
            shapes[f"{p}.qkv.weight"] = (3 * c, c, 1, 1)
            shapes[f"{p}.qkv.bias"] = (3 * c,)
            shapes[f"{p}.proj.weight"] = (c, c, 1, 1)
            shapes[f"{p}.proj.bias"] = (c,)
    shapes["head.norm.gain"] = (c0,)
    shapes["head.norm.bias"] = (c0,)
    shapes["head.conv.weight"] = (1, c0, 3, 3)
    shapes["head.conv.bias"] = (1,)
    return shapes


def parameter_count(config: PredictorConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(config).values())


def init_params(config: PredictorConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Fan-in-scaled random init; norm gains start at one, the output
    convolution (and its bias) at zero. Deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if name.startswith("head.conv"):
            data = np.zeros(shape)
        elif name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            data = rng.standard_normal(shape) / np.sqrt(fan_in)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------------------
# forward pass


def _res_block(h: Tensor, temb_act: Tensor, p: Mapping[str, Tensor], layer: _Layer) -> Tensor:
    pre = layer.name
    x = h
    y = ad.silu(ad.group_norm(h, p[f"{pre}.norm1.gain"], p[f"{pre}.norm1.bias"], GROUPS))
    if layer.resample == "down":
        y = ad.conv2d(y, p[f"{pre}.conv1.weight"], p[f"{pre}.conv1.bias"], stride=2, padding=1)
        x = ad.conv2d(x, p[f"{pre}.skip.weight"], p[f"{pre}.skip.bias"], stride=2)
    elif layer.resample == "up":
        y = ad.conv2d(ad.upsample_nearest2(y), p[f"{pre}.conv1.weight"], p[f"{pre}.conv1.bias"], padding=1)
        x = ad.conv2d(ad.upsample_nearest2(x), p[f"{pre}.skip.weight"], p[f"{pre}.skip.bias"])
    else:
        y = ad.conv2d(y, p[f"{pre}.conv1.weight"], p[f"{pre}.conv1.bias"], padding=1)
        if layer.has_skip_conv:
            x = ad.conv2d(x, p[f"{pre}.skip.weight"], p[f"{pre}.skip.bias"])
    e = ad.linear(temb_act, p[f"{pre}.emb.weight"], p[f"{pre}.emb.bias"])
    y = ad.add_channel_bias(y, e)
    y = ad.silu(ad.group_norm(y, p[f"{pre}.norm2.gain"], p[f"{pre}.norm2.bias"], GROUPS))
    y = ad.conv2d(y, p[f"{pre}.conv2.weight"], p[f"{pre}.conv2.bias"], padding=1)
    return ad.add(x, y)


def _attention(h: Tensor, p: Mapping[str, Tensor], layer: _Layer) -> Tensor:
    pre = layer.name
    n, c, hh, ww = h.shape
    y = ad.group_norm(h, p[f"{pre}.norm.gain"], p[f"{pre}.norm.bias"], GROUPS)
    qkv = ad.conv2d(y, p[f"{pre}.qkv.weight"], p[f"{pre}.qkv.bias"])
    q, k, v = ad.split_channels(qkv, (c, c, c))
    q3 = ad.reshape(q, (n, c, hh * ww))
    k3 = ad.reshape(k, (n, c, hh * ww))
    v3 = ad.reshape(v, (n, c, hh * ww))
    logits = ad.scale(ad.bmm(ad.transpose_last2(q3), k3), c ** -0.5)
    weights = ad.softmax(logits)
    o3 = ad.bmm(v3, ad.transpose_last2(weights))
    o = ad.conv2d(ad.reshape(o3, (n, c, hh, ww)), p[f"{pre}.proj.weight"], p[f"{pre}.proj.bias"])
    return ad.add(h, o)


def _canon(x, name: str) -> tuple[np.ndarray, bool]:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim == 2:
        return arr[None, None], True
    if arr.ndim == 4 and arr.shape[1] == 1:
        return arr, False
    raise ShapeError(f"{name} must be (H, W) or (N, 1, H, W), got shape {arr.shape}")


def predict_noise(
    x_t,
    x_s,
    t,
    params: Mapping[str, Tensor],
    config: PredictorConfig,
) -> Tensor:
    """Predict the additive noise component of ``x_t`` given conditioning.

    ``t`` is a positive step index (scalar, or one per sample). Output
    shape equals the ``x_t`` input shape. Differentiable with respect to
    ``params`` when a tape is active.
    """
    xt, squeeze = _canon(x_t, "x_t")
    xs, _ = _canon(x_s, "x_s")
    if xt.shape != xs.shape:
        raise ShapeError(f"x_t shape {xt.shape} != conditioning shape {xs.shape}")
    n, _, h, w = xt.shape
    if (h, w) != (config.input_size, config.input_size):
        raise ShapeError(
            f"spatial size {h}x{w} does not match configured input size {config.input_size}"
        )
    t_arr = np.asarray(t)
    if not np.issubdtype(t_arr.dtype, np.integer):
        raise ValueError(f"timestep must be integral, got dtype {t_arr.dtype}")
    t_vec = np.broadcast_to(t_arr, (n,)).astype(np.int64)
    if np.any(t_vec < 1):
        raise ValueError(f"timestep must be >= 1, got {t}")

    dtype = next(iter(params.values())).dtype
    emb = Tensor(sinusoidal_embedding(t_vec, config.time_embed_dim).astype(dtype))
    emb = ad.linear(emb, params["time.lin1.weight"], params["time.lin1.bias"])
    emb = ad.linear(ad.silu(emb), params["time.lin2.weight"], params["time.lin2.bias"])
    temb_act = ad.silu(emb)

    hcur = ad.conv2d(
        ad.concat_channels([Tensor(xt.astype(dtype)), Tensor(xs.astype(dtype))]),
        params["stem.weight"],
        params["stem.bias"],
        padding=1,
    )
    skips: list[Tensor] = [hcur]
    for layer in _layers(config):
        if layer.kind == "attn":
            hcur = _attention(hcur, params, layer)
        else:
            if layer.pops_skip:
                hcur = ad.concat_channels([hcur, skips.pop()])
            hcur = _res_block(hcur, temb_act, params, layer)
        if layer.pushes_skip:
            skips.append(hcur)
    out = ad.silu(ad.group_norm(hcur, params["head.norm.gain"], params["head.norm.bias"], GROUPS))
    out = ad.conv2d(out, params["head.conv.weight"], params["head.conv.bias"], padding=1)
    if squeeze:
        out = ad.reshape(out, (h, w))
    return out


def as_noise_fn(
    params: Mapping[str, Tensor], config: PredictorConfig
) -> Callable[[np.ndarray, np.ndarray, int], np.ndarray]:
    """Bind (params, config) into the plain-array callable samplers expect."""

    def fn(x_t: np.ndarray, x_s: np.ndarray, t) -> np.ndarray:
        return predict_noise(x_t, x_s, t, params, config).data

    return fn
