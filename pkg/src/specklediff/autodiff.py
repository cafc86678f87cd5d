"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small, numpy-backed core: tensors wrap contiguous arrays,
operations execute eagerly, and while a :class:`Tape` is active every
differentiable primitive appends one record (output plus per-input pull
closures). Replaying the records in reverse order of recording propagates
gradients; since inputs are always recorded before the operations that
consume them, recording order is already a topological order.

Scope is intentional: single/double precision, zero padding, and no
broadcasting beyond channel-bias and scalar operations. Operations never
mutate their inputs, so parameter tensors are safe for concurrent
read-only use when no tape is active.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .validation import ShapeError, check_same_shape

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "backward",
    "astensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_scalar",
    "add_channel_bias",
    "conv2d",
    "linear",
    "group_norm",
    "silu",
    "softmax",
    "bmm",
    "transpose_last2",
    "reshape",
    "concat_channels",
    "split_channels",
    "upsample_nearest2",
    "sum_all",
    "mean_all",
]


class Tensor:
    """A dense array with an optional gradient requirement.

    ``data`` is held as a contiguous numpy array and should be treated as
    immutable once the tensor has been consumed by an operation.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if arr.ndim and min(arr.shape) < 1:
            raise ShapeError(f"tensor dimensions must all be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        nm = f", name={self.name!r}" if self.name else ""
        rq = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{rq}{nm})"


def astensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)


# One record per primitive: the output plus (input, pull) pairs, where
# pull(g_out) returns that input's gradient contribution.
_Record = tuple[Tensor, tuple[tuple[Tensor, Callable[[np.ndarray], np.ndarray]], ...]]

_ACTIVE: "Tape | None" = None


class Tape:
    """Ordered record of primitive operations for one backward pass.

    Single-threaded by contract: one tape per training step. Parameters to
    differentiate are registered up front (``watch``) so that
    :func:`backward` can report zero gradients for parameters the loss
    never touched.
    """

    def __init__(self, watch: Mapping[str, Tensor] | None = None):
        self._records: list[_Record] = []
        self.watched: dict[str, Tensor] = dict(watch) if watch else {}

    def watch(self, name: str, tensor: Tensor) -> None:
        self.watched[name] = tensor

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        global _ACTIVE
        if _ACTIVE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = None


def backward(tape: Tape, loss: Tensor) -> dict[str, Tensor]:
    """Accumulate d(loss)/d(param) for every watched parameter.

    The records are replayed exactly once each, in reverse order of
    recording. Watched parameters that do not participate in ``loss``
    (including a fully detached graph) receive zero gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, pulls in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, pull in pulls:
            contrib = pull(g)
            prev = grads.get(id(inp))
            grads[id(inp)] = contrib if prev is None else prev + contrib
    result: dict[str, Tensor] = {}
    for name, p in tape.watched.items():
        if not p.requires_grad:
            continue
        g = grads.get(id(p))
        result[name] = Tensor(g if g is not None else np.zeros_like(p.data), name=name)
    return result


def _result(out_data: np.ndarray, *pulls: tuple[Tensor, Callable]) -> Tensor:
    requires = any(t.requires_grad for t, _ in pulls)
    out = Tensor(out_data, requires_grad=requires)
    if requires and _ACTIVE is not None:
        _ACTIVE._records.append((out, tuple((t, f) for t, f in pulls if t.requires_grad)))
    return out


def _scalar(c, like: np.ndarray):
    # Keep python-float weak typing so float32 graphs stay float32.
    return like.dtype.type(c)


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def add(a: Tensor, b: Tensor) -> Tensor:
    check_same_shape(a.data, b.data, "add")
    return _result(a.data + b.data, (a, lambda g: g), (b, lambda g: g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    check_same_shape(a.data, b.data, "sub")
    return _result(a.data - b.data, (a, lambda g: g), (b, lambda g: -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    check_same_shape(a.data, b.data, "mul")
    return _result(a.data * b.data, (a, lambda g: g * b.data), (b, lambda g: g * a.data))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a, lambda g: -g))


def scale(a: Tensor, c: float) -> Tensor:
    c = _scalar(c, a.data)
    return _result(a.data * c, (a, lambda g: g * c))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result(a.data + _scalar(c, a.data), (a, lambda g: g))


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias to an NCHW map.

    ``b`` may be (C,) for a shared bias or (N, C) for per-sample biases
    (used to inject timestep embeddings). This is the only broadcasting
    rule the core supports besides scalars.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"add_channel_bias: x must be NCHW, got shape {x.shape}")
    n, c = x.shape[0], x.shape[1]
    if b.shape == (c,):
        out = x.data + b.data[None, :, None, None]
        pull_b = lambda g: g.sum(axis=(0, 2, 3))
    elif b.shape == (n, c):
        out = x.data + b.data[:, :, None, None]
        pull_b = lambda g: g.sum(axis=(2, 3))
    else:
        raise ShapeError(
            f"add_channel_bias: bias shape {b.shape} matches neither (C,)={(c,)} nor (N, C)={(n, c)}"
        )
    return _result(out, (x, lambda g: g), (b, pull_b))


# ---------------------------------------------------------------------------
# dense / convolutional layers


def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation of an NCHW input with O×C×kh×kw filters.

    Internally runs in channels-last layout so the window gather and the
    GEMM operate on contiguous memory.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got shape {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be OxCxKHxKW, got shape {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: input channel axis has {c} channels but weight expects {cw}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {o} output channels")
    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(wd, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} with padding {padding}"
        )

    xl = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))  # NHWC
    if padding:
        xl = np.pad(xl, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    hp, wp = xl.shape[1], xl.shape[2]

    if kh == 1 and kw == 1:
        cols = xl[:, ::stride, ::stride, :].reshape(n * oh * ow, c)
    else:
        win = sliding_window_view(xl, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        # (N, OH, OW, C, KH, KW) -> rows of (KH, KW, C) patches
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)
    w_mat = w.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
    out = cols @ w_mat
    if b is not None:
        out += b.data[None, :]
    out = np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))

    def g_mat(g: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, o)

    def pull_x(g: np.ndarray) -> np.ndarray:
        dcols = g_mat(g) @ w_mat.T
        dxl = np.zeros((n, hp, wp, c), dtype=x.data.dtype)
        if kh == 1 and kw == 1:
            dxl[:, ::stride, ::stride, :] = dcols.reshape(n, oh, ow, c)
        else:
            dview = dcols.reshape(n, oh, ow, kh, kw, c)
            for i in range(kh):
                for j in range(kw):
                    dxl[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += (
                        dview[:, :, :, i, j, :]
                    )
        if padding:
            dxl = dxl[:, padding : padding + h, padding : padding + wd, :]
        return np.ascontiguousarray(dxl.transpose(0, 3, 1, 2))

    def pull_w(g: np.ndarray) -> np.ndarray:
        dw_mat = cols.T @ g_mat(g)  # (kh*kw*c, o)
        return np.ascontiguousarray(dw_mat.reshape(kh, kw, c, o).transpose(3, 2, 0, 1))

    pulls: list[tuple[Tensor, Callable]] = [(x, pull_x), (w, pull_w)]
    if b is not None:
        pulls.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return _result(out, *pulls)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map of (N, I) rows by an (I, O) matrix."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"linear: need 2-D operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input features {x.shape[1]} != weight rows {w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match {w.shape[1]} outputs")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data[None, :]
    pulls: list[tuple[Tensor, Callable]] = [
        (x, lambda g: g @ w.data.T),
        (w, lambda g: x.data.T @ g),
    ]
    if b is not None:
        pulls.append((b, lambda g: g.sum(axis=0)))
    return _result(out, *pulls)


def group_norm(x: Tensor, gain: Tensor, bias: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize NCHW features within channel groups, then rescale per channel."""
    if x.data.ndim != 4:
        raise ShapeError(f"group_norm: input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if c % groups != 0:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"group_norm: gain/bias must be ({c},), got {gain.shape}, {bias.shape}")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + _scalar(eps, x.data))
    xhat_g = (xg - mu) * inv
    xhat = xhat_g.reshape(n, c, h, w)
    out = xhat * gain.data[None, :, None, None] + bias.data[None, :, None, None]

    def pull_x(g: np.ndarray) -> np.ndarray:
        dxhat = (g * gain.data[None, :, None, None]).reshape(n, groups, -1)
        m1 = dxhat.mean(axis=2, keepdims=True)
        m2 = (dxhat * xhat_g).mean(axis=2, keepdims=True)
        dx = inv * (dxhat - m1 - xhat_g * m2)
        return dx.reshape(n, c, h, w)

    return _result(
        out,
        (x, pull_x),
        (gain, lambda g: (g * xhat).sum(axis=(0, 2, 3))),
        (bias, lambda g: g.sum(axis=(0, 2, 3))),
    )


# ---------------------------------------------------------------------------
# activations, attention pieces, shape ops


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig
    return _result(out, (x, lambda g: g * (sig * (1.0 + x.data * (1.0 - sig)))))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    return _result(s, (x, lambda g: (g - (g * s).sum(axis=-1, keepdims=True)) * s))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product of (N, p, q) with (N, q, r)."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm: need 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    return _result(
        out,
        (a, lambda g: g @ b.data.swapaxes(-1, -2)),
        (b, lambda g: a.data.swapaxes(-1, -2) @ g),
    )


def transpose_last2(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise ShapeError(f"transpose_last2: need >= 2 dims, got shape {x.shape}")
    return _result(x.data.swapaxes(-1, -2).copy(), (x, lambda g: g.swapaxes(-1, -2)))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _result(x.data.reshape(shape), (x, lambda g: g.reshape(x.shape)))


def concat_channels(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels: need at least one tensor")
    for p in parts:
        if p.data.ndim != 4:
            raise ShapeError(f"concat_channels: operands must be NCHW, got shape {p.shape}")
    out = np.concatenate([p.data for p in parts], axis=1)
    pulls = []
    ofs = 0
    for p in parts:
        c = p.shape[1]
        pulls.append((p, (lambda o, c: lambda g: g[:, o : o + c])(ofs, c)))
        ofs += c
    return _result(out, *pulls)


def split_channels(x: Tensor, sizes: Sequence[int]) -> tuple[Tensor, ...]:
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split_channels: sizes {tuple(sizes)} do not sum to {x.shape[1]}")
    outs = []
    ofs = 0
    for c in sizes:
        piece = np.ascontiguousarray(x.data[:, ofs : ofs + c])

        def pull(g: np.ndarray, o: int = ofs, cc: int = c) -> np.ndarray:
            full = np.zeros_like(x.data)
            full[:, o : o + cc] = g
            return full

        outs.append(_result(piece, (x, pull)))
        ofs += c
    return tuple(outs)


def upsample_nearest2(x: Tensor) -> Tensor:
    """Double both spatial dimensions by pixel repetition."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest2: input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _result(out, (x, lambda g: g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    return _result(out, (x, lambda g: np.full_like(x.data, g.reshape(()))))


def mean_all(x: Tensor) -> Tensor:
    inv = _scalar(1.0 / x.size, x.data)
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)
    return _result(out, (x, lambda g: np.full_like(x.data, g.reshape(()) * inv)))
