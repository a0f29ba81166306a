"""Dense layers with hand-derived backward passes.

Every layer is a pair of functions. ``*_forward`` returns the output and a
cache; ``*_backward`` consumes the cache, returns the gradient with respect
to the layer input and *accumulates* parameter gradients into the
``ParamSlot.grad`` buffers. Leading batch dimensions are supported
everywhere so that Monte Carlo copies and minibatches can share one call.

All arithmetic is float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DataError, DimensionError, NumericError, StateError

DTYPE = np.float64
CHECKPOINT_MAGIC = b"RAAF1"


@dataclass(eq=False)
class ParamSlot:
    """A trainable tensor together with its gradient and optimizer state."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    velocity: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.velocity = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)


def make_rng(seed: int | None) -> np.random.Generator:
    """Deterministic 64-bit generator (PCG64) used for every stochastic draw."""
    return np.random.Generator(np.random.PCG64(seed))


def glorot_uniform(shape: Sequence[int], fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))


def _require(cache, name):
    if cache is None:
        raise StateError(f"{name}: backward called without a forward cache")


# --------------------------------------------------------------------------
# linear


def linear_forward(x, W: ParamSlot, b: ParamSlot):
    x = np.asarray(x, dtype=DTYPE)
    n_out, n_in = W.shape
    if x.shape[-1] != n_in or b.shape != (n_out,):
        raise DimensionError(
            f"linear {W.name}: input {x.shape} incompatible with weights {W.shape} / bias {b.shape}"
        )
    return x @ W.value.T + b.value, x


def linear_backward(grad_out, cache, W: ParamSlot, b: ParamSlot):
    _require(cache, "linear")
    x = cache
    g2 = grad_out.reshape(-1, W.shape[0])
    W.grad += g2.T @ x.reshape(-1, W.shape[1])
    b.grad += g2.sum(axis=0)
    return grad_out @ W.value


# --------------------------------------------------------------------------
# relu


def relu_forward(x):
    x = np.asarray(x, dtype=DTYPE)
    return np.maximum(x, 0.0), x


def relu_backward(grad_out, cache):
    _require(cache, "relu")
    # subgradient at exactly zero is 0
    return grad_out * (cache > 0.0)


# --------------------------------------------------------------------------
# 3x3 convolution, zero padding 1, stride 1


def conv2d_forward(x, K: ParamSlot, b: ParamSlot):
    """Cross-correlation of ``x`` (N, C_in, H, W) with ``K`` (C_out, C_in, 3, 3)."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 3:
        out, cache = conv2d_forward(x[None], K, b)
        return out[0], (cache, True)
    if x.ndim != 4 or K.value.ndim != 4 or K.shape[2:] != (3, 3) or x.shape[1] != K.shape[1]:
        raise DimensionError(f"conv2d {K.name}: input {x.shape} incompatible with kernels {K.shape}")
    if b.shape != (K.shape[0],):
        raise DimensionError(f"conv2d {K.name}: bias {b.shape} does not match {K.shape[0]} output channels")
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))  # N, C, H, W, 3, 3
    out = np.einsum("nchwpq,ocpq->nohw", cols, K.value, optimize=True)
    out += b.value[None, :, None, None]
    return out, (x, False)


def conv2d_backward(grad_out, cache, K: ParamSlot, b: ParamSlot):
    _require(cache, "conv2d")
    x, squeezed = cache
    if squeezed:
        return conv2d_backward(grad_out[None], x, K, b)[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))
    K.grad += np.einsum("nohw,nchwpq->ocpq", grad_out, cols, optimize=True)
    b.grad += grad_out.sum(axis=(0, 2, 3))
    gp = np.pad(grad_out, ((0, 0), (0, 0), (1, 1), (1, 1)))
    gcols = sliding_window_view(gp, (3, 3), axis=(2, 3))
    flipped = K.value[:, :, ::-1, ::-1]
    return np.einsum("nohwpq,ocpq->nchw", gcols, flipped, optimize=True)


# --------------------------------------------------------------------------
# 1x3 max pooling, stride 1x3


def maxpool_forward(x):
    """Max over non-overlapping 1x3 windows along the last axis.

    Trailing columns that do not fill a window are dropped.
    """
    x = np.asarray(x, dtype=DTYPE)
    width = x.shape[-1]
    if width < 3:
        raise DimensionError(f"maxpool needs width >= 3, got {width}")
    n = width // 3
    windows = x[..., : 3 * n].reshape(*x.shape[:-1], n, 3)
    # np.argmax returns the first maximal index: ties route to the lowest index
    arg = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def maxpool_backward(grad_out, cache):
    _require(cache, "maxpool")
    shape, arg = cache
    n = arg.shape[-1]
    gw = np.zeros((*shape[:-1], n, 3), dtype=DTYPE)
    np.put_along_axis(gw, arg[..., None], grad_out[..., None], axis=-1)
    dx = np.zeros(shape, dtype=DTYPE)
    dx[..., : 3 * n] = gw.reshape(*shape[:-1], 3 * n)
    return dx


# --------------------------------------------------------------------------
# LSTM cell
#
# Weights are packed as W (4H, n_in + H) acting on [x, h_prev]; gate order is
# input, forget, output, candidate.


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def lstm_forward(x, h_prev, c_prev, W: ParamSlot, b: ParamSlot):
    x = np.asarray(x, dtype=DTYPE)
    H = h_prev.shape[-1]
    if W.shape != (4 * H, x.shape[-1] + H) or c_prev.shape != h_prev.shape or b.shape != (4 * H,):
        raise DimensionError(
            f"lstm {W.name}: x {x.shape}, h {h_prev.shape}, c {c_prev.shape} vs weights {W.shape}"
        )
    xh = np.concatenate([x, h_prev], axis=-1)
    z = xh @ W.value.T + b.value
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H : 2 * H])
    o = _sigmoid(z[..., 2 * H : 3 * H])
    g = np.tanh(z[..., 3 * H :])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (xh, c_prev, i, f, o, g, tc)


def lstm_backward(dh, dc, cache, W: ParamSlot, b: ParamSlot):
    """One step of BPTT.

    ``dh`` and ``dc`` are the total upstream gradients on this step's outputs.
    Returns ``(dx, dh_prev, dc_prev)``.
    """
    _require(cache, "lstm")
    xh, c_prev, i, f, o, g, tc = cache
    H = i.shape[-1]
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dc_prev = dc * f
    dz = np.concatenate(
        [di * i * (1.0 - i), df * f * (1.0 - f), do * o * (1.0 - o), dg * (1.0 - g * g)], axis=-1
    )
    W.grad += dz.reshape(-1, 4 * H).T @ xh.reshape(-1, xh.shape[-1])
    b.grad += dz.reshape(-1, 4 * H).sum(axis=0)
    dxh = dz @ W.value
    n_in = xh.shape[-1] - H
    return dxh[..., :n_in], dxh[..., n_in:], dc_prev


# --------------------------------------------------------------------------
# softmax + cross-entropy


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent_forward(logits, labels):
    """Returns ``(probs, loss)`` with one loss per row of ``logits``."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels)
    n_classes = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise DimensionError(f"class index out of range [0, {n_classes})")
    z = logits - logits.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    log_probs = z - log_norm
    probs = np.exp(log_probs)
    loss = -np.take_along_axis(log_probs, labels[..., None], axis=-1)[..., 0]
    return probs, loss


def softmax_xent_backward(probs, labels, weight=1.0):
    """Gradient of ``weight * loss`` with respect to the logits (probs - onehot)."""
    grad = probs.copy()
    idx = np.asarray(labels)[..., None]
    np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=-1) - 1.0, axis=-1)
    return grad * np.asarray(weight, dtype=DTYPE)[..., None]


# --------------------------------------------------------------------------
# optimizer


def clip_grad(slot: ParamSlot, max_norm: float) -> float:
    """Rescale ``slot.grad`` in place to L2 norm ``max_norm``; returns the pre-clip norm."""
    norm = float(np.sqrt(np.sum(slot.grad * slot.grad)))
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        slot.grad *= max_norm / norm
    return norm


def sgd_momentum_step(params: Iterable[ParamSlot], lr: float, momentum: float, grad_clip: float | None):
    """``v <- momentum * v - lr * g``; ``value += v``, with per-tensor clipping first."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {p.name!r}")
        clip_grad(p, grad_clip)
        p.velocity *= momentum
        p.velocity -= lr * p.grad
        p.value += p.velocity


# --------------------------------------------------------------------------
# checkpoint container
#
# magic "RAAF1", then per slot: u64 name length, name bytes (utf-8), u64 rank,
# rank x u64 dims, prod(dims) x f64 values. All little-endian.


def save_params(path, params: Sequence[ParamSlot]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for p in params:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<Q", len(name)))
            fh.write(name)
            fh.write(struct.pack("<Q", p.value.ndim))
            fh.write(struct.pack(f"<{p.value.ndim}Q", *p.value.shape))
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    """Read a checkpoint into an ordered ``{name: array}`` mapping."""
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not a RAAF1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    out: dict[str, np.ndarray] = {}

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise DataError(f"{path}: truncated checkpoint")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        values = np.frombuffer(take(8 * count), dtype="<f8").astype(DTYPE)
        out[name] = values.reshape(dims)
    return out
