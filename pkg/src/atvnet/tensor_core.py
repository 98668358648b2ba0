"""Dense NCHW tensors and the primitive differentiable ops the network is built from.

Tensors are plain numpy arrays. Every op here is pure: inputs are never
written to, and results are checked for NaN/Inf before being returned.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "NonFiniteError", "create", "add", "mul", "scale",
    "relu", "relu_backward", "sigmoid", "sigmoid_backward",
    "activation", "activation_backward",
    "softmax_channels", "softmax_channels_backward",
    "global_avg_pool", "global_avg_pool_backward",
    "bilinear_upsample", "bilinear_upsample_backward",
    "upsample_matrix",
]

_MAX_ELEMENTS = np.iinfo(np.intp).max


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def _quiet():
    return np.errstate(over="ignore", invalid="ignore")


def _finite(y: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(y).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return y


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ValueError("shape must have at least one dimension")
    if any(s < 1 for s in shape):
        raise ValueError(f"all extents must be >= 1, got {shape}")
    count = 1
    for s in shape:
        count *= s
        if count > _MAX_ELEMENTS:
            raise OverflowError(f"element count of {shape} overflows")
    return shape


def create(shape, init="zeros", *, value=0.0, low=0.0, high=1.0,
           mean=0.0, std=1.0, seed=None, dtype=np.float32) -> np.ndarray:
    """Allocate a tensor filled according to ``init``.

    ``init`` is one of ``"zeros"``, ``"constant"`` (uses ``value``),
    ``"uniform"`` (``low``, ``high``) or ``"normal"`` (``mean``, ``std``).
    Random fills draw from a PCG64 generator seeded with ``seed``.
    """
    shape = _check_shape(shape)
    if init == "zeros":
        return np.zeros(shape, dtype=dtype)
    if init == "constant":
        return np.full(shape, value, dtype=dtype)
    if init in ("uniform", "normal"):
        if seed is None:
            raise ValueError("random init requires a seed")
        rng = np.random.default_rng(np.uint64(seed))
        if init == "uniform":
            return rng.uniform(low, high, size=shape).astype(dtype)
        return rng.normal(mean, std, size=shape).astype(dtype)
    raise ValueError(f"unknown init {init!r}")


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b)
    with _quiet():
        return _finite(np.add(a, b), "add")


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b)
    with _quiet():
        return _finite(np.multiply(a, b), "mul")


def scale(a: np.ndarray, c: float) -> np.ndarray:
    with _quiet():
        return _finite(np.multiply(a, np.asarray(c, dtype=np.asarray(a).dtype)), "scale")


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, dy):
    # subgradient at exactly 0 is 0
    return np.where(x > 0, dy, 0).astype(np.result_type(dy), copy=False)


def sigmoid(x):
    x = np.asarray(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)


def sigmoid_backward(x, dy):
    s = sigmoid(x)
    return dy * s * (1 - s)


def activation(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return _finite(sigmoid(x), "sigmoid")
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(kind: str, x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return relu_backward(x, dy)
    if kind == "sigmoid":
        return sigmoid_backward(x, dy)
    raise ValueError(f"unknown activation {kind!r}")


def softmax_channels(x: np.ndarray) -> np.ndarray:
    """Softmax over axis 1 of an (N, C, H, W) tensor."""
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return _finite(e / e.sum(axis=1, keepdims=True), "softmax")


def softmax_channels_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the logits given the softmax output ``y``."""
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(dy: np.ndarray, h: int, w: int) -> np.ndarray:
    n, c = dy.shape[:2]
    return np.broadcast_to(dy / (h * w), (n, c, h, w)).copy()


def upsample_matrix(n_in: int, factor: int, dtype=np.float64) -> np.ndarray:
    """(n_in*factor, n_in) interpolation matrix, half-pixel centres.

    Rows sum to one, which is what keeps a constant input constant.
    """
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    a = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(a, (rows, i0), 1 - w1)
    np.add.at(a, (rows, i1), w1)
    return a


def bilinear_upsample(x: np.ndarray, factor: int) -> np.ndarray:
    """Upsample H and W by an integer factor (align_corners=False)."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return x.copy()
    ah = upsample_matrix(x.shape[2], factor, x.dtype)
    aw = upsample_matrix(x.shape[3], factor, x.dtype)
    return ah @ x @ aw.T


def bilinear_upsample_backward(dy: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return dy.copy()
    h, w = dy.shape[2] // factor, dy.shape[3] // factor
    ah = upsample_matrix(h, factor, dy.dtype)
    aw = upsample_matrix(w, factor, dy.dtype)
    return ah.T @ dy @ aw
