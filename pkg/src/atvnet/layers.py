"""Convolution and batch normalisation with explicit backward passes, plus a
central-difference gradient checker."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class Conv2DParams:
    weight: np.ndarray                 # (O, I, K, K)
    bias: np.ndarray | None = None     # (O,)
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


def same_padding(kernel_size: int, dilation: int = 1) -> int:
    return dilation * (kernel_size - 1) // 2


def conv_output_size(n: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (n + 2 * pad - (k - 1) * dilation - 1) // stride + 1


def _geometry(x, p: Conv2DParams):
    n, c, h, w = x.shape
    o, i, kh, kw = p.weight.shape
    if c != i:
        raise ValueError(f"input has {c} channels, weight expects {i}")
    if kh != kw:
        raise ValueError("only square kernels are supported")
    extent = kh + (kh - 1) * (p.dilation - 1)
    if extent > h + 2 * p.padding or extent > w + 2 * p.padding:
        raise ValueError(f"kernel extent {extent} exceeds padded input {h}x{w}+2*{p.padding}")
    ho = conv_output_size(h, kh, p.stride, p.padding, p.dilation)
    wo = conv_output_size(w, kw, p.stride, p.padding, p.dilation)
    return n, c, h, w, o, kh, ho, wo


def _tap(xp, kh, kw, d, s, ho, wo):
    """Strided view of the padded input seen by kernel tap (kh, kw)."""
    r, q = kh * d, kw * d
    return xp[:, :, r:r + s * (ho - 1) + 1:s, q:q + s * (wo - 1) + 1:s]


def im2col(x, p: Conv2DParams):
    """Columns of shape (I*K*K, N*Ho*Wo), row order matching weight.reshape(O, -1)."""
    n, c, h, w, o, k, ho, wo = _geometry(x, p)
    pad, s, d = p.padding, p.stride, p.dilation
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, a, b] = _tap(xp, a, b, d, s, ho, wo).transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo)


def conv2d_forward(x: np.ndarray, p: Conv2DParams, return_cols: bool = False):
    """Cross-correlation with zero padding, stride and dilation (im2col + GEMM)."""
    n, c, h, w, o, k, ho, wo = _geometry(x, p)
    cols = im2col(x, p)
    y = (p.weight.reshape(o, -1) @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if p.bias is not None:
        y = y + p.bias.reshape(1, o, 1, 1)
    y = np.ascontiguousarray(y)
    return (y, cols) if return_cols else y


def conv2d_backward(x: np.ndarray, p: Conv2DParams, dy: np.ndarray, cols=None):
    """Returns (dx, dweight, dbias); dbias is None when the conv has no bias."""
    n, c, h, w, o, k, ho, wo = _geometry(x, p)
    if dy.shape != (n, o, ho, wo):
        raise ValueError(f"dy shape {dy.shape} != output shape {(n, o, ho, wo)}")
    if cols is None:
        cols = im2col(x, p)
    dy2 = dy.transpose(1, 0, 2, 3).reshape(o, -1)
    dweight = (dy2 @ cols.T).reshape(p.weight.shape)
    dbias = dy.sum(axis=(0, 2, 3)) if p.bias is not None else None

    dcols = (p.weight.reshape(o, -1).T @ dy2).reshape(c, k, k, n, ho, wo)
    pad, s, d = p.padding, p.stride, p.dilation
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dy.dtype)
    for a in range(k):
        for b in range(k):
            _tap(dxp, a, b, d, s, ho, wo)[...] += dcols[:, a, b].transpose(1, 0, 2, 3)
    dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    return np.ascontiguousarray(dx), dweight, dbias


def conv2d_direct(x: np.ndarray, p: Conv2DParams) -> np.ndarray:
    """Loop-by-loop reference convolution. Slow; used to validate the GEMM path."""
    n, c, h, w, o, k, ho, wo = _geometry(x, p)
    s, pad, d = p.stride, p.padding, p.dilation
    y = np.zeros((n, o, ho, wo), dtype=np.float64)
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if p.bias is None else float(p.bias[oc])
                    for ic in range(c):
                        for a in range(k):
                            r = i * s - pad + a * d
                            if r < 0 or r >= h:
                                continue
                            for q in range(k):
                                col = j * s - pad + q * d
                                if 0 <= col < w:
                                    acc += float(p.weight[oc, ic, a, q]) * float(x[b, ic, r, col])
                    y[b, oc, i, j] = acc
    return y.astype(x.dtype)


@dataclass
class BatchNorm2DParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, **kw) -> "BatchNorm2DParams":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), **kw)


def batchnorm_forward(x: np.ndarray, p: BatchNorm2DParams, update_stats: bool = True):
    """Returns (y, cache). Train mode updates running statistics in place
    unless ``update_stats`` is False."""
    c = x.shape[1]
    shape = (1, c, 1, 1)
    if p.mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise ValueError("train-mode batch norm needs at least 2 values per channel")
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_stats:
            mom = p.momentum
            p.running_mean[...] = (1 - mom) * p.running_mean + mom * mu
            p.running_var[...] = (1 - mom) * p.running_var + mom * var
    elif p.mode == "eval":
        if not np.any(p.running_var) and not np.any(p.running_mean):
            log.warning("batch norm in eval mode with empty running statistics")
        mu, var = p.running_mean, p.running_var
    else:
        raise ValueError(f"unknown batch norm mode {p.mode!r}")
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = (x - mu.reshape(shape)) * inv_std.reshape(shape).astype(x.dtype)
    y = xhat * p.gamma.reshape(shape) + p.beta.reshape(shape)
    return y, (xhat, inv_std.astype(x.dtype), p.mode)


def batchnorm_backward(dy: np.ndarray, p: BatchNorm2DParams, cache):
    """Returns (dx, dgamma, dbeta)."""
    xhat, inv_std, mode = cache
    shape = (1, -1, 1, 1)
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dxhat = dy * p.gamma.reshape(shape)
    if mode == "eval":
        return dxhat * inv_std.reshape(shape), dgamma, dbeta
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dx = (inv_std.reshape(shape) / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3), keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    failures: list = field(default_factory=list)   # (array name, flat index, analytic, numeric)
    checked: int = 0
    kinks: list = field(default_factory=list)      # coordinates with no kink-free step

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f", {len(self.kinks)} at kinks" if self.kinks else ""
        return (f"{status} {self.name}: max_rel_err={self.max_rel_error:.3e} "
                f"(tol {self.tolerance:.0e}, {self.checked} coords{extra})")


def nudge_from_zero(x: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    """Push entries within ``margin`` of zero out to +-margin (away from ReLU kinks)."""
    x = np.array(x, dtype=np.float64)
    near = np.abs(x) < margin
    x[near] = np.where(x[near] < 0, -margin, margin)
    return x


def relative_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))


def finite_difference_check(f: Callable[[], float], arrays: dict, grads: dict,
                            tolerance: float = 1e-4, h: float = 1e-4,
                            name: str = "layer", max_failures: int = 20,
                            signature: Callable[[], bytes] | None = None,
                            refinements: int = 3) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``f`` evaluates the scalar objective reading the arrays in ``arrays``
    (which are perturbed in place and restored). ``grads`` holds the
    analytic gradient for every key of ``arrays``.

    ``signature``, if given, returns the on/off pattern of every ReLU after
    the most recent ``f()`` call. When a +-h probe changes that pattern the
    step straddles a kink, so the step is divided by 10 (up to
    ``refinements`` times); coordinates that never get a kink-free step are
    listed in ``report.kinks`` and not scored.
    """
    report = GradCheckReport(name, 0.0, tolerance)
    base_sig = None
    if signature is not None:
        f()
        base_sig = signature()
    for key, arr in arrays.items():
        if arr.dtype != np.float64:
            raise TypeError(f"{key}: gradient checks need float64, got {arr.dtype}")
        if not arr.flags.c_contiguous:
            raise ValueError(f"{key}: array must be C-contiguous")
        g = np.asarray(grads[key], dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            step, num = h, None
            for _ in range(refinements + 1):
                flat[idx] = orig + step
                fp = f()
                clean = base_sig is None or signature() == base_sig
                flat[idx] = orig - step
                fm = f()
                clean = clean and (base_sig is None or signature() == base_sig)
                flat[idx] = orig
                if clean:
                    num = (fp - fm) / (2 * step)
                    break
                step /= 10
            if num is None:
                report.kinks.append((key, idx))
                continue
            err = float(relative_error(gflat[idx], num))
            report.checked += 1
            if err > report.max_rel_error:
                report.max_rel_error = err
            if err >= tolerance and len(report.failures) < max_failures:
                report.failures.append((key, idx, float(gflat[idx]), float(num)))
    return report
