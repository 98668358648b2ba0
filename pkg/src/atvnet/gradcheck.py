"""Finite-difference gradient suite: every layer plus a tiny whole model, in float64.

Backward functions are looked up through their modules at call time, so a
test can monkeypatch one of them and watch the named check fail.
"""
from __future__ import annotations

import numpy as np

from . import layers, loss, model, tensor_core
from .layers import BatchNorm2DParams, Conv2DParams, finite_difference_check, nudge_from_zero

TOLERANCE = 1e-4
STEP = 1e-4


def _projection(rng, shape):
    """Random cotangent used to reduce an array-valued op to a scalar."""
    return rng.standard_normal(shape)


def check_conv(rng, k, stride=1, dilation=1, bias=True, name=None):
    x = rng.standard_normal((2, 3, 7, 7))
    p = Conv2DParams(rng.standard_normal((4, 3, k, k)) * 0.5,
                     rng.standard_normal(4) if bias else None,
                     stride, layers.same_padding(k, dilation), dilation)
    y = layers.conv2d_forward(x, p)
    r = _projection(rng, y.shape)
    dx, dw, db = layers.conv2d_backward(x, p, r)
    arrays, grads = {"x": x, "weight": p.weight}, {"x": dx, "weight": dw}
    if bias:
        arrays["bias"], grads["bias"] = p.bias, db
    return finite_difference_check(lambda: float((layers.conv2d_forward(x, p) * r).sum()),
                                   arrays, grads, TOLERANCE, STEP,
                                   name or f"conv{k}x{k} s{stride} d{dilation}")


def check_batchnorm(rng):
    x = rng.standard_normal((3, 4, 5, 5)) * 2 + 1
    p = BatchNorm2DParams(rng.uniform(0.5, 1.5, 4), rng.standard_normal(4),
                          np.zeros(4), np.ones(4))
    y, cache = layers.batchnorm_forward(x, p, update_stats=False)
    r = _projection(rng, y.shape)
    dx, dg, db = layers.batchnorm_backward(r, p, cache)

    def f():
        return float((layers.batchnorm_forward(x, p, update_stats=False)[0] * r).sum())
    return finite_difference_check(f, {"x": x, "gamma": p.gamma, "beta": p.beta},
                                   {"x": dx, "gamma": dg, "beta": db}, TOLERANCE, STEP, "batchnorm")


def check_activation(rng, kind):
    x = nudge_from_zero(rng.standard_normal((2, 3, 4, 4)) * 2)
    r = _projection(rng, x.shape)
    dx = tensor_core.activation_backward(kind, x, r)
    return finite_difference_check(lambda: float((tensor_core.activation(kind, x) * r).sum()),
                                   {"x": x}, {"x": dx}, TOLERANCE, STEP, kind)


def check_softmax(rng):
    x = rng.standard_normal((2, 3, 2, 2)) * 2
    r = _projection(rng, x.shape)
    dx = tensor_core.softmax_channels_backward(tensor_core.softmax_channels(x), r)
    return finite_difference_check(lambda: float((tensor_core.softmax_channels(x) * r).sum()),
                                   {"x": x}, {"x": dx}, TOLERANCE, STEP, "softmax")


def check_gap(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    r = _projection(rng, (2, 3, 1, 1))
    dx = tensor_core.global_avg_pool_backward(r, 4, 5)
    return finite_difference_check(lambda: float((tensor_core.global_avg_pool(x) * r).sum()),
                                   {"x": x}, {"x": dx}, TOLERANCE, STEP, "global_avg_pool")


def check_upsample(rng, factor=8):
    x = rng.standard_normal((1, 2, 3, 4))
    r = _projection(rng, (1, 2, 3 * factor, 4 * factor))
    dx = tensor_core.bilinear_upsample_backward(r, factor)
    return finite_difference_check(lambda: float((tensor_core.bilinear_upsample(x, factor) * r).sum()),
                                   {"x": x}, {"x": dx}, TOLERANCE, STEP, f"bilinear_upsample x{factor}")


def check_ohem(rng):
    logits = rng.standard_normal((2, 4, 5, 5)) * 2
    labels = rng.integers(0, 4, (2, 5, 5))
    labels[0, 0, :3] = loss.IGNORE_INDEX
    cfg = loss.OHEMConfig(theta=0.7, min_kept=10)
    _, dlogits, selected = loss.ohem_loss(logits, labels, cfg)
    return finite_difference_check(lambda: loss.ohem_loss(logits, labels, cfg, selected)[0],
                                   {"logits": logits}, {"logits": dlogits}, TOLERANCE, STEP,
                                   "ohem_loss (frozen selection)")


def tiny_model_config(num_classes: int = 3) -> model.ModelConfig:
    bb = model.BackboneConfig(stem_channels=4, stage_channels=(8, 8, 8))
    return model.ModelConfig(backbone=bb, head_channels=8, gate_channels=8,
                             scout_dilation=2, num_classes=num_classes)


def check_model(rng, seed=0):
    """Whole tiny network (C=8, 16x16 input) through the OHEM loss.

    Checks the image gradient and every parameter. Probes that flip a ReLU
    somewhere inside the network are retried with a smaller step.
    """
    cfg = tiny_model_config()
    P = model.build_model(cfg, seed=seed, dtype=np.float64)
    # non-trivial biases and affine terms so those gradients are exercised
    for k, v in P.weights.items():
        if not k.endswith(".weight"):
            v += rng.standard_normal(v.shape) * 0.1
    x = nudge_from_zero(rng.uniform(0, 1, (2, 3, 16, 16)))
    labels = rng.integers(0, cfg.num_classes, (2, 16, 16))
    ocfg = loss.OHEMConfig(theta=0.7, min_kept=64)
    logits, trace = model.model_forward(x, P, "train", update_stats=False)
    _, dlogits, selected = loss.ohem_loss(logits, labels, ocfg)
    grads = model.model_backward(trace, P, dlogits, input_grad=True)

    last = {}

    def f():
        out, tr = model.model_forward(x, P, "train", update_stats=False)
        last["trace"] = tr
        return loss.ohem_loss(out, labels, ocfg, selected)[0]

    def relu_pattern():
        return model.relu_signature(last["trace"])

    arrays = {"input": x, **P.weights}
    return finite_difference_check(f, arrays, grads, TOLERANCE, STEP, "whole tiny model",
                                   signature=relu_pattern)


def run_suite(seed: int = 0, include_model: bool = True) -> list:
    rng = np.random.default_rng(seed)
    reports = [
        check_conv(rng, 1, name="conv1x1 (micro view)"),
        check_conv(rng, 3, name="conv3x3 (local view)"),
        check_conv(rng, 5, dilation=2, name="conv5x5 d2 (scout view)"),
        check_conv(rng, 3, stride=2, bias=False, name="conv3x3 s2 (downsampling)"),
        check_batchnorm(rng),
        check_activation(rng, "relu"),
        check_activation(rng, "sigmoid"),
        check_softmax(rng),
        check_gap(rng),
        check_upsample(rng),
        check_ohem(rng),
    ]
    if include_model:
        reports.append(check_model(rng, seed))
    return reports
