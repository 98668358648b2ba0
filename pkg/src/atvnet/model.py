"""ATV-Net: dilated residual backbone (output stride 8), triple-view head,
view gate, global coordination and classifier, with explicit backward.

Parameters live in a flat ``{path: array}`` dict so they can be iterated,
checkpointed and updated without any module tree.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .layers import (BatchNorm2DParams, Conv2DParams, batchnorm_backward,
                     batchnorm_forward, conv2d_backward, conv2d_forward)

OUTPUT_STRIDE = 8
VIEWS = ("micro", "local", "scout")


@dataclass
class BackboneConfig:
    stem_channels: int = 16
    stage_channels: tuple = (32, 64, 64)
    blocks_per_stage: tuple = (1, 1, 1)
    stage_strides: tuple = (2, 2, 1)
    stage_dilations: tuple = (1, 1, 2)
    input_channels: int = 3

    def validate(self):
        n = len(self.stage_channels)
        if not (len(self.blocks_per_stage) == len(self.stage_strides) == len(self.stage_dilations) == n):
            raise ValueError("stage lists must have equal length")
        if self.stem_channels < 1 or min(self.stage_channels) < 1 or self.input_channels < 1:
            raise ValueError("channel counts must be positive")
        if min(self.blocks_per_stage) < 1:
            raise ValueError("each stage needs at least one block")
        if 2 * int(np.prod(self.stage_strides)) != OUTPUT_STRIDE:
            raise ValueError(f"stem stride 2 times stage strides {self.stage_strides} must equal 8")
        # the stem already downsamples, so every stride-1 stage comes after one
        for s, d in zip(self.stage_strides, self.stage_dilations):
            if s == 1 and d < 2:
                raise ValueError("stride-1 stages after downsampling must be dilated")

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1]


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head_channels: int | None = None     # defaults to backbone width
    gate_channels: int | None = None     # defaults to max(C/4, 8)
    scout_dilation: int = 2
    num_classes: int = 5
    gate: str = "adaptive"               # or "fixed": alpha pinned to 1/3

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**{k: tuple(v) if isinstance(v, list) else v
                                              for k, v in self.backbone.items()})
        c = self.backbone.out_channels
        if self.head_channels is None:
            self.head_channels = c
        if self.gate_channels is None:
            self.gate_channels = max(c // 4, 8)

    @property
    def se_channels(self) -> int:
        return max(self.head_channels // 4, 8)

    def validate(self):
        self.backbone.validate()
        if min(self.head_channels, self.gate_channels) < 1:
            raise ValueError("head and gate widths must be positive")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.scout_dilation < 1:
            raise ValueError("scout dilation must be >= 1")
        if self.gate not in ("adaptive", "fixed"):
            raise ValueError(f"unknown gate mode {self.gate!r}")


@dataclass
class ATVNetParams:
    config: ModelConfig
    weights: dict      # trainable arrays
    buffers: dict      # batch-norm running statistics

    def copy(self) -> "ATVNetParams":
        return ATVNetParams(self.config, {k: v.copy() for k, v in self.weights.items()},
                            {k: v.copy() for k, v in self.buffers.items()})

    def astype(self, dtype) -> "ATVNetParams":
        return ATVNetParams(self.config, {k: v.astype(dtype) for k, v in self.weights.items()},
                            {k: v.astype(dtype) for k, v in self.buffers.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.weights.values())


def _block_names(cfg: BackboneConfig):
    """Yield (prefix, in_ch, out_ch, stride, dilation) for every residual block."""
    cin = cfg.stem_channels
    for s, (cout, nb, st, dil) in enumerate(zip(cfg.stage_channels, cfg.blocks_per_stage,
                                                 cfg.stage_strides, cfg.stage_dilations)):
        for b in range(nb):
            stride = st if b == 0 else 1
            yield f"backbone.stage{s + 1}.block{b}", cin, cout, stride, dil
            cin = cout


def parameter_shapes(cfg: ModelConfig) -> dict:
    """Every trainable parameter path and its shape, in initialisation order."""
    bb = cfg.backbone
    shapes = {}

    def conv(name, cin, cout, k, bias):
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        if bias:
            shapes[f"{name}.bias"] = (cout,)

    def bn(name, ch):
        shapes[f"{name}.gamma"] = (ch,)
        shapes[f"{name}.beta"] = (ch,)

    conv("backbone.stem.conv", bb.input_channels, bb.stem_channels, 3, False)
    bn("backbone.stem.bn", bb.stem_channels)
    for prefix, cin, cout, stride, _ in _block_names(bb):
        conv(f"{prefix}.conv1", cin, cout, 3, False)
        bn(f"{prefix}.bn1", cout)
        conv(f"{prefix}.conv2", cout, cout, 3, False)
        bn(f"{prefix}.bn2", cout)
        if stride != 1 or cin != cout:
            conv(f"{prefix}.down.conv", cin, cout, 1, False)
            bn(f"{prefix}.down.bn", cout)

    c, ch = bb.out_channels, cfg.head_channels
    conv("view_micro", c, ch, 1, True)
    conv("view_local", c, ch, 3, True)
    conv("view_scout", c, ch, 5, True)
    if cfg.gate == "adaptive":
        conv("gate.conv1", c, cfg.gate_channels, 1, True)
        conv("gate.conv2", cfg.gate_channels, 3, 1, True)
    conv("coord.conv1", ch, ch, 3, True)
    conv("coord.conv2", ch, ch, 3, True)
    conv("coord.se1", ch, cfg.se_channels, 1, True)
    conv("coord.se2", cfg.se_channels, ch, 1, True)
    conv("classifier", ch, cfg.num_classes, 1, True)
    return shapes


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ATVNetParams:
    """He-normal conv weights, zero biases/betas, unit gammas, fresh running stats."""
    cfg.validate()
    rng = np.random.default_rng(np.uint64(seed))
    weights, buffers = {}, {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            weights[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
        elif name.endswith(".gamma"):
            weights[name] = np.ones(shape, dtype)
            base = name[:-len(".gamma")]
            buffers[f"{base}.running_mean"] = np.zeros(shape, dtype)
            buffers[f"{base}.running_var"] = np.ones(shape, dtype)
        else:
            weights[name] = np.zeros(shape, dtype)
    return ATVNetParams(cfg, weights, buffers)


# ---------------------------------------------------------------------------
# small layer wrappers over the flat parameter dict

def _conv_params(P: ATVNetParams, name, stride=1, padding=0, dilation=1):
    return Conv2DParams(P.weights[f"{name}.weight"], P.weights.get(f"{name}.bias"),
                        stride, padding, dilation)


def _conv_fwd(x, P, name, cache, stride=1, padding=0, dilation=1):
    p = _conv_params(P, name, stride, padding, dilation)
    y, cols = conv2d_forward(x, p, return_cols=True)
    cache[name] = (x, cols, stride, padding, dilation)
    return y


def _conv_bwd(dy, P, name, cache, grads, need_dx=True):
    x, cols, stride, padding, dilation = cache[name]
    p = _conv_params(P, name, stride, padding, dilation)
    dx, dw, db = conv2d_backward(x, p, dy, cols)
    _acc(grads, f"{name}.weight", dw)
    if db is not None:
        _acc(grads, f"{name}.bias", db)
    return dx


def _acc(grads, key, g):
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def _bn_params(P, name, mode):
    return BatchNorm2DParams(P.weights[f"{name}.gamma"], P.weights[f"{name}.beta"],
                             P.buffers[f"{name}.running_mean"], P.buffers[f"{name}.running_var"],
                             mode=mode)


def _bn_fwd(x, P, name, cache, mode, update_stats):
    y, c = batchnorm_forward(x, _bn_params(P, name, mode), update_stats=update_stats)
    cache[name] = c
    return y


def _bn_bwd(dy, P, name, cache, grads):
    dx, dg, db = batchnorm_backward(dy, _bn_params(P, name, cache[name][2]), cache[name])
    _acc(grads, f"{name}.gamma", dg)
    _acc(grads, f"{name}.beta", db)
    return dx


# ---------------------------------------------------------------------------
# backbone

def backbone_forward(x, P: ATVNetParams, mode="eval", cache=None, update_stats=True):
    """Image (N, 3, H, W) -> features (N, C, H/8, W/8)."""
    if x.shape[2] % OUTPUT_STRIDE or x.shape[3] % OUTPUT_STRIDE:
        raise ValueError(f"input size {x.shape[2:]} not divisible by {OUTPUT_STRIDE}")
    cache = {} if cache is None else cache
    bb = P.config.backbone
    h = _conv_fwd(x, P, "backbone.stem.conv", cache, stride=2, padding=1)
    h = _bn_fwd(h, P, "backbone.stem.bn", cache, mode, update_stats)
    cache["backbone.stem.pre"] = h
    h = tc.relu(h)
    for prefix, cin, cout, stride, dil in _block_names(bb):
        t = _conv_fwd(h, P, f"{prefix}.conv1", cache, stride, dil, dil)
        t = _bn_fwd(t, P, f"{prefix}.bn1", cache, mode, update_stats)
        cache[f"{prefix}.pre1"] = t
        t = tc.relu(t)
        t = _conv_fwd(t, P, f"{prefix}.conv2", cache, 1, dil, dil)
        t = _bn_fwd(t, P, f"{prefix}.bn2", cache, mode, update_stats)
        if f"{prefix}.down.conv.weight" in P.weights:
            sc = _conv_fwd(h, P, f"{prefix}.down.conv", cache, stride)
            sc = _bn_fwd(sc, P, f"{prefix}.down.bn", cache, mode, update_stats)
        else:
            sc = h
        t = t + sc
        cache[f"{prefix}.pre2"] = t
        h = tc.relu(t)
    return h


def backbone_backward(dF, P: ATVNetParams, cache, grads):
    blocks = list(_block_names(P.config.backbone))
    dh = dF
    for prefix, cin, cout, stride, dil in reversed(blocks):
        dt = tc.relu_backward(cache[f"{prefix}.pre2"], dh)
        if f"{prefix}.down.conv.weight" in P.weights:
            dsc = _bn_bwd(dt, P, f"{prefix}.down.bn", cache, grads)
            dsc = _conv_bwd(dsc, P, f"{prefix}.down.conv", cache, grads)
        else:
            dsc = dt
        d = _bn_bwd(dt, P, f"{prefix}.bn2", cache, grads)
        d = _conv_bwd(d, P, f"{prefix}.conv2", cache, grads)
        d = tc.relu_backward(cache[f"{prefix}.pre1"], d)
        d = _bn_bwd(d, P, f"{prefix}.bn1", cache, grads)
        d = _conv_bwd(d, P, f"{prefix}.conv1", cache, grads)
        dh = d + dsc
    d = tc.relu_backward(cache["backbone.stem.pre"], dh)
    d = _bn_bwd(d, P, "backbone.stem.bn", cache, grads)
    return _conv_bwd(d, P, "backbone.stem.conv", cache, grads)


# ---------------------------------------------------------------------------
# head

def triple_view(F, P: ATVNetParams, cache=None):
    """Micro (1x1), local (3x3) and scout (dilated 5x5) views, all the same shape."""
    cache = {} if cache is None else cache
    d = P.config.scout_dilation
    fm = _conv_fwd(F, P, "view_micro", cache)
    fl = _conv_fwd(F, P, "view_local", cache, padding=1)
    fs = _conv_fwd(F, P, "view_scout", cache, padding=2 * d, dilation=d)
    return fm, fl, fs


def triple_view_backward(dviews, P, cache, grads):
    dF = _conv_bwd(dviews[0], P, "view_micro", cache, grads)
    dF = dF + _conv_bwd(dviews[1], P, "view_local", cache, grads)
    return dF + _conv_bwd(dviews[2], P, "view_scout", cache, grads)


def decision_gate(F, P: ATVNetParams, cache=None):
    """Per-image view weights alpha, shape (N, 3, 1, 1), rows on the simplex."""
    cache = {} if cache is None else cache
    if P.config.gate == "fixed":
        return np.full((F.shape[0], 3, 1, 1), 1.0 / 3, dtype=F.dtype)
    z = tc.global_avg_pool(F)
    g1 = _conv_fwd(z, P, "gate.conv1", cache)
    cache["gate.pre"] = g1
    g2 = _conv_fwd(tc.relu(g1), P, "gate.conv2", cache)
    cache["gate.logits"] = g2
    alpha = tc.softmax_channels(g2)
    cache["gate.alpha"] = alpha
    return alpha


def decision_gate_backward(dalpha, P, cache, grads, hw):
    dg2 = tc.softmax_channels_backward(cache["gate.alpha"], dalpha)
    d = _conv_bwd(dg2, P, "gate.conv2", cache, grads)
    d = tc.relu_backward(cache["gate.pre"], d)
    dz = _conv_bwd(d, P, "gate.conv1", cache, grads)
    return tc.global_avg_pool_backward(dz, *hw)


def fuse_views(fm, fl, fs, alpha):
    """Per-image convex combination of the three views."""
    if not (fm.shape == fl.shape == fs.shape):
        raise ValueError("view shapes differ")
    if alpha.shape != (fm.shape[0], 3, 1, 1):
        raise ValueError(f"alpha must be (N, 3, 1, 1), got {alpha.shape}")
    return alpha[:, 0:1] * fm + alpha[:, 1:2] * fl + alpha[:, 2:3] * fs


def fuse_views_backward(dftv, views, alpha):
    """Returns (d_views, d_alpha)."""
    dviews = tuple(alpha[:, i:i + 1] * dftv for i in range(3))
    dalpha = np.stack([(v * dftv).sum(axis=(1, 2, 3)) for v in views], axis=1)
    return dviews, dalpha.reshape(-1, 3, 1, 1)


def global_coordination(ftv, P: ATVNetParams, cache=None):
    """Two pad-1 3x3 convs, then per-channel sigmoid recalibration from pooled context."""
    cache = {} if cache is None else cache
    h = _conv_fwd(ftv, P, "coord.conv1", cache, padding=1)
    cache["coord.pre"] = h
    fp = _conv_fwd(tc.relu(h), P, "coord.conv2", cache, padding=1)
    cache["coord.refined"] = fp
    e = _conv_fwd(tc.global_avg_pool(fp), P, "coord.se1", cache)
    cache["coord.se_pre"] = e
    e = _conv_fwd(tc.relu(e), P, "coord.se2", cache)
    s = tc.sigmoid(e)
    cache["coord.scale"] = s
    return fp * s


def global_coordination_backward(dfr, P, cache, grads):
    fp, s = cache["coord.refined"], cache["coord.scale"]
    ds = (dfr * fp).sum(axis=(2, 3), keepdims=True)
    de = ds * s * (1 - s)
    d = _conv_bwd(de, P, "coord.se2", cache, grads)
    d = tc.relu_backward(cache["coord.se_pre"], d)
    dz = _conv_bwd(d, P, "coord.se1", cache, grads)
    dfp = dfr * s + tc.global_avg_pool_backward(dz, fp.shape[2], fp.shape[3])
    d = _conv_bwd(dfp, P, "coord.conv2", cache, grads)
    d = tc.relu_backward(cache["coord.pre"], d)
    return _conv_bwd(d, P, "coord.conv1", cache, grads)


# ---------------------------------------------------------------------------
# whole model

@dataclass
class ForwardTrace:
    mode: str
    cache: dict
    features: np.ndarray
    views: tuple
    alpha: np.ndarray
    fused: np.ndarray
    refined: np.ndarray
    logits_small: np.ndarray
    alpha_forced: bool = False


def model_forward(x, P: ATVNetParams, mode="eval", update_stats=True, alpha=None):
    """Full forward pass. Returns (logits (N, K, H, W), trace).

    ``alpha`` overrides the gate output (the gate is still evaluated).
    """
    cache = {}
    F = backbone_forward(x, P, mode, cache, update_stats)
    views = triple_view(F, P, cache)
    gate_alpha = decision_gate(F, P, cache)
    forced = alpha is not None
    a = np.asarray(alpha, dtype=F.dtype).reshape(-1, 3, 1, 1) if forced else gate_alpha
    if forced and a.shape[0] == 1 and F.shape[0] > 1:
        a = np.repeat(a, F.shape[0], axis=0)
    ftv = fuse_views(*views, a)
    fr = global_coordination(ftv, P, cache)
    small = _conv_fwd(fr, P, "classifier", cache)
    logits = tc.bilinear_upsample(small, OUTPUT_STRIDE)
    trace = ForwardTrace(mode, cache, F, views, a, ftv, fr, small, forced)
    return logits, trace


def model_backward(trace: ForwardTrace, P: ATVNetParams, dlogits, gate_gradient=True,
                   input_grad=False) -> dict:
    """Gradients for every trainable path.

    With ``gate_gradient=False`` alpha is treated as a constant: no gradient
    reaches the gate parameters or flows back through the pooled features.
    ``input_grad=True`` also returns the gradient w.r.t. the image as "input".
    """
    if trace.mode != "train":
        raise ValueError("backward needs a train-mode trace")
    cache, grads = trace.cache, {}
    dsmall = tc.bilinear_upsample_backward(dlogits, OUTPUT_STRIDE)
    dfr = _conv_bwd(dsmall, P, "classifier", cache, grads)
    dftv = global_coordination_backward(dfr, P, cache, grads)
    dviews, dalpha = fuse_views_backward(dftv, trace.views, trace.alpha)
    dF = triple_view_backward(dviews, P, cache, grads)
    use_gate = P.config.gate == "adaptive" and gate_gradient and not trace.alpha_forced
    if use_gate:
        dF = dF + decision_gate_backward(dalpha, P, cache, grads, trace.features.shape[2:])
    dx = backbone_backward(dF, P, cache, grads)
    if input_grad:
        grads["input"] = dx
    for k, v in P.weights.items():
        if k not in grads:
            grads[k] = np.zeros_like(v)
    return grads


_RELU_KEYS = ("pre", "pre1", "pre2", "se_pre")


def relu_signature(trace: ForwardTrace) -> bytes:
    """On/off pattern of every ReLU in a forward pass, packed into bytes.

    Two passes with equal signatures lie on the same linear piece, which is
    what a finite-difference probe needs.
    """
    keys = sorted(k for k in trace.cache if k.rsplit(".", 1)[-1] in _RELU_KEYS)
    return b"".join(np.packbits(trace.cache[k] > 0).tobytes() for k in keys)


def predict(x, P: ATVNetParams) -> np.ndarray:
    """Eval-mode argmax labels (N, H, W); ties go to the smaller class id."""
    logits, _ = model_forward(x, P, "eval")
    return logits.argmax(axis=1)
