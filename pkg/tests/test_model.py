import numpy as np
import pytest

from atvnet import model as M
from atvnet import tensor_core as tc
from atvnet.gradcheck import check_model, tiny_model_config
from atvnet.layers import Conv2DParams, conv2d_forward
from atvnet.loss import OHEMConfig, ohem_loss


@pytest.fixture(scope="module")
def tiny():
    return M.build_model(tiny_model_config(num_classes=4), seed=3, dtype=np.float64)


@pytest.fixture(scope="module")
def default_params():
    return M.build_model(M.ModelConfig(), seed=0)


def test_build_is_deterministic():
    a = M.build_model(M.ModelConfig(), seed=11)
    b = M.build_model(M.ModelConfig(), seed=11)
    assert a.weights.keys() == b.weights.keys()
    assert all(a.weights[k].tobytes() == b.weights[k].tobytes() for k in a.weights)
    c = M.build_model(M.ModelConfig(), seed=12)
    assert a.weights["view_scout.weight"].tobytes() != c.weights["view_scout.weight"].tobytes()


def test_default_parameter_count_matches_hand_sum(default_params):
    # stem 3->16 3x3 + bn; stage1 16->32 s2 with projection; stage2 32->64 s2 with
    # projection; stage3 64->64 d2 identity; head C=Ch=64, Cg=16, se 16, K=5
    stem = 16 * 3 * 9 + 2 * 16
    s1 = 32 * 16 * 9 + 32 * 32 * 9 + 16 * 32 + 3 * 2 * 32
    s2 = 64 * 32 * 9 + 64 * 64 * 9 + 32 * 64 + 3 * 2 * 64
    s3 = 2 * 64 * 64 * 9 + 2 * 2 * 64
    views = (64 * 64 + 64) + (64 * 64 * 9 + 64) + (64 * 64 * 25 + 64)
    gate = (64 * 16 + 16) + (16 * 3 + 3)
    coord = 2 * (64 * 64 * 9 + 64) + (64 * 16 + 16) + (16 * 64 + 64)
    cls = 64 * 5 + 5
    assert default_params.num_parameters() == stem + s1 + s2 + s3 + views + gate + coord + cls


def test_shapes_of_named_params(default_params):
    w = default_params.weights
    assert w["view_micro.weight"].shape == (64, 64, 1, 1)
    assert w["view_scout.weight"].shape == (64, 64, 5, 5)
    assert w["gate.conv2.weight"].shape == (3, 16, 1, 1)
    small = M.build_model(M.ModelConfig(M.BackboneConfig(stage_channels=(8, 8, 8)), head_channels=8), 0)
    assert small.weights["view_micro.weight"].shape == (8, 8, 1, 1)


def test_he_init_scale(default_params):
    w = default_params.weights["view_scout.weight"]
    assert w.std() == pytest.approx(np.sqrt(2 / (64 * 25)), rel=0.05)
    assert not default_params.weights["view_scout.bias"].any()
    assert np.all(default_params.weights["backbone.stem.bn.gamma"] == 1)


@pytest.mark.parametrize("bad", [
    dict(stage_strides=(2, 1, 1), stage_dilations=(1, 2, 2)),    # OS 4
    dict(stage_strides=(2, 2, 1), stage_dilations=(1, 1, 1)),    # undilated stride-1 stage
    dict(stage_channels=(32, 64)),
])
def test_invalid_backbone_configs(bad):
    with pytest.raises(ValueError):
        M.build_model(M.ModelConfig(M.BackboneConfig(**bad)), 0)


@pytest.mark.parametrize("size", [16, 64, 96])
def test_output_stride_8(default_params, size):
    x = np.random.default_rng(0).random((1, 3, size, size)).astype(np.float32)
    F = M.backbone_forward(x, default_params)
    assert F.shape == (1, 64, size // 8, size // 8)


def test_indivisible_input_rejected(default_params):
    with pytest.raises(ValueError, match="divisible"):
        M.backbone_forward(np.zeros((1, 3, 30, 32), np.float32), default_params)


def test_zero_input_zero_gamma_is_finite():
    P = M.build_model(M.ModelConfig(), 0)
    for k in P.weights:
        if k.endswith("bn2.gamma"):
            P.weights[k][:] = 0
    logits, _ = M.model_forward(np.zeros((2, 3, 32, 32), np.float32), P, "train")
    assert np.isfinite(logits).all()


def test_triple_view_shapes_and_micro_pointwise(tiny):
    F = np.full((1, 8, 4, 4), 0.3)
    fm, fl, fs = M.triple_view(F, tiny)
    assert fm.shape == fl.shape == fs.shape == (1, 8, 4, 4)
    assert np.ptp(fm, axis=(2, 3)).max() < 1e-12
    k, d = 5, tiny.config.scout_dilation
    assert k + (k - 1) * (d - 1) == 9


def test_scout_view_receptive_field(tiny):
    """An impulse at the centre reaches exactly a 9x9 dilated lattice."""
    F = np.zeros((1, 8, 11, 11))
    F[0, :, 5, 5] = 1.0
    P = tiny.copy()
    P.weights["view_scout.bias"][:] = 0
    P.weights["view_scout.weight"][:] = 1.0
    _, _, fs = M.triple_view(F, P)
    nz = np.argwhere(fs[0, 0] != 0)
    assert nz.min(axis=0).tolist() == [1, 1] and nz.max(axis=0).tolist() == [9, 9]
    assert len(nz) == 25


def test_gate_uniform_when_last_conv_zero(tiny):
    P = tiny.copy()
    P.weights["gate.conv2.weight"][:] = 0
    P.weights["gate.conv2.bias"][:] = 0
    F = np.random.default_rng(0).standard_normal((3, 8, 4, 4))
    np.testing.assert_allclose(M.decision_gate(F, P).reshape(3, 3), 1 / 3, atol=1e-15)


def test_gate_is_permutation_invariant(tiny):
    rng = np.random.default_rng(1)
    F = rng.standard_normal((1, 8, 4, 4))
    perm = rng.permutation(16)
    Fp = F.reshape(1, 8, 16)[:, :, perm].reshape(1, 8, 4, 4)
    np.testing.assert_allclose(M.decision_gate(F, tiny), M.decision_gate(Fp, tiny), atol=1e-14)


def test_gate_matches_stepwise_composition(tiny):
    F = np.random.default_rng(2).standard_normal((2, 8, 4, 4))
    w = tiny.weights
    z = tc.global_avg_pool(F)
    h = tc.relu(conv2d_forward(z, Conv2DParams(w["gate.conv1.weight"], w["gate.conv1.bias"])))
    a = tc.softmax_channels(conv2d_forward(h, Conv2DParams(w["gate.conv2.weight"], w["gate.conv2.bias"])))
    np.testing.assert_allclose(M.decision_gate(F, tiny), a, rtol=1e-13)


def test_fuse_views_contracts():
    rng = np.random.default_rng(3)
    views = rng.standard_normal((3, 2, 4, 3, 3))
    onehot = np.tile(np.array([1.0, 0, 0]).reshape(1, 3, 1, 1), (2, 1, 1, 1))
    np.testing.assert_allclose(M.fuse_views(*views, onehot), views[0], atol=1e-7)
    same = views[1]
    alpha = tc.softmax_channels(rng.standard_normal((2, 3, 1, 1)))
    np.testing.assert_allclose(M.fuse_views(same, same, same, alpha), same, atol=1e-12)
    f = M.fuse_views(*views, alpha)
    assert np.all(f >= views.min(axis=0) - 1e-12) and np.all(f <= views.max(axis=0) + 1e-12)
    with pytest.raises(ValueError):
        M.fuse_views(views[0], views[1][:, :2], views[2], alpha)


def test_global_coordination(tiny):
    rng = np.random.default_rng(4)
    ftv = rng.standard_normal((2, 8, 12, 12))
    P = tiny.copy()
    out = M.global_coordination(ftv, P)
    assert out.shape == (2, 8, 12, 12)
    w = P.weights
    conv = lambda x, n, pad=0: conv2d_forward(x, Conv2DParams(w[f"{n}.weight"], w[f"{n}.bias"], 1, pad))
    fp = conv(tc.relu(conv(ftv, "coord.conv1", 1)), "coord.conv2", 1)
    s = tc.sigmoid(conv(tc.relu(conv(tc.global_avg_pool(fp), "coord.se1")), "coord.se2"))
    np.testing.assert_allclose(out, fp * s, rtol=1e-12)
    P.weights["coord.se2.bias"][:] = 1e3     # sigmoid saturates at 1
    np.testing.assert_allclose(M.global_coordination(ftv, P), fp, rtol=1e-12)


def test_model_forward_shapes_and_determinism(default_params):
    x = np.random.default_rng(5).random((2, 3, 64, 64)).astype(np.float32)
    a, tr = M.model_forward(x, default_params, "eval")
    b, _ = M.model_forward(x, default_params, "eval")
    assert a.shape == (2, 5, 64, 64)
    assert a.tobytes() == b.tobytes()
    al = tr.alpha.reshape(2, 3)
    assert np.all((al > 0) & (al < 1))
    np.testing.assert_allclose(al.sum(axis=1), 1, atol=1e-6)


def test_forced_alpha_selects_view(tiny):
    x = np.random.default_rng(6).random((2, 3, 16, 16))
    _, tr = M.model_forward(x, tiny, "eval", alpha=[0, 1, 0])
    np.testing.assert_allclose(tr.fused, tr.views[1], atol=1e-7)


def test_gate_is_input_dependent(default_params):
    rng = np.random.default_rng(7)
    x1 = rng.random((1, 3, 32, 32)).astype(np.float32)
    x2 = (rng.random((1, 3, 32, 32)) * 0.2).astype(np.float32)
    _, t1 = M.model_forward(x1, default_params)
    _, t2 = M.model_forward(x2, default_params)
    assert np.abs(t1.alpha - t2.alpha).sum() > 1e-3


def test_fixed_gate_mode():
    P = M.build_model(M.ModelConfig(gate="fixed"), 0)
    assert not any(k.startswith("gate.") for k in P.weights)
    x = np.random.default_rng(8).random((2, 3, 32, 32)).astype(np.float32)
    _, tr = M.model_forward(x, P, "train")
    np.testing.assert_allclose(tr.alpha, 1 / 3)


def test_backward_zero_dlogits(tiny):
    x = np.random.default_rng(9).random((2, 3, 16, 16))
    _, tr = M.model_forward(x, tiny, "train", update_stats=False)
    g = M.model_backward(tr, tiny, np.zeros((2, 4, 16, 16)))
    assert set(g) == set(tiny.weights)
    assert all(not v.any() for v in g.values())


def test_backward_requires_train_trace(tiny):
    x = np.random.default_rng(9).random((1, 3, 16, 16))
    logits, tr = M.model_forward(x, tiny, "eval")
    with pytest.raises(ValueError):
        M.model_backward(tr, tiny, np.zeros_like(logits))


def test_gate_path_carries_gradient(tiny):
    rng = np.random.default_rng(10)
    x = rng.random((2, 3, 16, 16))
    labels = rng.integers(0, 4, (2, 16, 16))
    logits, tr = M.model_forward(x, tiny, "train", update_stats=False)
    _, dl, _ = ohem_loss(logits, labels, OHEMConfig(theta=1.0, min_kept=0))
    full = M.model_backward(tr, tiny, dl)
    frozen = M.model_backward(tr, tiny, dl, gate_gradient=False)
    assert np.abs(full["gate.conv1.weight"]).sum() > 0
    assert not frozen["gate.conv1.weight"].any()
    diff = np.abs(full["backbone.stem.conv.weight"] - frozen["backbone.stem.conv.weight"]).max()
    assert diff > 1e-10
    assert np.allclose(full["classifier.weight"], frozen["classifier.weight"])


def test_fuse_alpha_gradient_is_inner_product():
    rng = np.random.default_rng(11)
    views = tuple(rng.standard_normal((2, 4, 3, 3)) for _ in range(3))
    alpha = tc.softmax_channels(rng.standard_normal((2, 3, 1, 1)))
    d = rng.standard_normal((2, 4, 3, 3))
    _, dalpha = M.fuse_views_backward(d, views, alpha)
    for n in range(2):
        for i in range(3):
            assert dalpha[n, i, 0, 0] == pytest.approx((views[i][n] * d[n]).sum(), rel=1e-12)


def test_whole_model_gradcheck():
    rep = check_model(np.random.default_rng(0))
    assert rep.passed, (rep, rep.failures[:5])


def test_train_mode_updates_running_stats_only_when_asked(tiny):
    P = tiny.copy()
    x = np.random.default_rng(12).random((2, 3, 16, 16))
    before = {k: v.copy() for k, v in P.buffers.items()}
    M.model_forward(x, P, "train", update_stats=False)
    assert all(before[k].tobytes() == P.buffers[k].tobytes() for k in before)
    M.model_forward(x, P, "train")
    assert any(before[k].tobytes() != P.buffers[k].tobytes() for k in before)
    before = {k: v.copy() for k, v in P.buffers.items()}
    M.model_forward(x, P, "eval")
    assert all(before[k].tobytes() == P.buffers[k].tobytes() for k in before)
