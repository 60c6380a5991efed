import numpy as np
import pytest

from flearn import gradcheck
from flearn.models import (
    KINDS, BatchNorm2d, Conv2d, FLearnBlock, FLearnLayer, Fusion, ModelConfig, build_model,
    canonical_kind, flearn_layer, fuse,
)
from flearn.tensor import Parameter, ShapeError, Tensor, finite_diff_check
from flearn.training import init_weights

from conftest import weighted_sum


def conv(cin, cout, k):
    return cout * cin * k * k + cout


def stack(cin, h):
    return conv(cin, h, 1) + conv(h, h, 3) + conv(h, h, 1)


def expected_count(kind, k, h):
    cls = conv(h, 1, 1)
    return {
        "bconv": stack(k, h) + cls,
        "flearn": 2 * stack(k, h) + cls,
        "conv_cas_v1": stack(k, h) + stack(h, h) + cls,
        "conv_cas_v2": conv(k, h, 3) + 2 * stack(h, h) + conv(h, h, 3) + cls,
        "conv_par_v1": 2 * stack(k, h) + cls,
        "conv_par_v2": conv(k, h, 3) + 2 * stack(h, h) + conv(h, h, 3) + cls,
    }[kind]


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("k", [4, 8])
def test_param_counts(kind, k):
    m = build_model(ModelConfig(kind=kind, in_channels=k))
    assert m.param_count() == expected_count(kind, k, 64)


def test_bconv_closed_form_k4_k8():
    # (K*64+64) + (64*64*9+64) + (64*64+64) + (64+1)
    assert build_model(ModelConfig("bconv", 4)).param_count() == 41473
    assert build_model(ModelConfig("bconv", 8)).param_count() == 41729
    assert build_model(ModelConfig("flearn", 8)).param_count() == 2 * 41664 + 65


def test_v2_adds_pre_and_post_convs():
    k = 4
    # pre/post 3x3 convs, plus every stack fed by the widened input grows its first 1x1
    for base, fed in (("conv_cas", 1), ("conv_par", 2)):
        v1 = build_model(ModelConfig(f"{base}_v1", k)).param_count()
        v2 = build_model(ModelConfig(f"{base}_v2", k)).param_count()
        assert v2 - v1 == conv(k, 64, 3) + conv(64, 64, 3) + fed * (64 - k) * 64


@pytest.mark.parametrize("kind", KINDS)
def test_forward_shape_and_range(kind):
    m = build_model(ModelConfig(kind, 4, hidden_channels=8, image_size=16))
    init_weights(m, 0)
    y = m(Tensor(np.random.default_rng(0).random((4, 16, 16))))
    assert y.shape == (1, 16, 16)
    assert np.all((y.data >= 0) & (y.data <= 1))


def test_identifiers_unique_and_stable():
    for kind in KINDS:
        names = [p.name for p in build_model(ModelConfig(kind)).parameters()]
        assert len(names) == len(set(names))
        assert names == [p.name for p in build_model(ModelConfig(kind)).parameters()]
    flearn = [p.name for p in build_model(ModelConfig("flearn")).parameters()]
    assert "spectral.real.c2.conv.weight" in flearn and "spectral.imag.c2.conv.weight" in flearn


def test_input_shape_checked():
    m = build_model(ModelConfig("bconv", 4, hidden_channels=4, image_size=8))
    with pytest.raises(ShapeError):
        m(Tensor(np.zeros((3, 8, 8))))
    with pytest.raises(ShapeError):
        FLearnLayer("f", 2, 2)(Tensor(np.zeros((2, 6, 6))))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(kind="resnet")
    with pytest.raises(ValueError):
        ModelConfig(image_size=100)
    with pytest.raises(ValueError):
        ModelConfig(par_merge="max")
    assert canonical_kind("Conv-Cas v2".replace(" ", "")) == "conv_cas_v2"
    assert canonical_kind("F-Learn") == "flearn"
    assert canonical_kind("par_v1") == "conv_par_v1"


def test_checkpoint_roundtrip_with_bn(tmp_path):
    cfg = ModelConfig("flearn", 2, hidden_channels=4, image_size=8, use_norm=True, use_activation=True)
    m = build_model(cfg)
    init_weights(m, 3)
    x = Tensor(np.random.default_rng(0).random((2, 8, 8)))
    m(x)  # moves BN running stats
    m.save(tmp_path / "m.ckpt")
    m2 = build_model(cfg)
    m2.load(tmp_path / "m.ckpt")
    for (na, a), (nb, b) in zip(m.state(), m2.state()):
        assert na == nb and np.array_equal(a, b)
    m.eval(), m2.eval()
    assert np.array_equal(m(x).data, m2(x).data)


def test_summary_lists_layers():
    text = build_model(ModelConfig("conv_par_v2")).summary()
    assert "pre.conv" in text and "total params" in text


# --- per-layer-type gradient checks (16x16) ------------------------------


def _layer_grad_error(module, x_shape, forward, seed=0, floor=1e-8):
    r = np.random.default_rng(seed)
    for p in module.parameters():
        p.data[...] = r.standard_normal(p.shape) * 0.3
    x = Parameter(r.standard_normal(x_shape), "x")
    fixed = int(r.integers(1 << 30))
    loss = lambda: weighted_sum(forward(x), fixed)  # noqa: E731
    worst = finite_diff_check(loss, x, indices=r.choice(x.data.size, 8, replace=False), floor=floor)
    for p in module.parameters():
        idx = r.choice(p.data.size, min(6, p.data.size), replace=False)
        worst = max(worst, finite_diff_check(loss, p, indices=idx, floor=floor))
    return worst


def test_layer_grads_conv_and_bn():
    c = Conv2d("c", 3, 2, 3)
    assert _layer_grad_error(c, (3, 16, 16), c) < 1e-4
    bn = BatchNorm2d("bn", 3)
    assert _layer_grad_error(bn, (3, 16, 16), bn) < 1e-4


def test_layer_grads_flearn_layer():
    layer = FLearnLayer("f", 2, 3, act=False, norm=False)
    assert _layer_grad_error(layer, (2, 16, 16), lambda x: flearn_layer(x, layer)) < 1e-4


def test_layer_grads_flearn_layer_with_bn():
    # Batch norm makes the loss exactly invariant to the conv bias in front of
    # it (and to some input directions), so those true derivatives are 0 and
    # central differences return ~1e-11 rounding noise.  A 1e-6 floor keeps the
    # ratio meaningful; the max |gradient| here is ~0.1.
    layer = FLearnLayer("f", 2, 3, act=False, norm=True)
    assert _layer_grad_error(layer, (2, 16, 16), lambda x: flearn_layer(x, layer), floor=1e-6) < 1e-4


def test_layer_grads_fusion_and_block():
    fusion = Fusion("fu", 2, norm=True)
    other = Tensor(np.random.default_rng(9).standard_normal((2, 16, 16)))
    assert _layer_grad_error(fusion, (2, 16, 16), lambda x: fuse(x, other, fusion)) < 1e-4
    # seed 1 puts a fusion ReLU input 4e-6 from its kink, closer than the
    # 1e-5 step; seed 2 keeps every pre-activation clear of it
    block = FLearnBlock("blk", 2, norm=False)
    assert _layer_grad_error(block, (2, 16, 16), block, seed=2) < 1e-4


@pytest.mark.parametrize("kind", KINDS)
def test_model_gradcheck_16(kind):
    results = gradcheck.check_model(kind, size=16, samples=4)
    assert all(r.ok for r in results), gradcheck.format_table(kind, results)


def test_gradcheck_refuses_large():
    with pytest.raises(ValueError):
        gradcheck.check_model("bconv", size=32)


def test_fusion_identity_block():
    # f_hat = 0 and weight [I | 0] without batch norm reduce the fusion to relu(f)
    c = 3
    fusion = Fusion("fu", c, norm=False)
    fusion.cbr.conv.weight.data[...] = 0
    fusion.cbr.conv.weight.data[:, :c, 0, 0] = np.eye(c)
    f = Tensor(np.random.default_rng(0).standard_normal((c, 8, 8)))
    out = fuse(f, Tensor(np.zeros((c, 8, 8))), fusion)
    assert out.shape == f.shape
    np.testing.assert_array_equal(out.data, np.maximum(f.data, 0))


def test_fusion_gradient_reaches_both_inputs(rng):
    fusion = Fusion("fu", 2, norm=True)
    for p in fusion.parameters():
        p.data[...] = rng.standard_normal(p.shape)
    f = Parameter(rng.standard_normal((2, 8, 8)), "f")
    f_hat = Parameter(rng.standard_normal((2, 8, 8)), "f_hat")
    weighted_sum(fuse(f, f_hat, fusion), 0).backward()
    assert np.any(f.grad != 0) and np.any(f_hat.grad != 0)


def test_flearn_layer_preserves_channels_by_default():
    layer = FLearnLayer("f", 3)
    assert layer(Tensor(np.random.default_rng(0).random((3, 8, 8)))).shape == (3, 8, 8)


@pytest.mark.parametrize("kind", KINDS)
def test_every_parameter_gets_gradient(kind):
    from flearn.training import bce_with_logits

    r = np.random.default_rng(4)
    m = build_model(ModelConfig(kind, 4, hidden_channels=6, image_size=8))
    init_weights(m, 1)
    x = Tensor(r.random((4, 8, 8)))
    bce_with_logits(m.logits(x), (r.random((1, 8, 8)) > 0.5).astype(float)).backward()
    dead = [p.name for p in m.parameters() if not np.any(p.grad != 0)]
    assert dead == []


@pytest.mark.parametrize("kind", KINDS)
def test_output_strictly_inside_unit_interval(kind):
    m = build_model(ModelConfig(kind, 4, hidden_channels=8, image_size=16))
    init_weights(m, 2)
    y = m(Tensor(np.random.default_rng(1).random((4, 16, 16)))).data
    assert np.all((y > 0) & (y < 1))
