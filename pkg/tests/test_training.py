import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flearn.metrics import f1_at_threshold
from flearn.models import ModelConfig, build_model
from flearn.scenes import SceneConfig, downscale_config, make_scene
from flearn.tensor import Parameter, Tensor, finite_diff_check, no_grad, sigmoid
from flearn.training import (
    AdamState, TrainConfig, adam_step, bce_loss, bce_with_logits, derive_seed, init_weights,
    series_to_csv, splitmix64, train_one_trial,
)


def test_bce_at_half_is_ln2():
    for shape in [(1,), (1, 4, 4), (1, 128, 128)]:
        for t in (0.0, 1.0):
            loss = bce_loss(Tensor(np.full(shape, 0.5)), np.full(shape, t))
            assert abs(loss.item() - math.log(2)) < 1e-12
    mixed = np.random.default_rng(0).integers(0, 2, (1, 8, 8)).astype(float)
    assert abs(bce_loss(Tensor(np.full((1, 8, 8), 0.5)), mixed).item() - math.log(2)) < 1e-12
    assert abs(bce_with_logits(Tensor(np.zeros((1, 8, 8))), mixed).item() - math.log(2)) < 1e-12


def test_bce_value_matches_formula(rng):
    p = rng.uniform(0.05, 0.95, (1, 6, 6))
    t = rng.integers(0, 2, (1, 6, 6)).astype(float)
    ref = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))
    assert bce_loss(Tensor(p), t).item() == pytest.approx(ref, abs=1e-12)


def test_bce_clamps_extremes():
    t = np.array([[[1.0, 0.0]]])
    v = bce_loss(Tensor(np.array([[[0.0, 1.0]]])), t).item()
    assert np.isfinite(v) and v == pytest.approx(-math.log(1e-7), rel=1e-6)


def test_bce_grads(rng):
    t = rng.integers(0, 2, (1, 5, 5)).astype(float)
    p = Parameter(rng.uniform(0.1, 0.9, (1, 5, 5)), "p")
    assert finite_diff_check(lambda: bce_loss(p, t), p) < 1e-6
    z = Parameter(rng.standard_normal((1, 5, 5)), "z")
    assert finite_diff_check(lambda: bce_with_logits(z, t), z) < 1e-6
    # fused and composed forms agree in value and in gradient away from saturation
    assert bce_with_logits(z, t).item() == pytest.approx(bce_loss(sigmoid(z), t).item(), abs=1e-12)


def test_bce_logits_grad_survives_saturation():
    z = Parameter(np.array([[[-800.0, 800.0]]]), "z")
    bce_with_logits(z, np.array([[[1.0, 0.0]]])).backward()
    np.testing.assert_allclose(z.grad, [[[-0.5, 0.5]]])


def adam_two_step_oracle(x0, g1, g2, lr, b1=0.9, b2=0.999, eps=1e-8):
    m1, v1 = (1 - b1) * g1, (1 - b2) * g1 ** 2
    x1 = x0 - lr * (m1 / (1 - b1)) / (math.sqrt(v1 / (1 - b2)) + eps)
    m2 = b1 * m1 + (1 - b1) * g2
    v2 = b2 * v1 + (1 - b2) * g2 ** 2
    return x1, x1 - lr * (m2 / (1 - b1 ** 2)) / (math.sqrt(v2 / (1 - b2 ** 2)) + eps)


@pytest.mark.parametrize("x0,g1,g2,lr", [(1.0, 0.5, -0.25, 0.1), (-2.0, 3.0, 3.0, 0.01),
                                         (0.3, -1e-3, 2.0, 0.5)])
def test_adam_two_step_scalar(x0, g1, g2, lr):
    p = Parameter(np.array([x0]), "x")
    state = AdamState.for_params([p])
    p.grad = np.array([g1])
    adam_step([p], state, lr)
    x1, x2 = adam_two_step_oracle(x0, g1, g2, lr)
    assert abs(p.data[0] - x1) < 1e-12
    p.grad = np.array([g2])
    adam_step([p], state, lr)
    assert abs(p.data[0] - x2) < 1e-12
    assert state.t == 2


def test_adam_first_step_is_lr_sized():
    p = Parameter(np.array([0.0, 0.0]), "x")
    p.grad = np.array([123.0, -1e-4])
    adam_step([p], AdamState.for_params([p]), 0.1)
    np.testing.assert_allclose(p.data, [-0.1, 0.1], rtol=1e-3)


def test_splitmix64_reference_stream():
    # first outputs of SplitMix64 seeded with 0
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert [derive_seed(0, i) for i in range(3)] == [
        0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


@settings(max_examples=50)
@given(base=st.integers(0, 2**63), n=st.integers(2, 50))
def test_derived_seeds_distinct_and_in_range(base, n):
    seeds = [derive_seed(base, i) for i in range(n)]
    assert len(set(seeds)) == n and all(0 <= s < 2**64 for s in seeds)


def test_init_weights_fan_in_and_repeatable():
    m = build_model(ModelConfig("bconv"))
    init_weights(m, 7)
    first = [p.data.copy() for p in m.parameters()]
    init_weights(m, 7)
    assert all(np.array_equal(a, p.data) for a, p in zip(first, m.parameters()))
    for p in m.parameters():
        if p.name.endswith("weight"):
            bound = 1 / math.sqrt(np.prod(p.shape[1:]))
            assert np.all(np.abs(p.data) <= bound) and np.abs(p.data).max() > 0.9 * bound
        else:
            assert np.all(p.data == 0)
    init_weights(m, 8)
    assert not np.array_equal(first[0], m.parameters()[0].data)


def test_f1_conventions():
    t = np.array([1, 1, 0, 0])
    assert f1_at_threshold(np.array([0.9, 0.2, 0.7, 0.1]), t) == (0.5, 0.5, 0.5)
    assert f1_at_threshold(np.zeros(4), t) == (0.0, 0.0, 0.0)
    assert f1_at_threshold(np.array([0.5, 0.5, 0.0, 0.0]), t) == (1.0, 1.0, 1.0)
    assert f1_at_threshold(np.ones(4), np.zeros(4)) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        f1_at_threshold(np.ones(3), np.ones(4))


def small_scene(size=16):
    return make_scene(downscale_config(SceneConfig(), size))


def test_trial_is_deterministic_and_learns():
    scene = small_scene()
    cfg = TrainConfig(epochs=30, seed=derive_seed(0, 0))
    mcfg = ModelConfig("bconv", 4, hidden_channels=8, image_size=16)
    a = train_one_trial("bconv", scene, cfg, mcfg, snapshot_epochs=(1, 30))
    b = train_one_trial("bconv", scene, cfg, mcfg, snapshot_epochs=(1, 30))
    assert a.f1 == b.f1 and a.loss == b.loss
    assert len(a) == 30 and not a.diverged
    assert a.loss[0] == pytest.approx(math.log(2), abs=0.05)
    assert max(a.f1) > 0.5
    assert set(a.snapshots) == {1, 30}
    p, r, f = f1_at_threshold(a.snapshots[30][None], scene.target)
    assert f == a.f1[-1]


def test_reused_forward_matches_plain_loop():
    # the no-BN fast path scores with the next epoch's training forward;
    # compare against a straightforward step-then-evaluate loop
    scene = small_scene()
    mcfg = ModelConfig("flearn", 4, hidden_channels=4, image_size=16)
    fast = train_one_trial("flearn", scene, TrainConfig(epochs=6, seed=3), mcfg)

    model = build_model(mcfg)
    init_weights(model, 3)
    params = model.parameters()
    state = AdamState.for_params(params)
    x = Tensor(scene.fragments)
    for epoch in range(6):
        model.zero_grad()
        loss = bce_with_logits(model.logits(x), scene.target)
        assert loss.item() == fast.loss[epoch]
        loss.backward()
        adam_step(params, state, 0.1)
        with no_grad():
            scores = model(x).data
        assert f1_at_threshold(scores, scene.target)[2] == fast.f1[epoch]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_recorded():
    scene = small_scene()
    cfg = TrainConfig(epochs=5, learning_rate=1e300, seed=1)
    s = train_one_trial("bconv", scene, cfg, ModelConfig("bconv", 4, hidden_channels=4, image_size=16))
    assert s.diverged and 1 <= s.diverged_epoch <= 5 and len(s) == s.diverged_epoch - 1


def test_series_csv():
    scene = small_scene()
    s = train_one_trial("bconv", scene, TrainConfig(epochs=2, seed=5),
                        ModelConfig("bconv", 4, hidden_channels=4, image_size=16))
    lines = series_to_csv(s).splitlines()
    assert lines[0] == "trial_seed,model_kind,epoch,loss,precision,recall,f1"
    assert lines[1].startswith("5,bconv,1,") and len(lines) == 3


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(learning_rate=-1), dict(eval_threshold=1.0),
                                 dict(steps_per_epoch=0)])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad).validate()
