import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unimmad.core import GradTape, Tensor, check_gradients, sg
from unimmad.errors import ConfigError, ShapeError, ValidationError
from unimmad.objectives import (
    anneal_factor,
    anomaly_map,
    anomaly_maps,
    coefficient_of_variation,
    expert_load,
    loss_dec,
    loss_moe,
    modulation,
    total_loss,
)
from unimmad.scoring import fuse_and_localize, image_score, top_k_count


# anomaly maps


def test_anomaly_map_identical_opposite_orthogonal():
    u = np.random.default_rng(0).standard_normal((2, 5, 4, 4))
    assert np.allclose(anomaly_map(u, u).data, 0, atol=1e-12)
    assert np.allclose(anomaly_map(u, -u).data, 2, atol=1e-12)
    a = np.zeros((1, 2, 1, 1))
    b = np.zeros((1, 2, 1, 1))
    a[0, 0], b[0, 1] = 1, 1
    assert anomaly_map(a, b).data[0, 0, 0] == 1


def test_anomaly_map_zero_vectors_are_finite():
    m = anomaly_map(np.zeros((1, 3, 2, 2)), np.ones((1, 3, 2, 2))).data
    assert np.all(np.isfinite(m)) and np.allclose(m, 0.5)
    assert not anomaly_map(np.zeros((1, 3, 2, 2)), np.zeros((1, 3, 2, 2))).data.any()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), zero_frac=st.floats(0, 1))
def test_anomaly_map_exactly_zero_for_identical_inputs(seed, zero_frac):
    rng = np.random.default_rng(seed)
    u = np.maximum(rng.standard_normal((2, 4, 5, 5)), 0) * (rng.random((2, 1, 5, 5)) >= zero_frac)
    assert not anomaly_map(u, u.copy()).data.any()


def test_anomaly_map_matches_cosine_distance():
    rng = np.random.default_rng(8)
    u, p = rng.standard_normal((2, 6, 3, 3)), rng.standard_normal((2, 6, 3, 3))
    cos = (u * p).sum(1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(p, axis=1))
    assert np.allclose(anomaly_map(u, p).data, 1 - cos, atol=1e-12)


def test_anomaly_map_scale_invariant_and_bounded():
    rng = np.random.default_rng(1)
    u, p = rng.standard_normal((2, 4, 3, 3)), rng.standard_normal((2, 4, 3, 3))
    a = anomaly_map(u, p).data
    assert np.allclose(a, anomaly_map(u, 3.5 * p).data)
    assert a.min() >= -1e-12 and a.max() <= 2 + 1e-12


def test_anomaly_maps_keys_and_shape_errors():
    u = {"rgb": [np.ones((1, 2, 4, 4)), np.ones((1, 3, 2, 2))]}
    maps = anomaly_maps(u, u)
    assert set(maps) == {("rgb", 0), ("rgb", 1)}
    with pytest.raises(ShapeError):
        anomaly_maps(u, {"rgb": [np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3))]})
    with pytest.raises(ShapeError):
        anomaly_maps(u, {"depth": u["rgb"]})


# decompression loss


def test_loss_dec_zero_maps():
    maps = {("a", 0): Tensor(np.zeros((1, 4, 4)), requires_grad=True)}
    with GradTape() as tape:
        loss = loss_dec(maps, 2.0)
    assert float(loss.data) == 0
    assert not tape.backward(loss)[maps[("a", 0)]].any()


def test_loss_dec_constant_map_value_and_gradient():
    c, gamma = 0.7, 2.0
    shapes = [(1, 4, 4), (1, 2, 2), (1, 3, 5)]
    maps = {("m", l): Tensor(np.full(s, c), requires_grad=True) for l, s in enumerate(shapes)}
    with GradTape() as tape:
        loss = loss_dec(maps, gamma)
    assert float(loss.data) == pytest.approx(c ** (gamma + 1), rel=1e-12)
    grads = tape.backward(loss)
    for (m, l), a in maps.items():
        h, w = shapes[l][1:]
        assert np.allclose(grads[a], c ** gamma / (h * w * 1 * len(maps)))


def test_loss_dec_gradient_with_frozen_modulation():
    rng = np.random.default_rng(2)
    a = Tensor(rng.uniform(0, 2, (2, 3, 3)))
    w = modulation({("m", 0): a}, 2.0)
    errs = check_gradients(lambda: loss_dec({("m", 0): a}, 2.0, weights=w), [a], eps=1e-6)
    assert errs[0] <= 1e-4


@settings(max_examples=30, deadline=None)
@given(c=st.floats(0.01, 2.0), t=st.floats(0.01, 1.0), gamma=st.sampled_from([0.0, 1.0, 2.0, 3.0]))
def test_loss_dec_scaling_on_constant_maps(c, t, gamma):
    base = float(loss_dec({("m", 0): np.full((1, 3, 3), c)}, gamma).data)
    scaled = float(loss_dec({("m", 0): np.full((1, 3, 3), t * c)}, gamma).data)
    assert scaled == pytest.approx(base * t ** (gamma + 1), rel=1e-9)


def test_loss_dec_rejects_negative_gamma():
    with pytest.raises(ConfigError):
        loss_dec({("m", 0): np.zeros((1, 2, 2))}, -1.0)


def test_stop_gradient_blocks_modulation_path():
    x = Tensor(np.array([0.5, 1.5]), requires_grad=True)
    with GradTape() as tape:
        y = (sg(x) * sg(x)) * x
        loss = y.sum()
    assert np.allclose(tape.backward(loss)[x], x.data ** 2)


# load balancing


def test_cv_uniform_and_one_hot():
    assert float(coefficient_of_variation(np.full(8, 0.125)).data) == 0
    assert float(coefficient_of_variation(np.array([1.0, 0, 0, 0])).data) == pytest.approx(math.sqrt(3))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.floats(1e-3, 1e3))
def test_cv_scale_invariant(seed, k):
    load = np.random.default_rng(seed).random(16) + 0.01
    assert float(coefficient_of_variation(load * k).data) == pytest.approx(float(coefficient_of_variation(load).data))


def test_anneal_factor_values():
    assert anneal_factor(0, 300) == 1.0
    assert anneal_factor(150, 300) == 0.25
    assert anneal_factor(299, 300) == (1 / 300) ** 2
    with pytest.raises(ConfigError):
        anneal_factor(0, 0)
    with pytest.raises(ConfigError):
        anneal_factor(300, 300)


def test_loss_moe_uniform_load_is_zero():
    assert float(loss_moe([np.zeros((4, 32))], 0, 10).data) == 0


def test_loss_moe_last_epoch_gradient_is_scaled():
    rng = np.random.default_rng(3)
    logits = Tensor(rng.standard_normal((5, 8)), requires_grad=True)
    grads = []
    for e in (0, 9):
        with GradTape() as tape:
            loss = loss_moe([logits], e, 10)
        grads.append(tape.backward(loss)[logits])
    assert np.allclose(grads[1], grads[0] * (1 / 10) ** 2, rtol=1e-12, atol=0)


def test_loss_moe_gradient():
    logits = Tensor(np.random.default_rng(4).standard_normal((6, 8)))
    errs = check_gradients(lambda: loss_moe([logits], 2, 5), [logits])
    assert errs[0] <= 1e-4


def test_expert_load_is_batch_mean_softmax():
    lg = np.random.default_rng(5).standard_normal((3, 4))
    e = np.exp(lg - lg.max(axis=1, keepdims=True))
    assert np.allclose(expert_load(lg).data, (e / e.sum(axis=1, keepdims=True)).mean(axis=0))


def test_total_loss_is_exact_sum():
    rng = np.random.default_rng(6)
    maps = {("m", l): Tensor(rng.uniform(0, 2, (2, 4, 4))) for l in range(3)}
    logits = [rng.standard_normal((2, 8)) for _ in range(3)]
    lb = total_loss(maps, logits, 3, 10, 2.0)
    ld = float(loss_dec(maps, 2.0).data)
    lm = float(loss_moe(logits, 3, 10).data)
    assert lb.l_dec == ld and lb.l_moe == lm
    assert lb.total == float(np.asarray(ld, np.float64) + np.asarray(lm, np.float64))
    assert lb.l_dec >= 0 and lb.l_moe >= 0
    assert 0 <= lb.l_dec <= 2 ** 3


def test_total_loss_zero_case():
    maps = {("m", 0): np.zeros((1, 2, 2))}
    assert total_loss(maps, [np.zeros((1, 4))], 0, 2, 2.0).total == 0


# localization and image score


def test_fuse_zero_and_constants():
    maps = {("rgb", l): np.zeros((1, 16 >> l, 16 >> l)) for l in range(3)}
    assert not fuse_and_localize(maps, 64, 64).any()
    const = {("rgb", l): np.full((1, 16 >> l, 16 >> l), 0.3) for l in range(3)}
    assert np.allclose(fuse_and_localize(const, 64, 64), 0.3, atol=1e-12)
    two = dict(const)
    two.update({("depth", l): np.full((1, 16 >> l, 16 >> l), 0.4) for l in range(3)})
    assert np.allclose(fuse_and_localize(two, 64, 64), 0.5, atol=1e-12)


def test_fuse_modality_permutation_invariant():
    rng = np.random.default_rng(7)
    a = {(m, l): rng.random((2, 8 >> l, 8 >> l)) for m in ("x", "y") for l in range(3)}
    b = {(("y" if m == "x" else "x"), l): v for (m, l), v in a.items()}
    assert np.allclose(fuse_and_localize(a, 32, 32), fuse_and_localize(b, 32, 32), atol=1e-12)


def test_fuse_missing_entry():
    maps = {("rgb", 0): np.zeros((1, 4, 4)), ("rgb", 1): np.zeros((1, 2, 2)), ("depth", 0): np.zeros((1, 4, 4))}
    with pytest.raises(ValidationError):
        fuse_and_localize(maps, 16, 16)


def test_image_score_examples():
    assert top_k_count(256, 256) == 65
    assert image_score(np.zeros((64, 64))) == 0
    m = np.zeros((1, 1, 64, 64))
    m[0, 0, 5, 7] = 10
    assert image_score(m) == 2.5
    assert image_score(np.full((3, 3), 4.0)) == 4.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), bump=st.floats(0, 5))
def test_image_score_monotone(seed, bump):
    rng = np.random.default_rng(seed)
    m = rng.random((32, 32))
    i, j = rng.integers(0, 32, 2)
    raised = m.copy()
    raised[i, j] += bump
    assert image_score(raised) >= image_score(m)
