import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unimmad.cmoe import (
    ActivationHistogram,
    CMoELevel,
    DecodeTrace,
    ExpertBank,
    compose_kernel,
    count_parameters,
    decision_from_logits,
    grouped_dynamic_filter,
    leader_kernel,
    precompose_cache,
    route,
    top_k,
)
from unimmad.config import Config
from unimmad.core import GradTape, check_gradients, conv2d, softmax, tsum
from unimmad.errors import ShapeError, StateError
from unimmad.modelcheck import micro_config
from unimmad.params import ParamStore


def make_bank(n_exp=4, n_leaders=6, o=5, i=3, scales=(1, 3), seed=0, dtype=np.float64):
    return ExpertBank(ParamStore(dtype), "b", n_exp, n_leaders, o, i, scales, 5, np.random.default_rng(seed))


def make_level(cfg=None, level=0, seed=0):
    cfg = cfg or micro_config()
    store = ParamStore(cfg.dtype)
    return CMoELevel(cfg, level, store, np.random.default_rng(seed)), store, cfg


def level_inputs(cfg, level=0, n=2, seed=1):
    rng = np.random.default_rng(seed)
    hw = cfg.image_size // 2 ** (level + 2)
    general = rng.standard_normal((n, cfg.channels[level], hw, hw)).astype(cfg.dtype)
    prior = np.abs(rng.standard_normal((n, cfg.prior_channels[level], hw, hw))).astype(cfg.dtype)
    return general, prior


# routing


def test_equal_logits_tie_break():
    d = decision_from_logits(np.zeros((1, 8)), 2)
    assert d.indices.tolist() == [[0, 1]]
    assert np.allclose(d.scores.data, 0.5)


def test_unique_max_is_selected_with_larger_score():
    logits = np.array([[0.1, 0.3, 2.0, 0.2]])
    d = decision_from_logits(logits, 2)
    assert 2 in d.indices[0]
    assert d.scores.data[0, list(d.indices[0]).index(2)] > 0.5


def test_top_k_matches_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        logits = rng.standard_normal(32)
        k = int(rng.integers(1, 5))
        oracle = set(sorted(range(32), key=lambda j: (-logits[j], j))[:k])
        assert set(top_k(logits, k).tolist()) == oracle


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-50, 50))
def test_routing_shift_invariance(seed, shift):
    logits = np.random.default_rng(seed).standard_normal((3, 16))
    a, b = decision_from_logits(logits, 2), decision_from_logits(logits + shift, 2)
    assert np.array_equal(a.indices, b.indices)
    assert np.allclose(a.scores.data, b.scores.data, atol=1e-9)


def test_route_scores_are_softmax_of_selected():
    lvl, _, cfg = make_level()
    g, p = level_inputs(cfg)
    d = route(g, p, lvl.router, 2)
    sel = np.take_along_axis(d.logits.data, d.indices, axis=1)
    assert np.allclose(d.scores.data, softmax(sel, axis=1).data)
    assert all(len(set(row)) == 2 for row in d.indices.tolist())
    assert np.allclose(d.scores.data.sum(axis=1), 1)


def test_route_spatial_mismatch():
    lvl, _, cfg = make_level()
    g, p = level_inputs(cfg)
    with pytest.raises(ShapeError):
        route(g, p[:, :, :-1], lvl.router, 2)


# composition


def test_compose_one_hot_selects_base_expert():
    bank = make_bank(dtype=np.float32)
    s = np.zeros(bank.S[3].shape, np.float32)
    s[2, 1, :] = 40.0
    bank.S[3].data = s
    assert np.allclose(compose_kernel(bank, 2, 3).data, bank.W[3].data[1], atol=1e-6)


def test_compose_uniform_is_mean():
    bank = make_bank()
    bank.S[1].data = np.zeros_like(bank.S[1].data)
    assert np.allclose(compose_kernel(bank, 0, 1).data, bank.W[1].data.mean(axis=0))


def test_compose_matches_triple_loop_bitwise():
    bank = make_bank(dtype=np.float32, seed=3)
    for leader in range(bank.n_leaders):
        w = bank.W[3].data
        sp = softmax(bank.S[3].data[leader], axis=0).data
        oracle = np.zeros(w.shape[1:], np.float32)
        for o in range(w.shape[1]):
            for i in range(w.shape[0]):
                oracle[o] = oracle[o] + sp[i, o] * w[i, o]
        assert np.array_equal(compose_kernel(bank, leader, 3).data, oracle)


def test_compose_out_of_range():
    bank = make_bank()
    with pytest.raises(IndexError):
        compose_kernel(bank, bank.n_leaders, 1)
    with pytest.raises(IndexError):
        compose_kernel(bank, 0, 7)


def test_selection_weights_normalised():
    bank = make_bank()
    for s in bank.scales:
        sp = softmax(bank.S[s].data, axis=1).data
        assert np.allclose(sp.sum(axis=1), 1, atol=1e-6)


# grouped filtering


def test_grouped_identical_kernels_identical_outputs():
    rng = np.random.default_rng(0)
    v = rng.standard_normal((1, 4, 6, 6)).astype(np.float32)
    k = rng.standard_normal((3, 4, 3, 3)).astype(np.float32)
    a, b, c = grouped_dynamic_filter(v, [k, k, k])
    assert np.array_equal(a.data, b.data) and np.array_equal(b.data, c.data)


def test_grouped_zero_value():
    k = np.ones((2, 3, 3, 3), np.float32)
    outs = grouped_dynamic_filter(np.zeros((1, 3, 5, 5), np.float32), [k, k])
    assert all(not o.data.any() for o in outs)


def test_grouped_matches_serial():
    rng = np.random.default_rng(1)
    for _ in range(100):
        c = int(rng.integers(2, 33))
        h, w = (int(v) for v in rng.integers(4, 33, size=2))
        k_route = int(rng.integers(1, 4))
        ks = int(rng.choice([1, 3, 5]))
        v = rng.standard_normal((1, c, h, w)).astype(np.float32)
        kernels = [rng.standard_normal((4, c, ks, ks)).astype(np.float32) for _ in range(k_route + 1)]
        for g, k in zip(grouped_dynamic_filter(v, kernels), kernels):
            assert np.max(np.abs(g.data - conv2d(v, k).data)) <= 1e-6


def test_grouped_channel_mismatch():
    with pytest.raises(ShapeError):
        grouped_dynamic_filter(np.zeros((1, 3, 4, 4)), [np.zeros((2, 4, 1, 1))])


# decode


def test_decode_zero_general_gives_zero():
    lvl, _, cfg = make_level()
    g, p = level_inputs(cfg)
    out, _ = lvl(np.zeros_like(g), p)
    assert not out.data.any()


def test_decode_deterministic_and_shaped():
    lvl, _, cfg = make_level()
    g, p = level_inputs(cfg)
    a, _ = lvl(g, p)
    b, _ = lvl(g, p)
    assert a.shape == p.shape
    assert np.array_equal(a.data, b.data)


def test_sparse_activation_trace():
    lvl, _, cfg = make_level(Config(), level=1)
    g, p = level_inputs(Config(), level=1, n=3)
    tr = DecodeTrace()
    lvl(g, p, tr)
    assert [len(e) for e in tr.experts] == [cfg.k_route + 1] * 3
    assert set(tr.groups_per_conv) == {cfg.k_route + 1}


def test_decode_gradients_match_finite_differences():
    lvl, store, cfg = make_level(seed=2)
    g, p = level_inputs(cfg, seed=3)
    w = np.random.default_rng(4).standard_normal(p.shape)

    def loss():
        out, _ = lvl(g, p)
        return tsum(out * w)

    errs = check_gradients(loss, list(store.values()), eps=1e-6, mode="directional", seed=5)
    assert max(errs.values()) <= 1e-4


def test_unrouted_leaders_get_zero_gradient():
    lvl, store, cfg = make_level(seed=6)
    g, p = level_inputs(cfg, seed=7)
    with GradTape() as tape:
        out, d = lvl(g, p)
        loss = tsum(out)
    grads = tape.backward(loss)
    used = set(d.indices.reshape(-1).tolist())
    for s in lvl.bank.scales:
        gs = grads[lvl.bank.S[s]]
        for leader in range(cfg.n_leaders):
            if leader not in used:
                assert not gs[leader].any()
            else:
                assert gs[leader].any()


# cache


def test_cache_transparency_and_size():
    lvl, _, cfg = make_level(Config(), level=0, seed=8)
    bank = lvl.bank
    rng = np.random.default_rng(9)
    bank.eval()
    outs = []
    for _ in range(20):
        g = rng.standard_normal((1, 16, 16, 16)).astype(np.float32)
        p = np.abs(rng.standard_normal((1, 16, 16, 16))).astype(np.float32)
        outs.append((g, p, lvl(g, p)[0].data))
    precompose_cache(bank)
    assert len(bank.cache) == cfg.n_leaders * 3
    for (leader, s), k in bank.cache.items():
        assert np.array_equal(k, compose_kernel(bank, leader, s).data)
    for g, p, ref in outs:
        assert np.max(np.abs(lvl(g, p)[0].data - ref)) <= 1e-6


def test_cache_requires_inference_mode():
    bank = make_bank()
    with pytest.raises(StateError):
        precompose_cache(bank)


def test_cache_guards_parameter_mutation():
    bank = make_bank()
    bank.eval()
    precompose_cache(bank)
    with pytest.raises(ValueError):
        bank.W[1].data[0, 0, 0, 0, 0] = 1.0
    with pytest.raises(StateError):
        bank.assign("W", 1, np.zeros_like(bank.W[1].data))
    bank.W[1].data = bank.W[1].data + 1.0  # rebinding bypasses the read-only flag
    with pytest.raises(StateError):
        leader_kernel(bank, 0, 1)
    bank.invalidate_cache()
    bank.assign("W", 1, np.zeros_like(bank.W[1].data))
    assert not bank.W[1].data.any()


# parameter counts


def test_count_parameters_default():
    c = count_parameters(8, 32, 64, 64, (3,))
    assert c["moe_in_moe"] == 294_912 + 16_384 == 311_296
    assert c["plain_moe"] == 1_179_648
    assert c["ratio"] == 311_296 / 1_179_648
    assert round(c["ratio"], 4) == 0.2639


def test_count_parameters_degenerate_and_monotone():
    o = i = 16
    c = count_parameters(8, 8, o, i, (3,))
    assert c["ratio"] == pytest.approx(1 + 8 * o / (o * i * 9))
    ratios = [count_parameters(8, n, 64, 64, (3,))["ratio"] for n in (8, 16, 32, 64, 128)]
    assert all(a > b for a, b in zip(ratios, ratios[1:]))


def test_count_parameters_matches_bank_shapes():
    store = ParamStore()
    ExpertBank(store, "b", 8, 32, 64, 64, (1, 3, 5), 64, np.random.default_rng(0))
    c = count_parameters(8, 32, 64, 64, (1, 3, 5))
    assert store.count("b.experts") - sum(t.data.size for k, t in store.items() if k.endswith(".fixed")) == c["moe_in_moe"]


def test_activation_histogram_csv(tmp_path):
    h = ActivationHistogram()
    h.add("a", np.array([[0, 1], [1, 3]]))
    h.add("b", np.array([2]))
    h.write_csv(tmp_path / "h.csv", 4)
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "task_id,leader_id,activation_count"
    assert "a,1,2" in lines and "a,2,0" in lines and "b,2,1" in lines
    assert len(lines) == 1 + 8
