import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from dpadaln import autodiff as ad
from dpadaln.autodiff import GradientVector
from dpadaln.model import (OPERATORS, BoundConfig, DiffusionTransformer, ModelConfig, ParamPartition,
                           adaln_block, block_forward, bound_grad, bound_op, encode_checkpoint, load_checkpoint, modulation,
                           inner_network, partition_gradient, project_condition, save_checkpoint)

OPS = sorted(OPERATORS)


def small_inputs(cfg, n, seed):
    r = np.random.default_rng(seed)
    L, K = cfg.seq_len, cfg.channels
    return {"tokens": r.normal(size=(n, L, K + 1)), "feat": r.normal(size=(n, 1, cfg.n_features)),
            "target": r.normal(size=(n, L, K)), "weight": np.full((n, L, K), 1.0 / (L * K))}


# ----------------------------------------------------------- projection


def test_project_condition_examples():
    assert project_condition([0.0, 0.0], 1.0).tolist() == [0.0, 0.0]
    np.testing.assert_allclose(project_condition([3.0, 4.0], 1.0), [0.6, 0.8], rtol=1e-15)
    assert project_condition([0.3, 0.4], 1.0).tolist() == [0.3, 0.4]


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=6), st.floats(1e-3, 1e3))
def test_projection_stays_in_ball(c, cmax):
    out = project_condition(c, cmax)
    assert np.linalg.norm(out) <= cmax * (1 + 1e-12)
    if np.linalg.norm(c) <= cmax:
        assert out.tolist() == list(c)


# ------------------------------------------------------------ operators


def test_bound_op_examples():
    assert bound_op(0.0, 1.0, "tanh") == 0.0
    assert bound_op(2.0, 1.0, "hard_clamp") == 1.0
    oracle = float(mpmath.tanh(mpmath.mpf(1)))
    assert abs(bound_op(1.0, 1.0, "tanh") - oracle) < 1e-15
    assert abs(oracle - 0.7615941559557649) < 1e-15


@pytest.mark.parametrize("kind", OPS)
@given(x=st.floats(-1e9, 1e9), M=st.floats(1e-3, 1e3))
def test_bound_op_range(kind, x, M):
    assert abs(bound_op(x, M, kind, 0.1 * M)) <= M


@pytest.mark.parametrize("kind", OPS)
def test_bound_op_monotone(kind):
    x = np.linspace(-10, 10, 20001)
    for M in (0.3, 1.0, 4.0):
        y = bound_op(x, M, kind, 0.1 * M)
        assert np.all(np.diff(y) >= 0)


@pytest.mark.parametrize("kind", ["tanh", "soft_clamp_band"])
def test_one_lipschitz_on_grid(kind):
    x = np.linspace(-6, 6, 120001)
    for M in (0.5, 1.0, 3.0):
        y = bound_op(x, M, kind, 0.1 * M)
        assert np.all(np.abs(np.diff(y)) <= np.diff(x) * (1 + 1e-12))


def test_soft_band_shape():
    M, eps = 2.0, 0.2
    x = np.array([0.0, 1.7, 1.8, 1.9, 2.2, 50.0])
    y = bound_op(x, M, "soft_clamp_band", eps)
    assert y[0] == 0.0 and y[1] == 1.7 and y[2] == 1.8
    assert 1.8 < y[3] < 2.0
    assert y[4] == 2.0 and y[5] == 2.0
    np.testing.assert_allclose(bound_op(-x, M, "soft_clamp_band", eps), -y)


def test_soft_band_is_c1_at_the_edges():
    M, eps = 1.0, 0.1
    for edge, slope in ((M - eps, 1.0), (M + eps, 0.0)):
        h = 1e-7
        left = (bound_op(edge, M, "soft_clamp_band", eps) - bound_op(edge - h, M, "soft_clamp_band", eps)) / h
        right = (bound_op(edge + h, M, "soft_clamp_band", eps) - bound_op(edge, M, "soft_clamp_band", eps)) / h
        assert abs(left - slope) < 1e-5 and abs(right - slope) < 1e-5


@pytest.mark.parametrize("kind", OPS)
def test_bound_derivative_matches_difference_quotient(kind):
    x = np.linspace(-3, 3, 601) + 1e-3
    M = 1.2
    d = bound_grad(x, M, kind, 0.12)
    if kind == "clamp_ste":
        assert np.all(d == 1.0)
        return
    h = 1e-6
    num = (bound_op(x + h, M, kind, 0.12) - bound_op(x - h, M, kind, 0.12)) / (2 * h)
    away = np.min(np.abs(np.abs(x)[:, None] - np.array([M, M - 0.12, M + 0.12])), axis=1) > 1e-4
    np.testing.assert_allclose(d[away], num[away], atol=1e-6)


def test_clamp_ste_forward_is_hard_clamp():
    x = np.random.default_rng(0).normal(size=10000) * 5
    assert np.array_equal(bound_op(x, 1.5, "clamp_ste"), bound_op(x, 1.5, "hard_clamp"))


def test_infinite_limit_is_identity():
    x = np.array([-1e9, 0.5, 3.0])
    for kind in OPS:
        assert np.array_equal(bound_op(x, math.inf, kind), x)


def test_bound_config_validation():
    with pytest.raises(ValueError):
        BoundConfig(c_max=0.0)
    with pytest.raises(ValueError):
        BoundConfig(operator="sigmoid")
    with pytest.raises(ValueError):
        BoundConfig(1, 1, 1, 1, operator="soft_clamp_band", band_eps=1.0)
    b = BoundConfig(5, 2, 0.5, 0.5)
    assert b.band(2.0) == pytest.approx(0.2)
    assert b.scaled(0.5).c_max == 2.5


# ------------------------------------------------------------ modulation


def test_modulation_examples():
    W, b = np.zeros((2, 6)), np.zeros(6)
    m = modulation(np.zeros(2), W, b, BoundConfig(1, 2, 1, 1))
    assert not np.any(m.gamma) and not np.any(m.beta) and not np.any(m.alpha)

    b = np.array([10.0, 0, 0, 0, 0, 0])
    m = modulation(np.zeros(2), W, b, BoundConfig(1, 2, 1, 1, "tanh"))
    oracle = float(2 * mpmath.tanh(mpmath.mpf(5)))
    assert abs(m.gamma[0] - oracle) < 1e-15
    assert abs(m.gamma[0] - 1.9998184) < 1e-7

    b = np.array([0.3, -0.5, 0.1, 0.05, 0.2, -0.7])
    m = modulation(np.zeros(2), W, b, BoundConfig(1, 1, 1, 1, "soft_clamp_band", band_eps=0.1))
    assert np.concatenate([m.gamma, m.beta, m.alpha]).tolist() == b.tolist()


def test_modulation_dimension_mismatch():
    with pytest.raises(ad.ShapeError):
        modulation(np.zeros(3), np.zeros((2, 6)), np.zeros(6), None)


def test_modulation_limits_respected():
    r = np.random.default_rng(3)
    bounds = BoundConfig(1, 0.7, 0.3, 0.2, "hard_clamp")
    m = modulation(r.normal(size=(50, 4)), r.normal(size=(4, 9)) * 10, r.normal(size=9), bounds)
    assert np.abs(m.gamma).max() <= 0.7 and np.abs(m.beta).max() <= 0.3 and np.abs(m.alpha).max() <= 0.2


# ----------------------------------------------------------------- block


def _block_params(d, k, r, alpha_bias=0.0):
    p = {"mod.W": r.normal(size=(k, 3 * d)) * 0.3, "mod.b": np.zeros((1, 3 * d))}
    p["mod.b"][0, 2 * d:] = alpha_bias
    for n in ("Wq", "Wk", "Wv", "Wo"):
        p["attn." + n] = r.normal(size=(d, d)) / math.sqrt(d)
    p["mlp.W1"], p["mlp.b1"] = r.normal(size=(d, 2 * d)) / math.sqrt(d), np.zeros((1, 2 * d))
    p["mlp.W2"], p["mlp.b2"] = r.normal(size=(2 * d, d)) / math.sqrt(2 * d), np.zeros((1, d))
    return p


def test_block_alpha_zero_is_identity():
    r = np.random.default_rng(0)
    d, k = 8, 3
    p = _block_params(d, k, r)
    p["mod.W"][:, 2 * d:] = 0.0
    x = r.normal(size=(5, d))
    assert np.array_equal(adaln_block(x, r.normal(size=k), p, BoundConfig(), heads=2), x)


def test_block_with_identity_stub():
    r = np.random.default_rng(1)
    d, k = 6, 2
    W = np.zeros((k, 3 * d))
    b = np.concatenate([np.ones(d), np.zeros(d), np.ones(d)])[None]
    x = r.normal(size=(4, d))
    y = adaln_block(x, np.zeros(k), {"mod.W": W, "mod.b": b}, None, F=lambda v: v)
    ln = (x - x.mean(1, keepdims=True)) / np.sqrt(x.var(1, keepdims=True) + ad.LN_EPS)
    np.testing.assert_allclose(y, x + ln, rtol=1e-13, atol=1e-14)


def test_block_gradient_matches_finite_diff():
    r = np.random.default_rng(2)
    d, k = 8, 3
    params = _block_params(d, k, r, alpha_bias=0.5)
    bounds = BoundConfig(2.0, 1.5, 1.0, 1.0, "tanh")

    def apply(p, i):
        c = ad.project_ball(i["c"], bounds.c_max)
        y, _ = block_forward(p, "", i["x"], c, d, bounds, lambda v: inner_network(p, "", v, 2))
        return {"loss": (y * y).sum()}

    g = ad.Graph(apply, params)
    inputs = {"x": r.normal(size=(1, 5, d)), "c": r.normal(size=(1, 1, k))}
    gb = ad.backward(ad.forward(g, inputs))
    fd = ad.finite_diff(g, inputs, epsilon=1e-5)
    for name in params:
        err = np.linalg.norm(gb[name] - fd[name]) / max(np.linalg.norm(fd[name]), 1e-300)
        assert err <= 1e-4, (name, err)


# ----------------------------------------------------------------- model


def test_model_zero_init_ignores_inner_weights():
    cfg = ModelConfig.desk()
    m = DiffusionTransformer.create(cfg, BoundConfig(), 3)
    inputs = small_inputs(cfg, 2, 0)
    base = m.evaluate(inputs)["eps_hat"]
    changed = dict(m.params)
    r = np.random.default_rng(9)
    for name in ("block0.mlp.W1", "block1.attn.Wq", "block0.mlp.b2"):
        changed[name] = m.params[name] + r.normal(size=m.params[name].shape)
    assert np.array_equal(m.evaluate(inputs, changed)["eps_hat"], base)


def test_model_gradient_matches_finite_diff():
    cfg = ModelConfig(depth=1, hidden=8, heads=2, seq_len=6, channels=2, cond_dim=4, t_embed_dim=4)
    m = DiffusionTransformer.create(cfg, BoundConfig(), 0)
    r = np.random.default_rng(5)
    for k, v in m.params.items():
        m.params[k] = v + 0.1 * r.normal(size=v.shape)
    g = m.graph()
    inputs = small_inputs(cfg, 1, 1)
    gb = ad.backward(ad.forward(g, inputs))
    fd = ad.finite_diff(g, inputs, epsilon=1e-5, batched=True)
    for k in gb:
        err = np.linalg.norm(gb[k] - fd[k]) / max(np.linalg.norm(fd[k]), 1e-300)
        assert err <= 1e-4, (k, err)


def test_model_bounds_hold_on_modulations():
    cfg = ModelConfig.desk()
    bounds = BoundConfig(1.0, 0.5, 0.2, 0.1, "hard_clamp")
    m = DiffusionTransformer.create(cfg, bounds, 0)
    r = np.random.default_rng(0)
    for k in m.params:
        if ".mod." in k or k.startswith("cond."):
            m.params[k] = m.params[k] + 5 * r.normal(size=m.params[k].shape)
    out = m.evaluate(small_inputs(cfg, 4, 2))
    assert np.linalg.norm(out["c_hat"], axis=-1).max() <= 1.0 + 1e-12
    for i in range(cfg.depth):
        assert np.abs(out[f"block{i}.gamma"]).max() <= 0.5
        assert np.abs(out[f"block{i}.beta"]).max() <= 0.2
        assert np.abs(out[f"block{i}.alpha"]).max() <= 0.1


def test_infinite_bounds_match_unbounded_model():
    cfg = ModelConfig.desk()
    a = DiffusionTransformer.create(cfg, None, 4)
    b = DiffusionTransformer.create(cfg, BoundConfig.unbounded(), 4)
    inputs = small_inputs(cfg, 3, 0)
    assert np.array_equal(a.evaluate(inputs)["loss"], b.evaluate(inputs)["loss"])


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden=30, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(depth=0)


# ------------------------------------------------------------- partition


def test_partition_covers_every_parameter():
    m = DiffusionTransformer.create(ModelConfig.desk(), BoundConfig(), 0)
    part = m.partition
    assert part.cond_ids | part.other_ids == set(m.params)
    assert not part.cond_ids & part.other_ids
    assert {"cond.W", "cond.b", "block0.mod.W", "block1.mod.b"} <= part.cond_ids
    assert "block0.mlp.W1" in part.other_ids


def test_partition_gradient_examples():
    names = {"cond.W": (2, 2), "block0.mod.b": (1, 3), "in.W": (3, 2)}
    part = ParamPartition.from_names(names)
    zero = GradientVector({k: np.zeros(s) for k, s in names.items()})
    _, _, (t, c, o) = partition_gradient(zero, part)
    assert t == c == o == 0.0
    only_cond = GradientVector({k: (np.ones(s) if k != "in.W" else np.zeros(s)) for k, s in names.items()})
    _, _, (t, c, o) = partition_gradient(only_cond, part)
    assert o == 0.0 and c == t


@given(st.integers(0, 10_000))
def test_partition_pythagorean(seed):
    r = np.random.default_rng(seed)
    names = {"cond.W": (3, 2), "block0.mod.W": (2, 6), "in.W": (4, 2), "out.b": (1, 3)}
    g = GradientVector({k: r.normal(size=s) * 10 ** r.uniform(-3, 3) for k, s in names.items()})
    _, _, (t, c, o) = partition_gradient(g, ParamPartition.from_names(names))
    assert abs(t * t - (c * c + o * o)) <= 1e-12 * t * t


def test_partition_unknown_identifier_fails():
    part = ParamPartition.from_names(["cond.W"])
    with pytest.raises(KeyError):
        partition_gradient(GradientVector({"cond.W": np.ones(1), "x": np.ones(1)}), part)


# ------------------------------------------------------------ checkpoint


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg = ModelConfig.desk()
    m = DiffusionTransformer.create(cfg, BoundConfig(operator="soft_clamp_band"), 7)
    ema = {k: v * 0.5 for k, v in m.params.items()}
    path = tmp_path / "ck.bin"
    save_checkpoint(str(path), m.params, cfg, m.bounds, {"note": 1}, ema)
    back = load_checkpoint(str(path))
    assert back["config"] == cfg and back["bounds"] == m.bounds and back["extra"] == {"note": 1}
    for k in m.params:
        assert back["params"][k].tobytes() == m.params[k].tobytes()
        assert back["ema"][k].tobytes() == ema[k].tobytes()
    assert encode_checkpoint(back["params"], cfg, m.bounds, {"note": 1}, back["ema"]) == path.read_bytes()


def test_checkpoint_unbounded_and_bad_file(tmp_path):
    cfg = ModelConfig.desk()
    save_checkpoint(str(tmp_path / "a.bin"), {"w": np.ones(2)}, cfg, None)
    assert load_checkpoint(str(tmp_path / "a.bin"))["bounds"] is None
    (tmp_path / "b.bin").write_bytes(b"NOPE 1 2\n{}\n")
    with pytest.raises(ValueError):
        load_checkpoint(str(tmp_path / "b.bin"))
