import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qgalore.model import (
    Architecture,
    Int8Linear,
    MLPRegressor,
    ModelConfig,
    ModelError,
    NonFiniteLossError,
    TinyCharLM,
    build_model,
    model_forward_backward,
)
from qgalore.quant import QuantSpec, dequantize, quantize


def collect(model, batch):
    grads = {}
    order = []

    def cb(name, g):
        grads[name] = np.array(g, np.float64)
        order.append(name)

    loss = model_forward_backward(model, batch, cb)
    return loss, grads, order


def params(model):
    """Float views of every trainable tensor (weights must be passthrough)."""
    out = {f"{n}.weight": l.W_q.payload.reshape(l.shape) for n, l in model.layers.items()}
    out.update(model.vectors())
    return out


def finite_difference(model, batch, name, eps=1e-3, n_probe=12, seed=0):
    p = params(model)[name]
    flat = p.reshape(-1)
    idx = np.random.default_rng(seed).choice(flat.size, min(n_probe, flat.size), replace=False)
    fd = []
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        up = model.loss(batch)
        flat[i] = orig - eps
        down = model.loss(batch)
        flat[i] = orig
        fd.append((up - down) / (2 * eps))
    return idx, np.array(fd)


def assert_grads_match(model, batch, names):
    _, grads, _ = collect(model, batch)
    for name in names:
        idx, fd = finite_difference(model, batch, name)
        got = grads[name].reshape(-1)[idx]
        assert np.linalg.norm(got - fd) <= 1e-3 * max(np.linalg.norm(fd), 1e-3), name


# -- Int8Linear ----------------------------------------------------------------------

def test_identity_layer_is_exact():
    x = np.random.default_rng(0).standard_normal((5, 8)).astype(np.float32)
    layer = Int8Linear(quantize(np.eye(8, dtype=np.float32), QuantSpec(8)), np.zeros(8, np.float32))
    assert np.array_equal(layer.forward(x), x)


def test_zero_input_gives_bias():
    W = quantize(np.random.default_rng(1).standard_normal((4, 6)).astype(np.float32), QuantSpec(8))
    b = np.arange(4, dtype=np.float32)
    y = Int8Linear(W, b).forward(np.zeros((3, 6), np.float32))
    assert np.array_equal(y, np.tile(b, (3, 1)))


def test_forward_matches_dense_reference_bitwise():
    rng = np.random.default_rng(2)
    layer = Int8Linear.init(7, 9, rng)
    layer.bias[:] = rng.standard_normal(7)
    x = rng.standard_normal((11, 9)).astype(np.float32)
    W = dequantize(layer.W_q)
    ref = (x.astype(np.float64) @ W.T.astype(np.float64)).astype(np.float32) + layer.bias
    assert np.array_equal(layer.forward(x), ref)


def test_backward_input_gradient_by_finite_differences():
    rng = np.random.default_rng(3)
    layer = Int8Linear.init(8, 8, rng)
    x = rng.standard_normal((8, 8))
    layer.forward(x.astype(np.float32))
    grad_in, _ = layer.backward(np.ones((8, 8), np.float32))
    W = dequantize(layer.W_q).astype(np.float64)
    eps = 1e-4
    fd = np.zeros_like(x)
    for i in range(8):
        for j in range(8):
            xp, xm = x.copy(), x.copy()
            xp[i, j] += eps
            xm[i, j] -= eps
            fd[i, j] = (np.sum(xp @ W.T) - np.sum(xm @ W.T)) / (2 * eps)
    assert np.abs(grad_in - fd).max() <= 1e-3 * np.abs(fd).max()


def test_backward_zero_and_rank_one():
    rng = np.random.default_rng(4)
    layer = Int8Linear.init(3, 5, rng)
    x = rng.standard_normal((1, 5)).astype(np.float32)
    layer.forward(x)
    gi, gw = layer.backward(np.zeros((1, 3), np.float32))
    assert not np.any(gi) and not np.any(gw)
    g = rng.standard_normal((1, 3)).astype(np.float32)
    layer.forward(x)
    _, gw = layer.backward(g)
    assert np.allclose(gw, np.outer(g[0], x[0]), rtol=1e-6, atol=1e-7)


def test_backward_requires_forward_and_releases_cache():
    layer = Int8Linear.init(3, 4, np.random.default_rng(5))
    with pytest.raises(ModelError):
        layer.backward(np.ones((2, 3), np.float32))
    layer.forward(np.ones((2, 4), np.float32))
    assert layer.cached_input is not None
    layer.backward(np.ones((2, 3), np.float32))
    assert layer.cached_input is None


def test_layer_shape_checks():
    layer = Int8Linear.init(3, 4, np.random.default_rng(6))
    with pytest.raises(ModelError):
        layer.forward(np.ones((2, 5), np.float32))
    layer.forward(np.ones((2, 4), np.float32))
    with pytest.raises(ModelError):
        layer.backward(np.ones((2, 4), np.float32))


# -- MLPRegressor -------------------------------------------------------------------------

def test_regressor_at_its_own_predictions():
    model = MLPRegressor(ModelConfig(n_features=6, n_outputs=4, hidden=(5,)))
    x = np.random.default_rng(7).standard_normal((10, 6)).astype(np.float32)
    y = model.forward(x, cache=False).astype(np.float64)
    loss, grads, _ = collect(model, (x, y))
    assert loss == 0.0
    assert all(not np.any(g) for g in grads.values())


@pytest.mark.parametrize("hidden", [(), (16,), (12, 9)])
def test_regressor_gradients_match_finite_differences(hidden):
    cfg = ModelConfig(n_features=10, n_outputs=7, hidden=hidden, init_seed=3)
    model = MLPRegressor(cfg, weight_bits=None)
    rng = np.random.default_rng(8)
    batch = (rng.standard_normal((16, 10)).astype(np.float32), rng.standard_normal((16, 7)))
    assert_grads_match(model, batch, params(model))


def test_regressor_callback_order_is_reverse_topological():
    model = MLPRegressor(ModelConfig(n_features=4, n_outputs=3, hidden=(5, 6)))
    rng = np.random.default_rng(9)
    _, _, order = collect(model, (rng.standard_normal((2, 4)).astype(np.float32), rng.standard_normal((2, 3))))
    assert order == ["fc2.weight", "fc2.bias", "fc1.weight", "fc1.bias", "fc0.weight", "fc0.bias"]


# -- TinyCharLM ------------------------------------------------------------------------------

def small_lm(**kw):
    base = dict(architecture=Architecture.TINY_CHAR_LM, vocab_size=7, embed_dim=3, context=4,
                lm_hidden=6, n_blocks=2, init_seed=1)
    base.update(kw)
    return ModelConfig(**base)


def lm_batch(cfg, n=9, seed=10):
    rng = np.random.default_rng(seed)
    return rng.integers(0, cfg.vocab_size, (n, cfg.context)), rng.integers(0, cfg.vocab_size, n)


@pytest.mark.parametrize("n_blocks", [0, 1, 3])
def test_char_lm_gradients_match_finite_differences(n_blocks):
    cfg = small_lm(n_blocks=n_blocks)
    model = TinyCharLM(cfg, weight_bits=None)
    batch = lm_batch(cfg)
    assert_grads_match(model, batch, params(model))


def test_char_lm_loss_at_init_is_log_vocab():
    cfg = ModelConfig(architecture=Architecture.TINY_CHAR_LM, vocab_size=64)
    model = TinyCharLM(cfg)
    rng = np.random.default_rng(11)
    batch = rng.integers(0, 64, (512, cfg.context)), rng.integers(0, 64, 512)
    assert model.loss(batch) == pytest.approx(math.log(64), rel=0.05)


def test_char_lm_callback_order():
    cfg = small_lm()
    _, _, order = collect(TinyCharLM(cfg), lm_batch(cfg))
    assert order == ["head.weight", "head.bias", "block1.weight", "block1.bias",
                     "block0.weight", "block0.bias", "embed"]


def test_char_lm_context_check():
    cfg = small_lm()
    with pytest.raises(ModelError):
        TinyCharLM(cfg).loss((np.zeros((2, 3), np.int64), np.zeros(2, np.int64)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 3))
def test_cross_entropy_is_non_negative(seed, n_blocks):
    cfg = small_lm(n_blocks=n_blocks, init_seed=seed % 1000)
    assert TinyCharLM(cfg).loss(lm_batch(cfg, seed=seed)) >= 0.0


def test_non_finite_loss_reports_layer_norms():
    model = MLPRegressor(ModelConfig(n_features=3, n_outputs=2))
    x = np.ones((2, 3), np.float32)
    with pytest.raises(NonFiniteLossError, match="fc0"):
        collect(model, (x, np.full((2, 2), np.nan)))


def test_config_limits():
    with pytest.raises(ModelError, match="2M"):
        ModelConfig(architecture="charlm", lm_hidden=2048)
    with pytest.raises(ModelError):
        ModelConfig(n_features=0)


def test_param_count_and_shapes():
    cfg = ModelConfig(architecture="charlm", vocab_size=46)
    assert cfg.matrix_shapes() == {"block0": (64, 512), "block1": (64, 64), "head": (46, 64)}
    model = build_model(cfg)
    total = sum(l.W_q.numel + l.bias.size for l in model.layers.values()) + model.embed.size
    assert total == cfg.param_count()
    assert all(l.W_q.spec.bits == 8 for l in model.layers.values())
