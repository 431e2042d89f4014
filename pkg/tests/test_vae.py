import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentmal.dataio import Dataset
from latentmal.errors import PreconditionError, ShapeError
from latentmal.numcore import RngState
from latentmal.vae import (
    AdamState,
    DenseLayer,
    TrainConfig,
    VaeModel,
    backward,
    decode,
    encode,
    extract_latent,
    forward,
    init_vae,
    reparameterize,
    train_vae,
    vae_loss,
)


def zero_model(d, hidden, latent):
    m = init_vae(d, hidden, latent, seed=0)
    for p in m.parameters():
        p[...] = 0.0
    return m


def relu(a):
    return max(a, 0.0)


def sig(a):
    return 1.0 / (1.0 + math.exp(-a))


# -- construction ------------------------------------------------------------

def test_init_shapes_for_small_model():
    m = init_vae(8, [4], 2, seed=1)
    assert [l.weights.shape for l in m.layers()] == [(8, 4), (4, 2), (4, 2), (2, 4), (4, 8)]
    assert [l.activation for l in m.layers()] == ["relu", "linear", "linear", "relu", "sigmoid"]
    assert m.input_dim == 8 and m.latent_dim == 2 and m.hidden_dims == [4]
    assert all((l.bias == 0).all() for l in m.layers())


def test_init_glorot_bound_and_determinism():
    m = init_vae(8, [4], 2, seed=1)
    bound = math.sqrt(6.0 / 12.0)
    assert bound == pytest.approx(0.7071, abs=1e-4)
    assert np.abs(m.encoder_hidden[0].weights).max() <= bound
    # the weights actually spread over the interval
    assert np.abs(m.encoder_hidden[0].weights).max() > 0.5 * bound
    again = init_vae(8, [4], 2, seed=1)
    for a, b in zip(m.parameters(), again.parameters()):
        assert a.tobytes() == b.tobytes()
    other = init_vae(8, [4], 2, seed=2)
    assert not np.array_equal(m.parameters()[0], other.parameters()[0])


def test_init_rejects_zero_dims():
    with pytest.raises(PreconditionError):
        init_vae(0, [4], 2)
    with pytest.raises(PreconditionError):
        init_vae(3, [4], 0)


def test_model_invariants_enforced():
    m = init_vae(3, [2], 1)
    with pytest.raises(ShapeError):
        VaeModel(m.encoder_hidden, m.mean_head, DenseLayer(np.zeros((2, 2)), np.zeros(2)),
                 m.decoder_hidden, m.output_layer)
    with pytest.raises(ValueError):
        DenseLayer(np.zeros((2, 2)), np.zeros(2), "tanh")


# -- forward -----------------------------------------------------------------

def test_zero_model_encode_and_decode():
    m = zero_model(5, [3], 2)
    mu, lv = encode(m, np.full((1, 5), 0.3))
    assert mu.tolist() == [[0.0, 0.0]] and lv.tolist() == [[0.0, 0.0]]
    out = decode(m, np.random.default_rng(0).normal(size=(5, 2)))
    assert out.shape == (5, 5)
    assert (out == 0.5).all()
    mu, lv = encode(m, np.zeros((3, 5)))
    assert mu.shape == (3, 2) and lv.shape == (3, 2)


def test_encode_matches_hand_oracle():
    m = init_vae(2, [2], 1)
    m.encoder_hidden[0].weights[...] = [[1.0, -2.0], [0.5, 3.0]]
    m.encoder_hidden[0].bias[...] = [0.1, -0.2]
    m.mean_head.weights[...] = [[2.0], [-1.0]]
    m.mean_head.bias[...] = [0.3]
    m.logvar_head.weights[...] = [[0.5], [0.25]]
    m.logvar_head.bias[...] = [-0.1]
    x = [0.4, 0.7]
    h0 = relu(1.0 * x[0] + 0.5 * x[1] + 0.1)
    h1 = relu(-2.0 * x[0] + 3.0 * x[1] - 0.2)
    mu, lv = encode(m, np.array([x]))
    assert abs(mu[0, 0] - (2.0 * h0 - 1.0 * h1 + 0.3)) < 1e-12
    assert abs(lv[0, 0] - (0.5 * h0 + 0.25 * h1 - 0.1)) < 1e-12


def test_decode_matches_hand_oracle():
    m = init_vae(2, [2], 1)
    m.decoder_hidden[0].weights[...] = [[1.5, -0.5]]
    m.decoder_hidden[0].bias[...] = [0.2, 0.1]
    m.output_layer.weights[...] = [[1.0, -1.0], [2.0, 0.5]]
    m.output_layer.bias[...] = [0.0, -0.3]
    for z in (-1.0, 0.7):
        h0, h1 = relu(1.5 * z + 0.2), relu(-0.5 * z + 0.1)
        out = decode(m, np.array([[z]]))
        assert abs(out[0, 0] - sig(h0 + 2.0 * h1)) < 1e-12
        assert abs(out[0, 1] - sig(-h0 + 0.5 * h1 - 0.3)) < 1e-12


def test_shape_errors():
    m = init_vae(4, [3], 2)
    with pytest.raises(ShapeError):
        encode(m, np.zeros((2, 5)))
    with pytest.raises(ShapeError):
        decode(m, np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        reparameterize(np.zeros((2, 2)), np.zeros((2, 3)), RngState(1))
    with pytest.raises(ShapeError):
        vae_loss(np.zeros((2, 4)), np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_decode_output_strictly_inside_unit_interval(seed):
    m = init_vae(6, [5], 3, seed=seed)
    z = np.random.default_rng(seed).normal(size=(8, 3))
    out = decode(m, z)
    assert (out > 0).all() and (out < 1).all()


# -- reparameterization ------------------------------------------------------

def test_reparameterize_unit_variance_and_vanishing_noise():
    mu = np.array([[1.0, -2.0]])
    eps = np.array([[0.3, -0.7]])
    assert reparameterize(mu, np.zeros((1, 2)), eps=eps).tolist() == (mu + eps).tolist()
    z = reparameterize(mu, np.full((1, 2), -60.0), RngState(3))
    assert np.abs(z - mu).max() < 1e-9


def test_reparameterize_monte_carlo_std():
    n = 10_000
    z = reparameterize(np.zeros((n, 1)), np.full((n, 1), math.log(4.0)), RngState(42))
    assert abs(z.std() - 2.0) <= 0.05


def test_reparameterize_needs_noise_source():
    with pytest.raises(PreconditionError):
        reparameterize(np.zeros((1, 1)), np.zeros((1, 1)))


# -- loss --------------------------------------------------------------------

def test_loss_trivial_cases():
    x = np.random.default_rng(0).uniform(size=(3, 4))
    loss = vae_loss(x, x, np.zeros((3, 2)), np.zeros((3, 2)))
    assert loss.total == 0.0 and loss.kl == 0.0
    assert vae_loss(np.zeros((1, 1)), np.zeros((1, 1)), [[1.0]], [[0.0]]).kl == 0.5


def test_loss_reconstruction_sums_features_and_averages_rows():
    x = np.array([[0.0, 1.0], [0.5, 0.5]])
    xh = np.array([[0.5, 0.5], [0.5, 0.0]])
    loss = vae_loss(x, xh, np.zeros((2, 1)), np.zeros((2, 1)))
    assert loss.reconstruction == pytest.approx((0.25 + 0.25 + 0.0 + 0.25) / 2, abs=1e-15)


def test_kl_matches_monte_carlo_oracle():
    rng = np.random.default_rng(7)
    mu = rng.normal(size=(4, 3))
    lv = rng.uniform(-1.5, 1.0, size=(4, 3))
    kl = vae_loss(np.zeros((4, 1)), np.zeros((4, 1)), mu, lv).kl
    # log q - log p averaged over draws from q, summed over dims, averaged over rows
    sd = np.exp(0.5 * lv)
    draws = mu + sd * rng.normal(size=(400_000, 4, 3))
    logq = -0.5 * ((draws - mu) / sd) ** 2 - np.log(sd)
    logp = -0.5 * draws ** 2
    mc = float((logq - logp).mean(axis=0).sum() / 4)
    assert abs(kl - mc) / kl < 0.02


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 5))
def test_kl_nonnegative_and_additive(seed, b, k):
    rng = np.random.default_rng(seed)
    mu = rng.normal(size=(b, k)) * rng.uniform(0, 3)
    lv = rng.normal(size=(b, k)) * rng.uniform(0, 5)
    x = rng.uniform(size=(b, 3))
    xh = rng.uniform(size=(b, 3))
    loss = vae_loss(x, xh, mu, lv)
    assert loss.kl >= 0.0
    assert abs(loss.total - (loss.reconstruction + loss.kl)) <= 1e-9


def test_kl_zero_only_at_prior():
    assert vae_loss([[0.0]], [[0.0]], [[0.0]], [[0.0]]).kl == 0.0
    assert vae_loss([[0.0]], [[0.0]], [[1e-3]], [[0.0]]).kl > 0.0
    assert vae_loss([[0.0]], [[0.0]], [[0.0]], [[1e-3]]).kl > 0.0


# -- gradients ---------------------------------------------------------------

def numeric_gradients(model, x, eps, h=1e-5):
    out = []
    for p in model.parameters():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            keep = p[i]
            p[i] = keep + h
            up = forward(model, x, eps=eps)[0].total
            p[i] = keep - h
            down = forward(model, x, eps=eps)[0].total
            p[i] = keep
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def max_relative_error(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        worst = max(worst, float(err.max()))
    return worst


def nonzero_biases(model, rng):
    # nonzero biases keep relu inputs away from the kink at zero
    for layer in model.layers():
        layer.bias[...] = rng.uniform(-0.3, 0.3, size=layer.bias.shape)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    m = init_vae(6, [5], 3, seed=5)
    nonzero_biases(m, rng)
    x = rng.uniform(size=(4, 6))
    eps = rng.normal(size=(4, 3))
    _, cache = forward(m, x, eps=eps)
    analytic = backward(m, cache)
    assert all(np.isfinite(g).all() for g in analytic)
    assert [g.shape for g in analytic] == [p.shape for p in m.parameters()]
    assert max_relative_error(analytic, numeric_gradients(m, x, eps)) < 1e-4


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_gradient_property_on_random_tiny_models(seed):
    rng = np.random.default_rng(seed)
    m = init_vae(4, [3, 3], 2, seed=seed)
    nonzero_biases(m, rng)
    x = rng.uniform(size=(3, 4))
    eps = rng.normal(size=(3, 2))
    _, cache = forward(m, x, eps=eps)
    assert max_relative_error(backward(m, cache), numeric_gradients(m, x, eps)) < 1e-4


def test_output_bias_gradient_hand_chain_rule():
    m = zero_model(4, [3], 2)
    x = np.zeros((5, 4))
    _, cache = forward(m, x, eps=np.random.default_rng(1).normal(size=(5, 2)))
    grads = backward(m, cache)
    # d/db mean_rows sum_j (0 - s)^2 at s = sigmoid(0): 2 * 0.5 * 0.5 * 0.5
    np.testing.assert_allclose(grads[-1], np.full(4, 0.25), rtol=0, atol=1e-15)


# -- training ----------------------------------------------------------------

def test_single_epoch_full_batch_is_one_update():
    x = np.random.default_rng(2).uniform(size=(10, 4))
    m = init_vae(4, [3], 2, seed=1)
    cfg = TrainConfig(epochs=1, batch_size=10, seed=9)
    trained, hist = train_vae(m, Dataset(x, np.zeros(10, int)), cfg)
    assert len(hist) == 1
    # a single Adam step moves every parameter with nonzero gradient by ~lr
    steps = [np.abs(a - b) for a, b in zip(trained.parameters(), m.parameters())]
    moved = np.concatenate([s.ravel() for s in steps])
    moved = moved[moved > 0]
    np.testing.assert_allclose(moved, 1e-3, rtol=1e-3)


def test_training_is_deterministic_and_leaves_input_model_untouched():
    x = np.random.default_rng(3).uniform(size=(50, 6))
    m = init_vae(6, [5], 3, seed=1)
    before = [p.copy() for p in m.parameters()]
    cfg = TrainConfig(epochs=3, batch_size=16, seed=4)
    a, ha = train_vae(m, x, cfg)
    b, hb = train_vae(m, x, cfg)
    assert ha == hb
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.tobytes() == q.tobytes()
    for p, q in zip(m.parameters(), before):
        assert p.tobytes() == q.tobytes()
    _, hc = train_vae(m, x, TrainConfig(epochs=3, batch_size=16, seed=5))
    assert hc != ha


def test_training_reduces_loss():
    rng = np.random.default_rng(4)
    base = rng.uniform(size=(2, 12))
    x = np.clip(base[rng.integers(0, 2, 300)] + rng.normal(0, 0.05, (300, 12)), 0, 1)
    _, hist = train_vae(init_vae(12, [16], 4, seed=2), x,
                        TrainConfig(epochs=20, batch_size=32))
    assert hist[-1].total < 0.5 * hist[0].total
    for h in hist:
        assert h.kl >= 0 and abs(h.total - h.reconstruction - h.kl) < 1e-9


def test_training_rejects_unscaled_or_empty_data():
    m = init_vae(3, [2], 1)
    with pytest.raises(PreconditionError):
        train_vae(m, np.array([[0.5, 1.5, 0.0]]))
    with pytest.raises(PreconditionError):
        train_vae(m, np.zeros((0, 3)))
    with pytest.raises(PreconditionError):
        TrainConfig(epochs=0)


def test_adam_state_mirrors_parameters():
    m = init_vae(5, [4], 2)
    s = AdamState.for_model(m)
    assert s.step == 0
    assert [a.shape for a in s.first] == [p.shape for p in m.parameters()]


# -- latent extraction -------------------------------------------------------

def test_extract_latent_defaults_and_determinism():
    rng = np.random.default_rng(5)
    ds = Dataset(rng.uniform(size=(20, 40)), rng.integers(0, 2, 20), "d")
    m = init_vae(40, seed=3)
    a = extract_latent(m, ds)
    b = extract_latent(m, ds)
    assert a.feature_dim == 32 and a.n_samples == 20
    assert a.features.tobytes() == b.features.tobytes()
    np.testing.assert_array_equal(a.labels, ds.labels)
    np.testing.assert_array_equal(a.features, encode(m, ds.features)[0])
    with pytest.raises(ShapeError):
        extract_latent(m, Dataset(np.zeros((2, 39)), [0, 1]))
