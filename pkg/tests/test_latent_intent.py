import inspect
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intentrec import latent_intent as li
from intentrec.numerics import ShapeError, Tensor, grad_check

from oracles import elbo_draws, monte_carlo_kl, quadrature_log_marginal, randomize_intent


def gauss(mean, log_var):
    return li.DiagGaussian(Tensor(np.atleast_1d(np.asarray(mean, float))), Tensor(np.atleast_1d(np.asarray(log_var, float))))


@pytest.fixture
def init_model():
    return li.init_params(li.IntentDims(), seed=0)


@pytest.fixture
def random_model():
    params = li.init_params(li.IntentDims(), seed=0)
    randomize_intent(params, seed=1, bias_scale=1.0)
    return params


def sample_xy(rng, n=32):
    return rng.normal(size=(n, 16)), rng.normal(size=(n, 8))


# ---------------------------------------------------------------------------
# init and structure
# ---------------------------------------------------------------------------

def test_init_biases_zero_and_weights_small(init_model):
    for net in (init_model.prior_net, init_model.encoder_net):
        for key, t in net.items():
            if key.startswith("b"):
                assert not t.data.any()
            else:
                assert np.abs(t.data).max() <= 1e-3
    for key, t in init_model.decoder_net.items():
        if key.startswith("b"):
            assert not t.data.any()


def test_uniform_decoder_option_keeps_every_layer_small():
    params = li.init_params(decoder_init="uniform", seed=0)
    for _, t in params.decoder_net.items():
        assert np.abs(t.data).max() <= 1e-3


def test_init_is_deterministic():
    a, b = li.init_params(seed=7), li.init_params(seed=7)
    for pa, pb in zip(a.param_sets, b.param_sets):
        for (_, ta), (_, tb) in zip(pa.items(), pb.items()):
            assert np.array_equal(ta.data, tb.data)


def test_init_rejects_nonpositive_epsilon():
    with pytest.raises(ValueError):
        li.init_params(init_epsilon=0.0)


def test_bottleneck_enforced():
    with pytest.raises(ValueError):
        li.IntentDims(d_z=8, d_y=8)


def test_clip_bounds_validation():
    with pytest.raises(ValueError):
        li.ClipBounds(4.0, -8.0)
    with pytest.raises(ValueError):
        li.ClipBounds(-math.inf, 1.0)


def test_kl_near_zero_at_init(init_model):
    x, y = sample_xy(np.random.default_rng(0), 256)
    kl = li.kl_diag_gaussian(li.encode(init_model, x, y), li.prior(init_model, x)).data
    assert kl.max() < 1e-3


def test_prior_and_decoder_near_standard_at_init(init_model):
    rng = np.random.default_rng(1)
    x, _ = sample_xy(rng, 100)
    p = li.prior(init_model, x)
    assert np.abs(p.mean.data).max() < 1e-2
    assert np.abs(p.log_var.data).max() < 0.05
    d = li.decode(init_model, rng.normal(size=(100, 4)))
    assert np.abs(d.mean.data).max() < 0.05
    assert np.abs(d.log_var.data).max() < 0.05


def test_decoder_takes_no_x():
    assert list(inspect.signature(li.decode).parameters) == ["params", "z"]


def test_networks_are_deterministic(random_model):
    x, y = sample_xy(np.random.default_rng(2))
    a, b = li.encode(random_model, x, y), li.encode(random_model, x, y)
    assert np.array_equal(a.mean.data, b.mean.data)
    assert np.array_equal(a.log_var.data, b.log_var.data)


def test_shape_errors(init_model):
    with pytest.raises(ShapeError):
        li.prior(init_model, np.ones((2, 15)))
    with pytest.raises(ShapeError):
        li.encode(init_model, np.ones((2, 16)), np.ones((2, 7)))
    with pytest.raises(ShapeError):
        li.decode(init_model, np.ones((2, 5)))


# ---------------------------------------------------------------------------
# soft clip
# ---------------------------------------------------------------------------

def test_soft_clip_zero_is_exact():
    assert li.soft_clip_values(0.0, -10.0, 10.0) == 0.0


def test_soft_clip_asymptotes():
    assert abs(li.soft_clip_values(100.0, -10.0, 10.0) - 10.0) < 1e-8
    assert abs(li.soft_clip_values(-100.0, -10.0, 10.0) + 10.0) < 1e-8


def test_soft_clip_matches_naive_formula_where_safe():
    v = np.linspace(-30, 30, 601)
    naive = v - np.log1p(np.exp(v - 4.0)) + np.log1p(np.exp(-8.0 - v))
    np.testing.assert_allclose(li.soft_clip_values(v, -8.0, 4.0), naive, rtol=1e-12, atol=1e-12)


def test_soft_clip_handles_overflow_range():
    out = li.soft_clip_values(np.array([-1e6, -800.0, 800.0, 1e6]), -8.0, 4.0)
    assert np.isfinite(out).all()


def test_soft_clip_monotone_and_inside_bounds():
    v = np.sort(np.random.default_rng(3).uniform(-20, 20, 5000))
    out = li.soft_clip_values(v, -8.0, 4.0)
    assert np.all(np.diff(out) > 0)
    assert np.all((out > -8.0) & (out < 4.0))


@settings(max_examples=50, deadline=None)
@given(st.floats(-30, 30))
def test_soft_clip_strictly_inside(v):
    out = li.soft_clip_values(v, -8.0, 4.0)
    assert -8.0 < out < 4.0


def test_soft_clip_gradient():
    from intentrec.numerics import ParameterSet

    ps = ParameterSet("v")
    ps.add("v", np.linspace(-12, 8, 21))
    bounds = li.ClipBounds()
    assert grad_check(lambda: li.soft_clip(ps["v"], bounds).sum(), ps, step=1e-6) < 1e-7


def test_log_var_inside_bounds_after_random_weights(random_model):
    x, y = sample_xy(np.random.default_rng(4), 1000)
    for g in (li.prior(random_model, x), li.encode(random_model, x, y)):
        assert np.all((g.log_var.data > -8.0) & (g.log_var.data < 4.0))


# ---------------------------------------------------------------------------
# Gaussian algebra
# ---------------------------------------------------------------------------

def test_reparameterize_examples():
    g = gauss([0.5], [0.0])
    assert li.reparameterize(g, np.array([2.0])).z.data[0] == pytest.approx(2.5)
    g = gauss([0.3, -1.0], [1.0, -2.0])
    np.testing.assert_array_equal(li.reparameterize(g, np.zeros(2)).z.data, [0.3, -1.0])


def test_reparameterize_moments():
    g = gauss([1.0, -2.0], [0.5, -1.0])
    noise = np.random.default_rng(5).standard_normal((100_000, 2))
    z = li.reparameterize(g, noise).z.data
    var = np.exp([0.5, -1.0])
    se_mean = np.sqrt(var / len(z))
    assert np.all(np.abs(z.mean(0) - [1.0, -2.0]) < 3 * se_mean)
    se_var = var * math.sqrt(2 / (len(z) - 1))
    assert np.all(np.abs(z.var(0, ddof=1) - var) < 3 * se_var)


def test_reparameterize_dim_mismatch():
    with pytest.raises(ShapeError):
        li.reparameterize(gauss([0.0, 0.0], [0.0, 0.0]), np.zeros(3))


def test_kl_closed_form_examples():
    assert li.kl_diag_gaussian(gauss([0.2, -1], [0.3, 1]), gauss([0.2, -1], [0.3, 1])).item() == 0.0
    assert li.kl_diag_gaussian(gauss(1.0, 0.0), gauss(0.0, 0.0)).item() == pytest.approx(0.5)
    expected = 0.5 * (4 - 1 - math.log(4))
    assert li.kl_diag_gaussian(gauss(0.0, math.log(4)), gauss(0.0, 0.0)).item() == pytest.approx(expected)
    assert expected == pytest.approx(0.806853, abs=1e-6)


def test_kl_dim_mismatch():
    with pytest.raises(ShapeError):
        li.kl_diag_gaussian(gauss([0.0], [0.0]), gauss([0.0, 0.0], [0.0, 0.0]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=8, max_size=8))
def test_kl_nonnegative(values):
    v = np.array(values)
    q = gauss(v[:4], v[4:])
    p = gauss(v[4:] * 0.5, -v[:4] * 0.3)
    assert li.kl_diag_gaussian(q, p).item() >= -1e-12


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(6)
    qm, qv, pm, pv = (rng.normal(0, 0.7, 8) for _ in range(4))
    closed = li.kl_diag_gaussian(gauss(qm, qv), gauss(pm, pv)).item()
    mc, se = monte_carlo_kl(qm, qv, pm, pv, 200_000, rng)
    assert abs(closed - mc) < 3 * se


def test_gaussian_log_likelihood_examples():
    g = gauss(0.0, 0.0)
    assert li.gaussian_log_likelihood(g, np.array([0.0])).item() == pytest.approx(-0.918939, abs=1e-6)
    assert li.gaussian_log_likelihood(g, np.array([1.0])).item() == pytest.approx(-1.418939, abs=1e-6)
    multi = gauss([0.1, -0.4, 2.0], [0.2, -1.0, 0.7])
    y = np.array([0.5, 0.0, 1.0])
    parts = sum(
        li.gaussian_log_likelihood(gauss(m, lv), np.array([v])).item()
        for m, lv, v in zip([0.1, -0.4, 2.0], [0.2, -1.0, 0.7], y)
    )
    assert li.gaussian_log_likelihood(multi, y).item() == pytest.approx(parts)


# ---------------------------------------------------------------------------
# ELBO
# ---------------------------------------------------------------------------

def test_elbo_kl_zero_when_encoder_equals_prior(monkeypatch, random_model):
    x, y = sample_xy(np.random.default_rng(7), 8)
    monkeypatch.setattr(li, "encode", lambda params, x_, y_: li.prior(params, x_))
    terms = li.elbo(random_model, x, y, np.random.default_rng(8).standard_normal((8, 4)))
    np.testing.assert_array_equal(terms.kl.data, 0.0)
    np.testing.assert_array_equal(terms.elbo.data, terms.recon.data)


def test_elbo_kl_small_at_init(init_model):
    x, y = sample_xy(np.random.default_rng(9), 64)
    terms = li.elbo(init_model, x, y, np.random.default_rng(10).standard_normal((64, 4)))
    assert terms.kl.data.max() < 1e-3


def test_elbo_gradients_with_frozen_noise():
    params = li.init_params(li.IntentDims(d_x=4, d_y=3, d_z=2, hidden=(5,)), seed=0)
    randomize_intent(params, seed=11)
    rng = np.random.default_rng(12)
    x, y, noise = rng.normal(size=(3, 4)), rng.normal(size=(3, 3)), rng.normal(size=(3, 2))
    loss = lambda: -li.elbo(params, x, y, noise).elbo.mean()  # noqa: E731
    assert grad_check(loss, params.param_sets, step=1e-6) < 1e-4


def test_elbo_below_quadrature_marginal():
    params = li.init_params(li.IntentDims(d_z=1), seed=0)
    randomize_intent(params, seed=1)
    rng = np.random.default_rng(13)
    for _ in range(10):
        x, y = rng.normal(size=16), rng.normal(size=8)
        draws = elbo_draws(params, x, y, 64, rng)
        se = draws.std(ddof=1) / math.sqrt(len(draws))
        assert draws.mean() <= quadrature_log_marginal(params, x, y) + 3 * se


def test_sample_prior_mean_mode(random_model):
    x, _ = sample_xy(np.random.default_rng(14), 4)
    s = li.sample_prior(random_model, x, np.ones((4, 4)), use_mean=True)
    np.testing.assert_array_equal(s.z.data, li.prior(random_model, x).mean.data)
    assert s.source == "prior"
