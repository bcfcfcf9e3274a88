import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bvseg.model import (
    INIT_LOG_VARIANCE,
    GaussianField,
    Hyperparams,
    SceneSpec,
    init_state,
    make_rng,
    sample_gaussian_field,
    sample_sar_dense,
    scene_labels,
    state_from_bytes,
    state_to_bytes,
    synthesize,
)
from oracles import dense_D, random_state


def test_default_hyperparameters():
    h = Hyperparams()
    assert (h.phi_rho, h.phi_upsilon, h.phi_omega) == (2.0, 2.0, 2.0)
    assert (h.alpha_pi, h.beta_pi, h.mu0, h.sigma0) == (2.0, 2.0, 0.0, 1.0)
    assert (h.gamma_rho, h.gamma_upsilon, h.gamma_omega) == (1e-6, 1e-8, 1e-4)
    assert h.lam == 100.0


@pytest.mark.parametrize("kw", [
    {"K": 0}, {"K": 1.5}, {"sigma0": 0.0}, {"phi_rho": -1.0}, {"gamma_omega": 0.0},
    {"alpha_pi": -2.0}, {"lam": -0.1}, {"mu0": math.inf}, {"beta_pi": math.nan},
])
def test_hyperparameter_constraints(kw):
    with pytest.raises(ValueError):
        Hyperparams(**kw)


def test_lambda_zero_allowed():
    assert Hyperparams(lam=0.0).lam == 0.0


def test_init_constant_image():
    st = init_state(np.full((4, 4), 5.0), Hyperparams(), seed=0)
    np.testing.assert_array_equal(st.q_m.mean, 5.0)
    np.testing.assert_array_equal(st.q_x.mean, 0.0)
    for f in (st.q_x, st.q_m, st.q_z):
        np.testing.assert_array_equal(f.log_var, INIT_LOG_VARIANCE)
    np.testing.assert_allclose(st.q_x.var, 1e-2, rtol=1e-15)
    np.testing.assert_array_equal(st.q_z.mean, 0.0)


def test_init_gamma_and_beta_at_priors():
    h = Hyperparams(K=3)
    st = init_state(np.random.default_rng(0).normal(size=(5, 6)), h)
    np.testing.assert_allclose(st.q_rho.mean, 5e-7, rtol=1e-15)
    assert st.q_omega.shape.shape == (3, 5, 6)
    np.testing.assert_array_equal(st.q_upsilon.shape, h.gamma_upsilon)
    np.testing.assert_array_equal(st.q_upsilon.rate, h.phi_upsilon)
    np.testing.assert_array_equal(st.q_pi.alpha, 2.0)
    np.testing.assert_array_equal(st.q_pi.beta, 2.0)
    st.validate()


def test_init_deterministic():
    y = np.random.default_rng(3).normal(size=(6, 6))
    a = state_to_bytes(init_state(y, Hyperparams(), 7))
    b = state_to_bytes(init_state(y, Hyperparams(), 7))
    assert a == b


@pytest.mark.parametrize("bad", [np.array([[1.0, np.nan]]), np.zeros(4)])
def test_init_rejects_bad_image(bad):
    with pytest.raises(ValueError):
        init_state(bad, Hyperparams())


def test_sample_with_zero_noise_is_mean():
    f = GaussianField(np.arange(6.0).reshape(1, 2, 3), np.zeros((1, 2, 3)))
    np.testing.assert_array_equal(sample_gaussian_field(f, eps=np.zeros((1, 2, 3))), f.mean)


def test_sample_collapses_as_variance_vanishes():
    f = GaussianField(np.ones((1, 2, 2)), np.full((1, 2, 2), -60.0))
    s = sample_gaussian_field(f, make_rng(0, 1))
    np.testing.assert_allclose(s, 1.0, atol=1e-12)


def test_sample_moments_monte_carlo():
    n = 10 ** 5
    f = GaussianField(np.full((n, 1, 1), 2.0), np.full((n, 1, 1), math.log(4.0)))
    s = sample_gaussian_field(f, make_rng(11, 1)).ravel()
    assert abs(s.mean() - 2.0) < 0.02
    assert abs(s.var() - 4.0) < 0.1


def test_sample_channel_independence():
    n = 10 ** 5
    f = GaussianField(np.zeros((3, n, 1)), np.zeros((3, n, 1)))
    s = sample_gaussian_field(f, make_rng(5, 1))[:, :, 0]
    assert s.shape == (3, n)
    se = 1 / math.sqrt(n)
    for i in range(3):
        for j in range(i + 1, 3):
            assert abs(np.mean(s[i] * s[j])) < 3 * se


def test_rng_streams_are_independent_and_reproducible():
    a = make_rng(1, 2, 3).standard_normal(5)
    np.testing.assert_array_equal(a, make_rng(1, 2, 3).standard_normal(5))
    assert not np.array_equal(a, make_rng(1, 2, 4).standard_normal(5))
    assert not np.array_equal(a, make_rng(1, 3, 3).standard_normal(5))


def test_synthesize_noise_and_bias_free():
    spec = SceneSpec(K=3, noise_std=0.0, bias_amplitude=0.0)
    y, labels, basis, contour = synthesize(spec, 0)
    levels = np.asarray(spec.levels)[labels]
    np.testing.assert_allclose(basis, levels.mean(), rtol=0, atol=0)
    np.testing.assert_allclose(y, contour + levels.mean(), rtol=0, atol=1e-15)
    assert abs(contour.mean()) < 1e-15


def test_synthesize_disk_area():
    spec = SceneSpec(K=2)
    labels = scene_labels(spec)
    radius = spec.disk_radius * 32
    assert abs(int((labels == 1).sum()) - math.pi * radius ** 2) <= 4


def test_synthesize_deterministic_and_seeded():
    a = synthesize(SceneSpec(), 3)
    b = synthesize(SceneSpec(), 3)
    c = synthesize(SceneSpec(), 4)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)
    assert not np.array_equal(a[0], c[0])


def test_synthesize_decomposition_identity():
    y, labels, basis, contour = synthesize(SceneSpec(noise_std=0.0), 0)
    np.testing.assert_allclose(y, basis + contour, atol=1e-15)
    assert set(np.unique(labels)) == {0, 1}


@pytest.mark.parametrize("kw", [{"K": 3, "levels": (0.0, 1.0)}, {"noise_std": -1.0},
                                {"disk_radius": 0.0}, {"height": 1}])
def test_scene_spec_validation(kw):
    with pytest.raises(ValueError):
        SceneSpec(**kw)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 7), st.integers(1, 7), st.integers(0, 2 ** 32))
def test_state_round_trip_bit_exact(K, h, w, seed):
    rng = np.random.default_rng(seed)
    state = random_state(rng, K, h, w)
    back = state_from_bytes(state_to_bytes(state))
    assert state_to_bytes(back) == state_to_bytes(state)
    np.testing.assert_array_equal(back.q_z.mean, state.q_z.mean)
    np.testing.assert_array_equal(back.q_pi.beta, state.q_pi.beta)


def test_state_file_rejects_corruption():
    data = state_to_bytes(random_state(np.random.default_rng(0), 2, 3, 3))
    with pytest.raises(ValueError):
        state_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(ValueError):
        state_from_bytes(data[:-8])
    with pytest.raises(ValueError):
        state_from_bytes(data + b"\0")


def test_state_file_header_layout():
    state = random_state(np.random.default_rng(0), 2, 3, 4)
    data = state_to_bytes(state)
    assert data[:4] == b"BSS1"
    w, h, k, n = np.frombuffer(data[4:20], dtype="<u4")
    assert (w, h, k, n) == (4, 3, 2, 14)


def test_state_symbols_one_to_one():
    state = random_state(np.random.default_rng(0), 2, 3, 3)
    names = [f for f in ("q_x", "q_m", "q_z", "q_rho", "q_upsilon", "q_omega", "q_pi")]
    assert [getattr(state, n) is not None for n in names] == [True] * 7
    assert state.K == 2 and state.grid_shape == (3, 3)


def test_dense_sar_sampler_covariance():
    h, w = 3, 3
    rng = np.random.default_rng(0)
    weights = rng.uniform(0.5, 2.0, (h, w))
    draws = sample_sar_dense(weights, make_rng(0, 9), samples=200_000).reshape(200_000, -1)
    D = dense_D(h, w)
    cov = np.linalg.inv(D.T @ np.diag(weights.ravel()) @ D)
    emp = draws.T @ draws / draws.shape[0]
    # sampling error of a covariance entry is about sqrt(2/n) * scale
    assert np.max(np.abs(emp - cov)) < 5 * math.sqrt(2 / 200_000) * np.max(np.diag(cov))


def test_dense_sar_sampler_limits():
    with pytest.raises(ValueError):
        sample_sar_dense(np.ones((17, 16)), make_rng(0, 9))
    with pytest.raises(ValueError):
        sample_sar_dense(np.zeros((2, 2)), make_rng(0, 9))
