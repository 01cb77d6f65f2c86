import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvi.baselines import global_vi
from pvi.data import Dataset, synth_logreg
from pvi.expfam import GaussianMeanField
from pvi.localopt import OptimizerConfig, global_free_energy
from pvi.models import Estimator, ModelSpec, exact_posterior, grad_log_lik, log_lik
from pvi.oracle import DimensionTooHigh, NonFiniteEvaluation, fd_gradient, grid_posterior, kl_to_grid

LIN1 = ModelSpec("linear_regression", 1)
LOG1 = ModelSpec("logistic_regression", 1, bias=False)
PRIOR1 = GaussianMeanField.standard(1)
FINE = Estimator("quadrature", nodes=120)


def test_conjugate_grid_moments_and_evidence():
    gp = grid_posterior(LIN1, PRIOR1, Dataset([[1.0]], [2.0]))
    assert gp.mean[0] == pytest.approx(1.0, abs=1e-6)
    assert gp.var[0] == pytest.approx(0.5, abs=1e-6)
    assert gp.log_z == pytest.approx(-0.5 * np.log(4 * np.pi) - 1.0, abs=1e-6)
    assert gp.integrate(np.exp(gp.log_density)) == pytest.approx(1.0, abs=1e-8)


def test_no_data_recovers_prior():
    prior = GaussianMeanField.from_moments([0.5, -1.0], [2.0, 0.3])
    gp = grid_posterior(None, prior, None)
    np.testing.assert_allclose(gp.mean, prior.mean, atol=1e-6)
    np.testing.assert_allclose(gp.var, prior.var, rtol=1e-5)
    assert gp.log_z == pytest.approx(0.0, abs=1e-8)


@pytest.mark.parametrize("label, sign", [(1, 1), (0, -1)])
def test_logistic_single_point_sign_and_refinement(label, sign):
    data = Dataset([[1.3]], [label])
    gp = grid_posterior(LOG1, PRIOR1, data)
    assert np.sign(gp.mean[0]) == sign
    fine = grid_posterior(LOG1, PRIOR1, data, resolution=40001)
    assert abs(fine.mean[0] - gp.mean[0]) < 1e-5
    assert abs(fine.var[0] - gp.var[0]) < 1e-5
    assert abs(fine.log_z - gp.log_z) < 1e-5


def test_doubling_resolution_is_invariant():
    data = synth_logreg(1, 30, weight_seed=2, seed=3)
    model = ModelSpec("logistic_regression", 1)
    prior = GaussianMeanField.standard(2)
    a = grid_posterior(model, prior, data)
    b = grid_posterior(model, prior, data, resolution=2 * a.axes[0].size - 1)
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-6)
    np.testing.assert_allclose(a.var, b.var, atol=1e-6)
    assert a.log_z == pytest.approx(b.log_z, abs=1e-6)


def test_dimension_limit():
    with pytest.raises(DimensionTooHigh):
        grid_posterior(None, GaussianMeanField.standard(3), None)
    gp = grid_posterior(None, PRIOR1, None)
    with pytest.raises(DimensionTooHigh):
        kl_to_grid(GaussianMeanField.standard(2), gp)


def test_fd_gradient_examples():
    assert fd_gradient(lambda x: float(x[0] ** 2), [3.0])[0] == pytest.approx(6.0, abs=1e-8)
    np.testing.assert_array_equal(fd_gradient(lambda x: 1.5, np.ones(4)), 0.0)
    with pytest.raises(NonFiniteEvaluation):
        fd_gradient(lambda x: float(np.inf), [0.0])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_fd_matches_logistic_gradient(seed):
    model = ModelSpec("logistic_regression", 4)
    data = synth_logreg(4, 25, weight_seed=seed, seed=seed + 1)
    theta = np.random.default_rng(seed).standard_normal(5)
    g = grad_log_lik(model, data, theta)
    fd = fd_gradient(lambda t: log_lik(model, data, t), theta)
    assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


def test_kl_of_exact_posterior_to_its_grid():
    data = Dataset([[1.0], [0.5], [-2.0]], [2.0, 0.0, -1.0])
    post = exact_posterior(LIN1, PRIOR1, data)
    gp = grid_posterior(LIN1, PRIOR1, data)
    assert abs(kl_to_grid(post, gp)) <= 1e-6


def test_converged_global_vi_minimizes_grid_kl_among_candidates():
    data = synth_logreg(1, 40, weight_seed=1, seed=2, bias=0.0)
    data = Dataset(data.inputs, data.targets)
    gp = grid_posterior(LOG1, PRIOR1, data)
    q = global_vi(PRIOR1, LOG1, data, OptimizerConfig(tol=1e-10, max_steps=5000))
    best = kl_to_grid(q, gp)
    rng = np.random.default_rng(0)
    for _ in range(50):
        cand = GaussianMeanField.from_moments(q.mean + rng.normal(0, 0.3, 1), q.var * np.exp(rng.normal(0, 0.5, 1)))
        assert kl_to_grid(cand, gp) >= best


@settings(max_examples=15, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(0.05, 1.5))
def test_elbo_identity(m, v):
    data = Dataset([[1.0], [-0.4], [2.2], [0.3]], [1, 1, 0, 1])
    gp = grid_posterior(LOG1, PRIOR1, data)
    q = GaussianMeanField.from_moments([m], [v])
    f = global_free_energy(LOG1, PRIOR1, data, q, FINE)
    assert f + kl_to_grid(q, gp) == pytest.approx(gp.log_z, abs=1e-4)
