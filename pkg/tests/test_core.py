import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from kdeflow.core import (BandwidthSpec, CallableTarget, GaussianKernel, LogisticKernel,
                          ParticleEnsemble, WeightedSample, dejitter, initial_ensemble,
                          kernel_from_dict, make_gaussian_mixture_target, make_kernel,
                          make_rezende_target, make_rng, make_three_gaussian_target,
                          target_from_dict)
from kdeflow.evaluation import make_benchmark_mixture

from conftest import fd_gradient


def all_targets():
    return [
        make_gaussian_mixture_target([[0.0]], [1.0]),
        make_gaussian_mixture_target([[-1.0], [2.0]], [0.5, 2.0], [0.3, 0.7]),
        make_gaussian_mixture_target([[0.0, 1.0], [1.0, -1.0]],
                                     [[[1.0, 0.3], [0.3, 0.5]], 0.7]),
        make_three_gaussian_target(),
        make_benchmark_mixture(),
        make_rezende_target(),
        make_rezende_target("two_sided"),
    ]


@pytest.mark.parametrize("target", all_targets(), ids=lambda t: type(t).__name__)
def test_score_matches_finite_differences(target, rng):
    x = rng.uniform(-3, 3, size=(20, target.dim))
    fd = fd_gradient(target.log_density, x)
    np.testing.assert_allclose(target.score(x), fd, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("target", all_targets(), ids=lambda t: type(t).__name__)
def test_evaluations_finite(target, rng):
    x = rng.uniform(-50, 50, size=(50, target.dim))
    assert np.all(np.isfinite(target.log_density(x)))
    assert np.all(np.isfinite(target.score(x)))


def test_single_gaussian_score():
    t = make_gaussian_mixture_target([[0.0, 0.0]], [np.eye(2)], [1.0])
    np.testing.assert_allclose(t.score([1.0, 1.0]), [-1.0, -1.0])
    assert t.log_normalizer == 0.0


def test_two_component_density_at_zero():
    t = make_gaussian_mixture_target([[-1.0], [1.0]], [1.0, 1.0], [0.5, 0.5])
    assert math.isclose(math.exp(t.log_density([0.0])), stats.norm.pdf(1.0), rel_tol=1e-12)
    assert math.isclose(math.exp(t.log_density([0.0])), 0.24197, abs_tol=1e-5)


def test_mixture_normalized_on_grid():
    t = make_gaussian_mixture_target([[-1.0], [2.0]], [0.5, 2.0], [0.3, 0.7])
    x = np.linspace(-15, 15, 20001)[:, None]
    assert abs(np.trapezoid(np.exp(t.log_density(x)), x[:, 0]) - 1.0) < 1e-4


@pytest.mark.parametrize("kwargs", [
    dict(means=[[0.0], [1.0]], covariances=[1.0], weights=[0.5, 0.5]),
    dict(means=[[0.0]], covariances=[[[1.0, 2.0], [2.0, 1.0]]], weights=[1.0]),
    dict(means=[[0.0, 0.0]], covariances=[[[1.0, 2.0], [2.0, 1.0]]], weights=[1.0]),
    dict(means=[], covariances=[], weights=[]),
    dict(means=[[0.0]], covariances=[-1.0], weights=[1.0]),
    dict(means=[[0.0], [1.0]], covariances=[1.0, 1.0], weights=[0.9, 0.3]),
])
def test_mixture_validation(kwargs):
    with pytest.raises(ValueError):
        make_gaussian_mixture_target(**kwargs)


def test_rezende_value_at_bump():
    t = make_rezende_target()
    expected = -math.log1p(math.exp(-0.5 * (2 / 0.6) ** 2))
    assert math.isclose(float(t.potential([2.0, 0.0])), expected, rel_tol=1e-12)
    assert math.isclose(expected, -0.00387, abs_tol=2e-5)


def test_rezende_reflection_symmetry(rng):
    t = make_rezende_target()
    assert math.isclose(float(t.potential([0.0, -2.0])), float(t.potential([2.0, 0.0])),
                        rel_tol=1e-14)
    x = rng.normal(size=(30, 2))
    refl = np.stack([-x[:, 1], -x[:, 0]], axis=1)
    np.testing.assert_allclose(t.log_density(x), t.log_density(refl), rtol=1e-12)


def test_rezende_two_sided_modes():
    t = make_rezende_target("two_sided")
    np.testing.assert_allclose(t.log_density([2.0, 0.0]), t.log_density([-2.0, 0.0]))
    with pytest.raises(ValueError):
        make_rezende_target("sideways")


def test_rezende_score_at_origin_finite():
    assert np.all(np.isfinite(make_rezende_target().score([0.0, 0.0])))


def test_callable_target_fd_fallback(rng):
    t = CallableTarget(lambda x: -0.25 * np.sum(x ** 4, axis=1), 2)
    x = rng.normal(size=(10, 2))
    np.testing.assert_allclose(t.score(x), -x ** 3, rtol=1e-5, atol=1e-8)


def test_tempered_target():
    t = make_gaussian_mixture_target([[1.0]], [1.0])
    tt = t.tempered(0.25)
    assert tt.log_normalizer is None
    np.testing.assert_allclose(tt.score([3.0]), 0.25 * t.score([3.0]))
    assert t.tempered(1.0) is t
    with pytest.raises(ValueError):
        t.tempered(0.0)


@pytest.mark.parametrize("spec", [
    {"family": "rezende"}, {"family": "rezende", "variant": "two_sided"},
    {"family": "gaussian", "mean": [1.0, 2.0], "covariance": 0.5},
    {"family": "three_gaussian"}, {"family": "benchmark_mixture", "seed": 3},
])
def test_target_round_trip(spec, rng):
    t = target_from_dict(spec)
    t2 = target_from_dict(t.to_dict())
    x = rng.normal(size=(5, t.dim))
    np.testing.assert_allclose(t.log_density(x), t2.log_density(x), rtol=1e-13)


def test_unknown_target_family():
    with pytest.raises(ValueError, match="unknown target family"):
        target_from_dict({"family": "banana"})


# --- kernels ---------------------------------------------------------------

@pytest.mark.parametrize("family", ["gaussian", "logistic"])
def test_kernel_normalized_1d_and_2d(family):
    k1 = make_kernel(family, 1)
    x = np.linspace(-40, 40, 40001)
    assert abs(np.trapezoid(np.exp(k1.log_eval(x[:, None])), x) - 1.0) < 1e-6
    k2 = make_kernel(family, 2)
    g = np.linspace(-30, 30, 1201)
    X, Y = np.meshgrid(g, g, indexing="ij")
    vals = np.exp(k2.log_eval(np.stack([X.ravel(), Y.ravel()], 1))).reshape(X.shape)
    assert abs(np.trapezoid(np.trapezoid(vals, g, axis=1), g) - 1.0) < 1e-6


@pytest.mark.parametrize("family", ["gaussian", "logistic"])
@given(u=st.lists(st.floats(-20, 20), min_size=2, max_size=2))
def test_kernel_symmetry(family, u):
    k = make_kernel(family, 2)
    u = np.array(u)
    assert k.log_eval(u) == k.log_eval(-u)
    np.testing.assert_allclose(k.grad_log_eval(u), -k.grad_log_eval(-u), atol=0)


@pytest.mark.parametrize("family", ["gaussian", "logistic"])
def test_kernel_gradient_matches_fd(family, rng):
    k = make_kernel(family, 2)
    u = rng.normal(scale=2, size=(20, 2))
    np.testing.assert_allclose(k.grad_log_eval(u), fd_gradient(k.log_eval, u), rtol=1e-5,
                               atol=1e-8)


def test_gaussian_kernel_score_and_median():
    k = GaussianKernel(3)
    u = np.array([0.3, -1.2, 2.0])
    np.testing.assert_array_equal(k.grad_log_eval(u), -u)
    np.testing.assert_array_equal(k.qmc_transform([0.5, 0.5, 0.5]), np.zeros(3))


@pytest.mark.parametrize("family,dist", [("gaussian", stats.norm), ("logistic", stats.logistic)])
def test_qmc_transform_pushforward(family, dist, rng):
    k = make_kernel(family, 2)
    z = k.qmc_transform(rng.random((4000, 2)))
    for c in range(2):
        assert stats.kstest(z[:, c], dist.cdf).pvalue > 1e-3
    d = k.draw(rng, 4000)
    assert stats.kstest(d[:, 0], dist.cdf).pvalue > 1e-3


def test_kernel_serialization():
    k = LogisticKernel(2)
    assert kernel_from_dict(k.to_dict()) == k
    with pytest.raises(ValueError):
        make_kernel("epanechnikov", 1)


def test_bandwidth_spec():
    assert BandwidthSpec(0.3).h == 0.3
    for bad in (0.0, -1.0, float("nan"), float("inf")):
        with pytest.raises(ValueError):
            BandwidthSpec(bad)


# --- ensembles, samples, seeding ---------------------------------------------

def test_ensemble_invariants():
    e = ParticleEnsemble([[0.0], [1.0]])
    assert (e.J, e.dim, e.t) == (2, 1, 0.0)
    with pytest.raises(ValueError):
        e.positions[0, 0] = 3.0
    with pytest.raises(ValueError, match="distinct"):
        ParticleEnsemble([[0.0], [0.0]])
    with pytest.raises(ValueError, match="finite"):
        ParticleEnsemble([[np.nan]])
    with pytest.raises(ValueError):
        ParticleEnsemble(np.zeros((0, 2)))
    assert ParticleEnsemble([[0.0], [0.0]], require_distinct=False).J == 2


def test_dejitter_separates_duplicates(rng):
    pts = dejitter(np.zeros((5, 2)), rng, h=0.3)
    assert np.unique(pts, axis=0).shape[0] == 5
    assert np.max(np.abs(pts)) < 1e-6


@given(w=st.lists(st.floats(0, 1e6), min_size=1, max_size=20).filter(lambda v: sum(v) > 0))
def test_weighted_sample_normalizes(w):
    ws = WeightedSample(np.arange(len(w), dtype=float), w)
    assert math.isclose(ws.weights.sum(), 1.0, rel_tol=1e-12)
    assert np.all(ws.weights >= 0)
    assert 1.0 - 1e-9 <= ws.ess <= len(w) + 1e-9


def test_weighted_sample_errors():
    with pytest.raises(ValueError):
        WeightedSample([[0.0], [1.0]], [1.0, -1.0])
    with pytest.raises(ValueError):
        WeightedSample([[0.0], [1.0]], [0.0, 0.0])
    with pytest.raises(ValueError, match="collapse"):
        WeightedSample.from_log_weights([[0.0]], [-np.inf])


def test_weighted_moments():
    ws = WeightedSample([[0.0], [2.0]], [1.0, 3.0])
    np.testing.assert_allclose(ws.mean(), [1.5])
    np.testing.assert_allclose(ws.covariance(), [[0.75]])


def test_seeding_deterministic():
    a = initial_ensemble(10, 2, make_rng(7), mean=[1.0, 1.0]).positions
    b = initial_ensemble(10, 2, make_rng(7), mean=[1.0, 1.0]).positions
    np.testing.assert_array_equal(a, b)
    assert make_rng(2 ** 64 - 1).random() >= 0
    with pytest.raises(ValueError):
        make_rng(-1)
