import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from kdeflow.core import GaussianKernel, LogisticKernel, make_kernel
from kdeflow.kde import (MixtureApprox, kde_log_density, kde_score, self_score,
                         self_score_jacobian, smoothing_limit_check)

from conftest import fd_gradient

G1 = GaussianKernel(1)


def test_log_density_values():
    assert math.isclose(kde_log_density([[0.0]], G1, 1.0, [0.0]), -0.5 * math.log(2 * math.pi),
                        rel_tol=1e-14)
    assert math.isclose(kde_log_density([[-1.0], [1.0]], G1, 1.0, [0.0]),
                        -0.5 - 0.5 * math.log(2 * math.pi), rel_tol=1e-14)
    assert math.isclose(kde_log_density([[0.0]], G1, 0.5, [0.0]),
                        math.log(2 / math.sqrt(2 * math.pi)), rel_tol=1e-13)
    assert math.isclose(kde_log_density([[0.0]], G1, 0.5, [0.0]), -0.22579, abs_tol=1e-5)


@given(x=st.floats(-10, 10), h=st.floats(0.05, 5))
def test_single_center_score(x, h):
    assert math.isclose(kde_score([[0.0]], G1, h, [x])[0], -x / h ** 2, rel_tol=1e-12, abs_tol=1e-12)


@pytest.mark.parametrize("kernel", [GaussianKernel(2), LogisticKernel(2)])
def test_score_vanishes_at_own_center(kernel):
    np.testing.assert_array_equal(kde_score([[1.5, -0.5]], kernel, 0.3, [1.5, -0.5]), 0.0)


def test_symmetric_pair_score_zero():
    assert kde_score([[-1.0], [1.0]], G1, 1.0, [0.0]) == 0.0


@pytest.mark.parametrize("family", ["gaussian", "logistic"])
def test_score_matches_fd(family, rng):
    k = make_kernel(family, 2)
    c = rng.normal(size=(7, 2))
    x = rng.normal(scale=1.5, size=(15, 2))
    np.testing.assert_allclose(kde_score(c, k, 0.4, x),
                               fd_gradient(lambda y: kde_log_density(c, k, 0.4, y), x),
                               rtol=1e-5, atol=1e-7)


@given(c=arrays(float, (6, 2), elements=st.floats(-3, 3)), seed=st.integers(0, 2 ** 32 - 1))
def test_exchangeable_after_sorting(c, seed):
    k = GaussianKernel(2)
    perm = np.random.default_rng(seed).permutation(6)
    x = np.array([[0.1, -0.2], [1.0, 2.0]])
    srt = lambda a: a[np.lexsort(a.T[::-1])]
    np.testing.assert_array_equal(kde_log_density(srt(c), k, 0.5, x),
                                  kde_log_density(srt(c[perm]), k, 0.5, x))
    np.testing.assert_allclose(kde_log_density(c, k, 0.5, x), kde_log_density(c[perm], k, 0.5, x),
                               rtol=1e-13)


def test_batching_does_not_change_values(rng):
    c = rng.normal(size=(9, 1))
    x = rng.normal(size=(12, 1))
    full = kde_log_density(c, G1, 0.3, x)
    single = np.array([kde_log_density(c, G1, 0.3, xi) for xi in x])
    np.testing.assert_array_equal(full, single)


def test_1d_normalization(rng):
    c = rng.normal(size=(20, 1))
    x = np.linspace(-10, 10, 20001)
    assert abs(np.trapezoid(np.exp(kde_log_density(c, G1, 0.3, x[:, None])), x) - 1) < 1e-4


def test_far_tail_is_finite():
    v = kde_log_density([[0.0]], G1, 0.1, [1e3])
    assert np.isfinite(v) and v < -1e7
    assert np.isfinite(kde_score([[0.0], [1.0]], G1, 0.1, [1e3]))


def test_input_validation():
    with pytest.raises(ValueError):
        kde_log_density(np.zeros((0, 1)), G1, 1.0, [0.0])
    with pytest.raises(ValueError):
        kde_log_density([[0.0]], G1, 0.0, [0.0])
    with pytest.raises(ValueError):
        kde_log_density([[0.0, 1.0]], G1, 1.0, [0.0])


def test_self_score_jacobian_matches_fd(rng):
    for k in (GaussianKernel(2), LogisticKernel(2)):
        c = rng.normal(size=(5, 2))
        jac = self_score_jacobian(c, k, 0.7)
        num = np.empty_like(jac)
        eps = 1e-6
        for m in range(c.size):
            cp, cm = c.copy().ravel(), c.copy().ravel()
            cp[m] += eps
            cm[m] -= eps
            num[:, m] = (self_score(cp.reshape(c.shape), k, 0.7)
                         - self_score(cm.reshape(c.shape), k, 0.7)).ravel() / (2 * eps)
        np.testing.assert_allclose(jac, num, rtol=1e-5, atol=1e-6)


# --- MixtureApprox -------------------------------------------------------------

def test_mixture_is_target_and_positive(rng):
    c = rng.normal(size=(10, 2))
    mix = MixtureApprox(c, GaussianKernel(2), 0.3)
    x = rng.uniform(-20, 20, size=(30, 2))
    assert np.all(mix.density(x[:5]) >= 0) and np.all(np.isfinite(mix.log_density(x)))
    assert mix.log_normalizer == 0.0
    np.testing.assert_allclose(mix.score(x[:5]), fd_gradient(mix.log_density, x[:5]),
                               rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(mix.mean(), c.mean(axis=0))


def test_mixture_2d_normalization(rng):
    mix = MixtureApprox(rng.normal(size=(5, 2)), GaussianKernel(2), 0.5)
    g = np.linspace(-8, 8, 401)
    X, Y = np.meshgrid(g, g, indexing="ij")
    vals = mix.density(np.stack([X.ravel(), Y.ravel()], 1)).reshape(X.shape)
    assert abs(np.trapezoid(np.trapezoid(vals, g, axis=1), g) - 1) < 1e-4


def test_mixture_rejects_coincident_centers():
    with pytest.raises(ValueError, match="distinct"):
        MixtureApprox([[0.0], [0.0]], G1, 0.3)
    # raw evaluation tolerates them
    assert np.isfinite(kde_log_density([[0.0], [0.0]], G1, 0.3, [0.0]))


def test_mixture_serialization(tmp_path, rng):
    mix = MixtureApprox(rng.normal(size=(4, 2)), LogisticKernel(2), 0.25)
    mix.to_json(tmp_path / "m.json")
    back = MixtureApprox.from_json(tmp_path / "m.json")
    np.testing.assert_array_equal(back.centers, mix.centers)
    assert back.kernel == mix.kernel and back.h == mix.h
    mix.centers_to_csv(tmp_path / "c.csv")
    from kdeflow.kde import read_centers_csv
    np.testing.assert_array_equal(read_centers_csv(tmp_path / "c.csv"), mix.centers)


# --- smoothing limit --------------------------------------------------------------

def _normal_conv(x):
    return np.exp(-0.5 * x[:, 0] ** 2 / 1.25) / math.sqrt(2 * math.pi * 1.25)


def test_smoothing_limit_large_J(rng):
    grid = np.linspace(-3, 3, 121)[:, None]
    dev = smoothing_limit_check(lambda r, n: r.standard_normal((n, 1)), G1, 0.5, 10_000, grid,
                                rng, convolved=_normal_conv)
    assert dev < 0.02


def test_smoothing_limit_rate():
    grid = np.linspace(-3, 3, 61)[:, None]
    Js = [250, 1000, 4000]
    devs = np.array([[smoothing_limit_check(lambda r, n: r.standard_normal((n, 1)), G1, 0.5, J,
                                            grid, np.random.default_rng(100 * s + i),
                                            convolved=_normal_conv)
                      for i, J in enumerate(Js)] for s in range(20)]).mean(axis=0)
    slope = np.polyfit(np.log(Js), np.log(devs), 1)[0]
    assert -0.65 < slope < -0.35
    assert 0.35 < devs[1] / devs[0] < 0.65


def test_smoothing_limit_identity_case():
    grid = np.linspace(-3, 3, 61)[:, None]
    dev = smoothing_limit_check(lambda r, n: np.zeros((n, 1)), G1, 0.7, 50, grid, None,
                                convolved=lambda x: np.exp(kde_log_density([[0.0]], G1, 0.7, x)))
    assert dev < 1e-15


def test_smoothing_limit_quadrature_path(rng):
    grid = np.linspace(-8, 8, 801)[:, None]
    dens = lambda x: np.exp(-0.5 * x[:, 0] ** 2) / math.sqrt(2 * math.pi)
    a = smoothing_limit_check(lambda r, n: r.standard_normal((n, 1)), G1, 0.5, 2000, grid,
                              np.random.default_rng(1), density=dens)
    b = smoothing_limit_check(lambda r, n: r.standard_normal((n, 1)), G1, 0.5, 2000, grid,
                              np.random.default_rng(1), convolved=_normal_conv)
    assert abs(a - b) < 1e-4
