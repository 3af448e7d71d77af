import math

import numpy as np
import pytest
from scipy import stats

from kdeflow.core import (GaussianKernel, LogisticKernel, ParticleEnsemble, WeightedSample,
                          initial_ensemble, make_gaussian_mixture_target, make_rng)
from kdeflow.dynamics import FlowConfig, integrate
from kdeflow.evaluation import (Grid, GridCoverageError, RkhsFunction, bisect_bandwidth,
                                candidate_pool, fit_rate, gram, herding_points, kde_kl,
                                kl_flow_derivative, kl_numeric, kl_slope_fd,
                                make_benchmark_mixture, mean_embedding, mmd, mmd_discrete,
                                quadrature_error_suite, sbq_points, sbq_weights, weighted_mmd)
from kdeflow.kde import MixtureApprox
from kdeflow.sampling import UnsupportedKernelError

G1 = GaussianKernel(1)
N01 = make_gaussian_mixture_target([[0.0]], [1.0])
GRID = Grid([(-12.0, 12.0)], 4801)


def gauss(mu, var):
    return make_gaussian_mixture_target([[mu]], [var])


# --- grids and KL -------------------------------------------------------------------------

def test_grid_validation():
    with pytest.raises(ValueError):
        Grid([(0, 1)], 8)
    with pytest.raises(ValueError):
        Grid([(0, 1)] * 3, 20)
    with pytest.raises(ValueError):
        Grid([(1, 0)], 20)
    g = Grid([(0, 1), (0, 2)], 21)
    assert g.points.shape == (441, 2)
    assert g.weights.sum() == pytest.approx(2.0)


def test_kl_identity_and_closed_forms():
    assert abs(kl_numeric(N01, N01, GRID)) < 1e-10
    assert kl_numeric(N01, gauss(1.0, 1.0), GRID) == pytest.approx(0.5, abs=1e-4)
    expect = 0.5 * (0.25 - 1 + math.log(4))
    assert kl_numeric(N01, gauss(0.0, 4.0), Grid([(-20.0, 20.0)], 8001)) == \
        pytest.approx(expect, abs=1e-4)
    assert expect == pytest.approx(0.31815, abs=1e-5)


def test_kl_2d_closed_form():
    p = make_gaussian_mixture_target([[0.0, 0.0]], [1.0])
    q = make_gaussian_mixture_target([[1.0, -1.0]], [1.0])
    g = Grid([(-9, 9), (-9, 9)], 361)
    assert kl_numeric(p, q, g) == pytest.approx(1.0, abs=1e-4)


def test_kl_accepts_callables():
    assert kl_numeric(N01.log_density, lambda x: gauss(1.0, 1.0).log_density(x), GRID) == \
        pytest.approx(0.5, abs=1e-4)


def test_grid_coverage_checked():
    with pytest.raises(GridCoverageError):
        kl_numeric(N01, N01, Grid([(-2.0, 2.0)], 401))
    with pytest.raises(GridCoverageError):
        kl_numeric(lambda x: np.full(len(x), -np.inf), N01, GRID)


def test_kl_flow_derivative_zero_for_stationary_ensemble():
    ens, _ = integrate(ParticleEnsemble([[2.0]]), N01, G1, FlowConfig(stop_eps=1e-12))
    assert abs(kl_flow_derivative(ens, N01, G1, 0.3, GRID)) < 1e-18


def test_kl_flow_derivative_small_h_limit():
    d = kl_flow_derivative(ParticleEnsemble([[2.0]]), N01, G1, 0.05, GRID)
    assert d == pytest.approx(-4.0, rel=0.1)


@pytest.mark.parametrize("J", [5, 20])
def test_kl_derivative_matches_finite_difference(J):
    init = initial_ensemble(J, 1, make_rng(J), mean=[2.0], scale=0.5)
    d = kl_flow_derivative(init, N01, G1, 0.3, GRID)
    fd = kl_slope_fd(init, N01, G1, 0.3, GRID)
    assert d < 0
    assert abs(fd - d) / abs(d) < 1e-2


def test_kl_derivative_matches_one_accepted_step():
    init = initial_ensemble(5, 1, make_rng(1), mean=[2.0], scale=0.5)
    _, tr = integrate(init, N01, G1, FlowConfig(h=0.3, max_step=1e-3, max_time=2e-3),
                      trace=True)
    dt = tr.times[1] - tr.times[0]
    slope = (kde_kl(tr.positions[1], N01, G1, 0.3, GRID)
             - kde_kl(tr.positions[0], N01, G1, 0.3, GRID)) / dt
    d0 = kl_flow_derivative(init, N01, G1, 0.3, GRID)
    d1 = kl_flow_derivative(tr.positions[1], N01, G1, 0.3, GRID)
    assert abs(slope - 0.5 * (d0 + d1)) / abs(d0) < 1e-2


def test_bisect_bandwidth_returns_bracket_end_without_sign_change():
    init = initial_ensemble(5, 1, make_rng(0), mean=[2.0], scale=0.5)
    assert bisect_bandwidth(init, N01, G1, GRID, 0.05, 1.0) == 1.0


def test_bisect_bandwidth_finds_sign_change(monkeypatch):
    import kdeflow.evaluation as ev
    monkeypatch.setattr(ev, "kl_flow_derivative", lambda e, t, k, h, g: h - 0.4321)
    h = bisect_bandwidth(None, None, G1, GRID, 0.01, 3.0, tol=1e-6)
    assert h == pytest.approx(0.4321, abs=1e-6) and h <= 0.4321
    monkeypatch.setattr(ev, "kl_flow_derivative", lambda e, t, k, h, g: 1.0)
    with pytest.raises(ValueError):
        bisect_bandwidth(None, None, G1, GRID)


# --- embeddings and MMD --------------------------------------------------------------------

def test_one_point_embedding():
    emb = mean_embedding(WeightedSample([[0.5]]), 0.3)
    assert emb([0.5])[0] == pytest.approx(1 / (0.3 * math.sqrt(2 * math.pi)))
    assert emb([1.0])[0] == pytest.approx(stats.norm.pdf(1.0, 0.5, 0.3))


def test_gaussian_mixture_embedding_closed_form():
    emb = mean_embedding(gauss(0.0, 0.7 ** 2), 0.4)
    x = np.linspace(-3, 3, 7)[:, None]
    np.testing.assert_allclose(emb(x), stats.norm.pdf(x[:, 0], 0, math.sqrt(0.49 + 0.16)))


def test_kde_mixture_embedding_closed_form(rng):
    c = rng.normal(size=(4, 1))
    emb = mean_embedding(MixtureApprox(c, G1, 0.3), 0.5)
    x = np.array([[0.2]])
    expect = np.mean(stats.norm.pdf(0.2, c[:, 0], math.sqrt(0.09 + 0.25)))
    assert emb(x)[0] == pytest.approx(expect, rel=1e-12)


def test_embedding_linearity(rng):
    a, b = rng.normal(size=(5, 2)), rng.normal(size=(7, 2))
    merged = WeightedSample(np.vstack([a, b]), np.r_[np.full(5, 0.1), np.full(7, 0.5 / 7)])
    x = rng.normal(size=(10, 2))
    np.testing.assert_allclose(mean_embedding(merged, 0.4)(x),
                               0.5 * mean_embedding(a, 0.4)(x) + 0.5 * mean_embedding(b, 0.4)(x),
                               rtol=0, atol=1e-12)


def test_unsupported_kernel():
    with pytest.raises(UnsupportedKernelError):
        mean_embedding(WeightedSample([[0.0]]), 0.3, kernel=LogisticKernel(1))
    with pytest.raises(UnsupportedKernelError):
        mean_embedding(MixtureApprox([[0.0]], LogisticKernel(1), 0.3), 0.3)


def test_mmd_identity_and_limit(rng):
    X = rng.normal(size=(6, 2))
    assert mmd(X, X, 0.5) == 0.0
    assert mmd_discrete(X, X, 0.5) == 0.0
    vals = [mmd([[0.0]], gauss(0.0, s ** 2), 0.3) for s in (1e-1, 1e-2, 1e-3)]
    assert vals[0] > vals[1] > vals[2] and vals[2] < 1e-4


def test_mmd_matches_grid_quadrature(rng):
    # ||mu_ref - mu_ws||^2 as a double integral of k against the signed measure
    h = 0.5
    ref = make_gaussian_mixture_target([[-1.0], [1.5]], [0.3, 0.6], [0.4, 0.6])
    ws = WeightedSample(rng.normal(size=(8, 1)), rng.random(8))
    x = np.linspace(-8, 8, 2001)
    dx = x[1] - x[0]
    rho = np.exp(ref.log_density(x[:, None])) * dx
    k = lambda a, b: stats.norm.pdf(a[:, None] - b[None, :], scale=h)
    z, w = ws.points[:, 0], ws.weights
    sq = rho @ k(x, x) @ rho - 2 * rho @ k(x, z) @ w + w @ k(z, z) @ w
    assert mmd(ws, ref, h) ** 2 == pytest.approx(sq, rel=1e-3)


# --- test functions and quadrature -----------------------------------------------------------

def test_rkhs_function_norm_and_expectation(rng):
    f = RkhsFunction.random(rng, lambda r, n: r.normal(size=(n, 2)), 0.4, 12)
    assert f.norm() == pytest.approx(1.0, rel=1e-10)
    ref = make_gaussian_mixture_target([[0.0, 0.0]], [1.0])
    Y = ref.sample(rng, 200_000)
    assert f.expectation(ref) == pytest.approx(f(Y).mean(), abs=5 * f(Y).std() / math.sqrt(2e5))


def test_zero_function_has_zero_error(rng):
    f = RkhsFunction(np.zeros(3), rng.normal(size=(3, 1)), 0.3)
    assert f.expectation(N01) == 0.0 and np.all(f(rng.normal(size=(5, 1))) == 0)


def test_quadrature_error_below_mmd_bound(rng):
    h = 0.5
    rho = make_benchmark_mixture()
    sets = [WeightedSample(rho.sample(rng, 20)), WeightedSample(rho.sample(rng, 40))]
    emb = mean_embedding(rho, h)
    for s in sets:
        m = mmd(s, emb, h)
        for _ in range(50):
            f = RkhsFunction.random(rng, rho.sample, h)
            err = abs(f.expectation(emb) - s.weights @ f(s.points))
            assert err <= m * f.norm() + 1e-9
    errs = quadrature_error_suite(sets, rho, h, 50, make_rng(0))
    assert errs.shape == (2,) and np.all(errs > 0)
    assert np.all(errs <= [mmd(s, emb, h) for s in sets])


def test_benchmark_mixture_is_fixed():
    a, b = make_benchmark_mixture(), make_benchmark_mixture()
    np.testing.assert_array_equal(a.means, b.means)
    assert a.means.shape == (20, 2)
    assert np.all(np.linalg.eigvalsh(a.covariances) > 0)
    assert a.spec == {"family": "benchmark_mixture", "seed": 20, "n_components": 20}


# --- herding and SBQ ---------------------------------------------------------------------------

def test_herding_first_point_nearest_mode():
    pool = np.linspace(-3, 3, 61)[:, None] + 0.013
    z = herding_points(N01, 0.5, 1, pool=pool)
    assert abs(z[0, 0]) == np.min(np.abs(pool))


def test_herding_alternates_on_two_atoms():
    ref = WeightedSample([[-2.0], [2.0]])
    z = herding_points(ref, 0.3, 6, pool=np.array([[-2.0], [2.0], [0.0]]))
    assert set(z[::2, 0]) | set(z[1::2, 0]) == {-2.0, 2.0}
    assert np.all(z[::2] != z[1::2])


def test_herding_mmd_decreasing():
    rho = make_benchmark_mixture()
    vals = [mmd(herding_points(rho, 0.5, J, rng=make_rng(J)), rho, 0.5) for J in (10, 20, 40)]
    assert vals[0] > vals[1] > vals[2]


def test_candidate_pool_modes(rng):
    rho = make_benchmark_mixture()
    assert candidate_pool(rho, 30, rng).shape == (30, 2)
    box = candidate_pool(rho, 30, rng, mode="box", box=[(-1, 1), (2, 3)])
    assert np.all((box[:, 0] >= -1) & (box[:, 0] <= 1) & (box[:, 1] >= 2))
    with pytest.raises(ValueError):
        candidate_pool(rho, 3, rng, mode="box")
    with pytest.raises(ValueError):
        herding_points(rho, 0.5, 2, pool=np.zeros((0, 2)))


def test_sbq_single_point_weight():
    z = np.array([[0.3]])
    emb = mean_embedding(N01, 0.5)
    assert sbq_weights(z, N01, 0.5)[0] == pytest.approx(emb(z)[0] / gram(z, 0.5)[0, 0])


def test_sbq_weights_optimal(rng):
    rho = make_benchmark_mixture()
    P = rho.sample(rng, 15)
    w = sbq_weights(P, rho, 0.5)
    best = weighted_mmd(P, w, rho, 0.5)
    assert best <= mmd(P, rho, 0.5)
    for _ in range(100):
        assert weighted_mmd(P, w + 1e-3 * rng.standard_normal(15), rho, 0.5) >= best


def test_sbq_duplicate_points_use_jitter():
    P = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    w = sbq_weights(P, make_benchmark_mixture(), 0.5)
    assert np.all(np.isfinite(w))


def test_sbq_points_greedy(rng):
    rho = make_benchmark_mixture()
    P, W = sbq_points(rho, 0.5, 10, rng=make_rng(0))
    assert P.shape == (10, 2) and np.unique(P, axis=0).shape[0] == 10
    H = herding_points(rho, 0.5, 10, rng=make_rng(0))
    assert weighted_mmd(P, W, rho, 0.5) < mmd(H, rho, 0.5)


# --- rates ----------------------------------------------------------------------------------

def test_fit_rate_exact_power_laws():
    Ks = np.array([64, 128, 256, 512, 1024])
    assert fit_rate(Ks, 3.0 / Ks).slope == pytest.approx(-1.0, abs=1e-12)
    assert fit_rate(Ks, 3.0 / np.sqrt(Ks)).slope == pytest.approx(-0.5, abs=1e-12)


def test_fit_rate_monte_carlo_slope():
    Ks = [2 ** p for p in range(6, 13)]
    rng = make_rng(0)
    errs = np.array([[abs(rng.standard_normal(K).mean()) for K in Ks] for _ in range(40)])
    fit = fit_rate(Ks, errs)
    assert fit.slope == pytest.approx(-0.5, abs=0.1)
    assert fit.ci_low <= fit.slope <= fit.ci_high


def test_fit_rate_validation():
    with pytest.raises(ValueError):
        fit_rate([1, 2, 3], [1.0, 0.5, 0.3])
    with pytest.raises(ValueError):
        fit_rate([1, 2, 3, 4], [1.0, 0.0, 0.3, 0.2])
