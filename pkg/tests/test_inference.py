import numpy as np
import pytest

import oracles
from anisogmrf.anisotropy import AnisotropyModel, na_from_sa
from anisogmrf.grid import GridSpec
from anisogmrf.inference import LikelihoodWorkspace, default_init, fd_check, fit, fit_nested, log_likelihood
from anisogmrf.model import Dataset, LatentSpec
from anisogmrf.simstudy import simulate_data

SA_TH = np.array([np.log(0.4), np.log(0.6), 0.9, 0.5, 0.2, 0.4, 0.3, np.log(20.0)])


def rand_data(grid, n, R=1, k=0, seed=0):
    rng = np.random.default_rng(seed)
    cells = rng.integers(0, grid.n_cells, n)
    X = rng.standard_normal((n * R, k)) if k else None
    return Dataset(0.3 * rng.standard_normal(n * R), np.tile(cells, R), np.repeat(np.arange(R), n), X)


def dense_ll(grid, kind, theta, data, V=1e4):
    m = AnisotropyModel(kind, theta, grid.bounds)
    return oracles.dense_loglik(oracles.dense_Q(grid, m), data, V, m.sigma2)


@pytest.mark.parametrize("kind,k", [("si", 0), ("sa", 0), ("sa", 2), ("na", 0), ("na", 1)])
def test_loglik_dense_oracle(kind, k):
    g = GridSpec(4, 3, 5, (0, 8, 0, 6, 0, 10))
    rng = np.random.default_rng(1)
    th = {"si": np.array([np.log(0.3), 0.2, 3.0]), "sa": SA_TH,
          "na": np.r_[0.3 * rng.standard_normal(189), 3.0]}[kind]
    d = rand_data(g, 25, R=2, k=k)
    ll = log_likelihood(kind, th, d, g)
    assert ll == pytest.approx(dense_ll(g, kind, th, d), rel=1e-8)


def test_single_observation():
    g = GridSpec(3, 3, 3, (0, 3, 0, 3, 0, 3))
    d = Dataset([0.7], [13])
    assert log_likelihood("sa", SA_TH, d, g) == pytest.approx(dense_ll(g, "sa", SA_TH, d), rel=1e-8)


def test_zero_data_closed_form():
    g = GridSpec(4, 4, 4, (0, 8, 0, 8, 0, 8))
    d = Dataset(np.zeros(10), np.arange(10) * 3)
    m = AnisotropyModel("sa", SA_TH)
    lat = LatentSpec(g, m)
    ld_qz = lat.prior_factor().logdet()
    from anisogmrf.model import condition
    ld_qc = condition(lat, d, m.sigma2).factor().logdet()
    ref = -0.5 * 10 * np.log(2 * np.pi) + 0.5 * ld_qz + 0.5 * 10 * SA_TH[-1] - 0.5 * ld_qc
    assert log_likelihood("sa", SA_TH, d, g) == pytest.approx(ref, rel=1e-10)


def test_replicates_sum():
    g = GridSpec(4, 4, 4, (0, 8, 0, 8, 0, 8))
    d = rand_data(g, 15, R=3, seed=2)
    total = log_likelihood("sa", SA_TH, d, g)
    parts = sum(log_likelihood("sa", SA_TH, Dataset(d.y[d.realization == r], d.cells[d.realization == r]), g)
                for r in range(3))
    assert total == pytest.approx(parts, rel=1e-12)


def test_row_permutation_invariance():
    g = GridSpec(4, 4, 4, (0, 8, 0, 8, 0, 8))
    d = rand_data(g, 20, R=2, seed=3)
    p = np.random.default_rng(4).permutation(d.n)
    d2 = Dataset(d.y[p], d.cells[p], d.realization[p])
    assert log_likelihood("sa", SA_TH, d, g) == pytest.approx(log_likelihood("sa", SA_TH, d2, g), rel=1e-12)


G6 = GridSpec.cube(6, 12.0)


@pytest.mark.parametrize("kind", ["si", "sa"])
def test_gradient_fd_stationary(kind):
    d = rand_data(G6, 50, seed=5)
    th = np.array([np.log(0.3), 0.2, 3.0]) if kind == "si" else SA_TH
    rep = fd_check(LikelihoodWorkspace(G6, kind, d), th)
    assert rep["max_rel_err"] <= 1e-5


def test_gradient_fd_na():
    d = rand_data(G6, 50, seed=6)
    rng = np.random.default_rng(7)
    th = np.r_[0.1 * rng.standard_normal(189), 3.0]
    comps = np.sort(rng.choice(190, 20, replace=False))
    ws = LikelihoodWorkspace(G6, "na", d)
    rep = fd_check(ws, th, comps, scheme="richardson")
    assert rep["max_rel_err"] <= 1e-4
    # two-point differences at the same step carry O(h^2) truncation error, visible
    # on components whose gradient is close to zero
    central = fd_check(ws, th, comps)
    for a, b in zip(rep["components"], central["components"]):
        assert abs(b["fd"] - a["analytic"]) < 1e-5 * (1 + abs(a["analytic"]))


def test_gradient_with_covariates():
    d = rand_data(G6, 40, R=2, k=2, seed=8)
    rep = fd_check(LikelihoodWorkspace(G6, "sa", d), SA_TH)
    assert rep["max_rel_err"] <= 1e-5


def test_fd_step_sweep_v_shape():
    d = rand_data(G6, 50, seed=9)
    ws = LikelihoodWorkspace(G6, "si", d)
    th = np.array([np.log(0.3), 0.2, 3.0])
    errs = [fd_check(ws, th, [0], s)["max_rel_err"] for s in (1e-1, 1e-2, 1e-4, 1e-9, 1e-11)]
    # truncation error dominates at large steps, roundoff at tiny ones, minimum in between
    assert min(errs) == min(errs[2:4])
    assert errs[0] > errs[1] > errs[2]
    assert errs[-1] > min(errs)


def test_zero_data_quadratic_gradient_vanishes():
    d = Dataset(np.zeros(30), np.arange(30) * 7)
    ws = LikelihoodWorkspace(G6, "sa", d)
    _, g0 = ws.evaluate(SA_TH)
    # zero data: gradient is the log-det part only, which does not depend on y scale
    d2 = Dataset(np.zeros(30), np.arange(30) * 7)
    _, g1 = LikelihoodWorkspace(G6, "sa", d2).evaluate(SA_TH)
    assert np.array_equal(g0, g1)
    m = ws.model(SA_TH)
    y = np.full(30, 1e-7)
    _, g2 = LikelihoodWorkspace(G6, "sa", Dataset(y, d.cells)).evaluate(SA_TH)
    assert np.allclose(g2, g0, rtol=1e-6, atol=1e-8)


def test_fit_si_small_and_monotone():
    g = GridSpec.cube(10)
    truth = AnisotropyModel("si", [np.log(0.2), np.log(2.5), np.log(100.0)])
    d = simulate_data(truth, g, g.n_cells, 5, np.random.default_rng(10))
    res = fit("si", d, g)
    assert res.converged
    assert all(b >= a - 1e-9 * abs(a) for a, b in zip(res.history, res.history[1:]))
    assert abs(res.theta[0] - np.log(0.2)) < 0.5 and abs(res.theta[1] - np.log(2.5)) < 0.5
    # restarting at the optimum: already stationary
    res2 = fit("si", d, g, init=res.theta)
    assert res2.iterations <= 1 and res2.converged
    assert res2.loglik >= res.loglik - 1e-9 * abs(res.loglik)


def test_na_nesting():
    g = GridSpec(6, 6, 5, (0, 12, 0, 12, 0, 10))
    truth = AnisotropyModel("sa", SA_TH)
    d = simulate_data(truth, g, g.n_cells, 3, np.random.default_rng(11))
    si, sa, na = fit_nested(d, g, "na", maxiter=60)
    assert na.loglik >= sa.loglik - 1e-6
    assert sa.loglik >= si.loglik - 1e-6


def test_default_init_feasible():
    g = GridSpec.cube(6)
    d = rand_data(g, 30, seed=12)
    for kind in ("si", "sa", "na"):
        th = default_init(kind, d, g)
        assert np.isfinite(LikelihoodWorkspace(g, kind, d).value(th))
