"""Simulate from known truths, refit, and tabulate parameter RMSEs."""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
import csv
import io
import json
import time

import numpy as np

from .anisotropy import AnisotropyModel, ModelKind, build_omega
from .grid import GridSpec
from .inference import fit, default_init
from .model import Dataset, LatentSpec
from .splines import TensorBasis, project

TABLE_ROWS = {
    "si": ["log_kappa", "log_gamma", "log_tau"],
    "sa": ["log_kappa", "log_gamma", "abs_vx", "abs_vy", "abs_vz", "abs_rho1", "abs_rho2", "log_tau"],
}

SI_TRUTH = dict(kappa2=0.2, gamma=2.5, sigma=0.1)
SA_TRUTH = dict(kappa2=0.35, gamma=0.5, v=(1.9, 1.4, 0.4), rho=(1.4, 0.6), sigma=0.1)


def vortex_fields(points, bounds, amplitude=1.0):
    """Seven parameter functions of a vortex about the vertical center axis.

    Horizontal speed a*(r/r0)*exp((1 - (r/r0)^2)/2) peaks at r0 = half the
    horizontal half-width; rho1 (radial coupling) follows the same profile,
    rho2 (vertical coupling) is constant, log kappa2 and log gamma are constant.
    amplitude = 0 leaves a stationary field with v = (0, 0, vz).
    """
    p = np.atleast_2d(points)
    b = np.asarray(bounds, dtype=float)
    cx, cy = 0.5 * (b[0] + b[1]), 0.5 * (b[2] + b[3])
    R = 0.25 * ((b[1] - b[0]) + (b[3] - b[2])) / 2
    dx, dy = p[:, 0] - cx, p[:, 1] - cy
    r = np.hypot(dx, dy)
    prof = (r / R) * np.exp(0.5 * (1 - (r / R) ** 2))
    safe = np.where(r > 0, r, 1.0)
    speed = 1.8 * amplitude * prof
    out = np.empty((len(p), 7))
    out[:, 0] = np.log(0.35)
    out[:, 1] = np.log(0.5)
    out[:, 2] = -speed * dy / safe
    out[:, 3] = speed * dx / safe
    out[:, 4] = 0.4
    out[:, 5] = 0.8 * amplitude * prof
    out[:, 6] = 1.0
    return out


def make_truth(kind, grid=None, amplitude=1.0, m_eff=3):
    kind = ModelKind.parse(kind)
    if kind is ModelKind.SI:
        t = SI_TRUTH
        return AnisotropyModel("si", [np.log(t["kappa2"]), np.log(t["gamma"]), -2 * np.log(t["sigma"])])
    if kind is ModelKind.SA:
        t = SA_TRUTH
        return AnisotropyModel("sa", np.r_[np.log(t["kappa2"]), np.log(t["gamma"]), t["v"], t["rho"],
                                           -2 * np.log(t["sigma"])])
    grid = grid or GridSpec.cube(30)
    basis = TensorBasis(grid.bounds, m_eff)
    pts = grid.cell_centers()
    vals = vortex_fields(pts, grid.bounds, amplitude)
    coef = np.concatenate([project(basis, pts, vals[:, g]) for g in range(7)])
    return AnisotropyModel("na", np.r_[coef, -2 * np.log(0.1)], grid.bounds, m_eff)


def table_scale(kind, theta):
    """Estimates on the scale of the RMSE table rows."""
    t = np.asarray(theta, dtype=float)
    kind = ModelKind.parse(kind)
    if kind is ModelKind.SI:
        return np.array([0.5 * t[0], t[1], t[2]])
    if kind is ModelKind.SA:
        return np.r_[0.5 * t[0], t[1], np.abs(t[2:7]), t[7]]
    raise ValueError("table scale is defined for si and sa only")


def field_summaries(model, points):
    """kappa2, gamma, |v|, |omega| at points."""
    f = model.fields(points, F=None if model.basis is None else model.basis(points))
    w = build_omega(f[:, 2:5], f[:, 5], f[:, 6])
    return np.column_stack([np.exp(f[:, 0]), np.exp(f[:, 1]), np.linalg.norm(f[:, 2:5], axis=1),
                            np.linalg.norm(w, axis=1)])


def interior_points(grid, n, rng, margin=0.1):
    lo, hi = grid.lower, grid.upper
    pad = margin * (hi - lo)
    return rng.uniform(lo + pad, hi - pad, size=(n, 3))


def simulate_data(truth, grid, n_loc, n_real, rng, sigma=None):
    """Replicated fields observed at n_loc cells drawn without replacement."""
    sigma = np.sqrt(truth.sigma2) if sigma is None else sigma
    n_loc = grid.n_cells if n_loc in (None, "full") else int(n_loc)
    if n_loc > grid.n_cells:
        raise ValueError(f"{n_loc} locations exceed the {grid.n_cells} grid cells")
    W = LatentSpec(grid, truth).sample(n_real, rng)
    cells = np.sort(rng.choice(grid.n_cells, n_loc, replace=False))
    Y = W[cells] + sigma * rng.standard_normal((n_loc, n_real))
    return Dataset(Y.T.ravel(), np.tile(cells, n_real), np.repeat(np.arange(n_real), n_loc))


@dataclass
class StudyConfig:
    kind: str = "si"
    grid: GridSpec = field(default_factory=lambda: GridSpec.cube(30))
    locations: list = field(default_factory=lambda: [100, 10000, 27000])
    realizations: list = field(default_factory=lambda: [1, 10, 100])
    trials: int = 10
    seed: int = 0
    theta_true: list = None
    fit_kind: str = None
    sigma: float = None
    init: str = "truth"
    maxiter: int = 500
    cells: list = None

    def design(self):
        if self.cells is not None:
            return [tuple(c) for c in self.cells]
        return [(l, r) for l in self.locations for r in self.realizations]

    def truth(self):
        if self.theta_true is not None:
            return AnisotropyModel(self.kind, self.theta_true, self.grid.bounds)
        return make_truth(self.kind, self.grid)


def _run_trial(args):
    cfg, ci, cell, trial = args
    n_loc, n_real = cell
    truth = cfg.truth()
    fit_kind = ModelKind.parse(cfg.fit_kind or cfg.kind)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, ci, trial]))
    data = simulate_data(truth, cfg.grid, n_loc, n_real, rng, cfg.sigma)
    if cfg.init == "truth" and fit_kind is truth.kind:
        init = truth.theta.copy()
        if cfg.sigma is not None:
            init[-1] = -2 * np.log(cfg.sigma)
    else:
        init = default_init(fit_kind, data, cfg.grid)
    t0 = time.perf_counter()
    res = fit(fit_kind, data, cfg.grid, init=init, maxiter=cfg.maxiter)
    return dict(cell=ci, n_loc=n_loc, n_real=n_real, trial=trial, theta=res.theta, loglik=res.loglik,
                converged=res.converged, iterations=res.iterations, seconds=time.perf_counter() - t0)


@dataclass
class StudyReport:
    kind: str
    truth: list
    rows: list
    trials: list

    def rmse(self, n_loc, n_real):
        for r in self.rows:
            if r["n_loc"] == n_loc and r["n_real"] == n_real:
                return r["rmse"]
        raise KeyError((n_loc, n_real))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "n_loc", "n_real", "parameter", "rmse", "n_trials", "n_converged"])
        for r in self.rows:
            for name, v in zip(r["parameters"], r["rmse"]):
                w.writerow([self.kind, r["n_loc"], r["n_real"], name, repr(float(v)), r["n_trials"],
                            r["n_converged"]])
        return buf.getvalue()

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _cell_key(n_loc, grid):
    return grid.n_cells if n_loc in (None, "full") else int(n_loc)


def run_study(cfg, workers=1):
    design = cfg.design()
    jobs = [(cfg, ci, cell, t) for ci, cell in enumerate(design) for t in range(cfg.trials)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_run_trial, jobs))
    else:
        results = [_run_trial(j) for j in jobs]
    truth = cfg.truth()
    kind = (cfg.fit_kind or cfg.kind).lower()
    rows = []
    if kind in TABLE_ROWS and kind == truth.kind.value:
        ref = table_scale(kind, truth.theta)
        for ci, cell in enumerate(design):
            rs = [r for r in results if r["cell"] == ci]
            est = np.array([table_scale(kind, r["theta"]) for r in rs])
            rmse = np.sqrt(np.mean((est - ref) ** 2, axis=0))
            rows.append(dict(n_loc=_cell_key(cell[0], cfg.grid), n_real=int(cell[1]),
                             parameters=TABLE_ROWS[kind], rmse=[float(v) for v in rmse],
                             n_trials=len(rs), n_converged=int(sum(r["converged"] for r in rs)),
                             seconds=float(sum(r["seconds"] for r in rs))))
    return StudyReport(kind=kind, truth=[float(v) for v in truth.theta], rows=rows, trials=results)
