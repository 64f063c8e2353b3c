"""AR(1) innovations from a gridded series, prior fitting, and sequential scoring."""
from dataclasses import dataclass
import warnings

import numpy as np
from scipy.stats import norm

from .anisotropy import AnisotropyModel, ModelKind, na_from_sa
from .inference import fit, default_init
from .model import Dataset, LatentSpec, condition
from .splines import TensorBasis, project


@dataclass
class FieldSeries:
    grid: object
    Z: np.ndarray      # (T+1, n_cells)
    dt: float = 1.0

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=float)
        if self.Z.ndim != 2 or self.Z.shape[1] != self.grid.n_cells:
            raise ValueError("series slices must have one value per grid cell")
        if not np.all(np.isfinite(self.Z)):
            raise ValueError("series contains non-finite values")

    @property
    def T(self):
        return self.Z.shape[0] - 1


@dataclass
class AR1Decomposition:
    grid: object
    phi: np.ndarray
    innovations: np.ndarray   # (T, n_cells)
    mu: np.ndarray


def ar1_decompose(series):
    Z = series.Z
    if series.T < 1:
        raise ValueError("need at least two time slices")
    num = np.sum(Z[1:] * Z[:-1], axis=0)
    den = np.sum(Z[:-1] ** 2, axis=0)
    zero = den == 0
    if np.any(zero):
        warnings.warn(f"{int(zero.sum())} cells have an all-zero history; their AR(1) coefficient is set to 0")
    phi = np.where(zero, 0.0, num / np.where(zero, 1.0, den))
    eps = Z[1:] - phi * Z[:-1]
    return AR1Decomposition(series.grid, phi, eps, Z.mean(axis=0))


@dataclass
class PriorModel:
    grid: object
    mu: np.ndarray
    model: AnisotropyModel
    sigma2_meas: float = None
    fit: object = None

    def latent(self):
        return LatentSpec(self.grid, self.model)


def fit_prior(decomp, kind="sa", init=None, sa_prior=None, maxiter=500):
    """Fit SA or NA to the innovations treated as independent full-grid realizations."""
    kind = ModelKind.parse(kind)
    grid = decomp.grid
    data = Dataset.full_grid(grid, decomp.innovations.T)
    if init is None:
        if kind is ModelKind.NA:
            if sa_prior is None:
                sa_prior = fit_prior(decomp, "sa", maxiter=maxiter)
            init = na_from_sa(sa_prior.model, grid.bounds).theta
        else:
            init = default_init(kind, data, grid)
    res = fit(kind, data, grid, init=init, maxiter=maxiter)
    model = AnisotropyModel(kind, res.theta, grid.bounds)
    return PriorModel(grid, decomp.mu.copy(), model, None, res)


# ---------------------------------------------------------------- observations
@dataclass
class SegmentedObservations:
    """Raw samples grouped by segment; pooled per grid cell when conditioning."""

    grid: object
    segment: np.ndarray
    cells: np.ndarray
    values: np.ndarray

    @classmethod
    def from_points(cls, grid, segment, points, values):
        return cls(grid, np.asarray(segment, dtype=np.int64), grid.locate_index(np.asarray(points)),
                   np.asarray(values, dtype=float))

    @property
    def ids(self):
        return list(np.unique(self.segment))

    def pooled(self, segs):
        """Cell averages over the distinct raw samples of the given segments.

        A sample repeated in several segments (same cell, same value) counts once.
        """
        sel = np.isin(self.segment, segs)
        cv = np.unique(np.column_stack([self.cells[sel], self.values[sel]]), axis=0)
        c, v = cv[:, 0].astype(np.int64), cv[:, 1]
        cells, inv = np.unique(c, return_inverse=True)
        mean = np.bincount(inv, v) / np.bincount(inv)
        return cells, mean

    def measurement_variance(self):
        """Mean per-cell sample variance over cells with at least two raw samples."""
        cells, inv, cnt = np.unique(self.cells, return_inverse=True, return_counts=True)
        s1 = np.bincount(inv, self.values)
        s2 = np.bincount(inv, self.values ** 2)
        ok = cnt >= 2
        if not np.any(ok):
            raise ValueError("no cell has two or more samples; cannot estimate measurement variance")
        var = (s2[ok] - s1[ok] ** 2 / cnt[ok]) / (cnt[ok] - 1)
        return float(np.mean(np.maximum(var, 0.0)))


def crps_gaussian(y, mu, sigma):
    """Closed-form CRPS of N(mu, sigma^2) at y."""
    y, mu, sigma = np.broadcast_arrays(np.asarray(y, float), np.asarray(mu, float), np.asarray(sigma, float))
    scalar = y.ndim == 0
    y, mu, sigma = np.atleast_1d(y, mu, sigma)
    out = np.abs(y - mu).astype(float)
    pos = sigma > 0
    z = (y[pos] - mu[pos]) / sigma[pos]
    out[pos] = sigma[pos] * (z * (2 * norm.cdf(z) - 1) + 2 * norm.pdf(z) - 1 / np.sqrt(np.pi))
    return float(out[0]) if scalar else out


def sequential_evaluate(prior, obs, n_perm=10, seed=0, sigma2=None):
    """Score predictions of held-out segments as more segments are observed.

    Returns rows: permutation, prefix size, observed proportion, held-out count, RMSE, mean CRPS.
    """
    segs = obs.ids
    if len(segs) < 2:
        raise ValueError("need at least two segments")
    sigma2 = obs.measurement_variance() if sigma2 is None else float(sigma2)
    lat = prior.latent()
    n_all = len(np.unique(obs.cells))
    rows = []
    for p in range(n_perm):
        rng = np.random.default_rng(np.random.SeedSequence([seed, p]))
        order = list(rng.permutation(segs))
        for m in range(len(order)):
            seen, rest = order[:m], order[m:]
            ocells, oy = obs.pooled(seen) if seen else (np.zeros(0, np.int64), np.zeros(0))
            hcells, hy = obs.pooled(rest)
            keep = ~np.isin(hcells, ocells)
            hcells, hy = hcells[keep], hy[keep]
            if len(hcells) == 0:
                continue
            data = Dataset(oy - prior.mu[ocells], ocells)
            post = condition(lat, data, sigma2)
            mean, var = post.predict(hcells, mode="observation", grid_targets=True)
            mean = mean + prior.mu[hcells]
            rmse = float(np.sqrt(np.mean((mean - hy) ** 2)))
            crps = float(np.mean(crps_gaussian(hy, mean, np.sqrt(var))))
            rows.append((p, m, len(ocells) / n_all, len(hcells), rmse, crps))
    return rows


def summarize(rows, bins=(0.0, 0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95, 1.0)):
    """Mean and sd of RMSE / CRPS per observed-proportion bin."""
    r = np.array([x[2:] for x in rows], dtype=float)
    out = []
    edges = np.asarray(bins)
    idx = np.clip(np.searchsorted(edges, r[:, 0], side="right") - 1, 0, len(edges) - 2)
    idx[r[:, 0] == 0] = -1
    groups = [(-1, "0")] + [(b, f"[{edges[b]:.2f},{edges[b + 1]:.2f})") for b in range(len(edges) - 1)]
    for b, label in groups:
        sel = idx == b
        if not np.any(sel):
            continue
        s = r[sel]
        out.append(dict(bin=label, n=int(sel.sum()), proportion=float(s[:, 0].mean()),
                        rmse_mean=float(s[:, 2].mean()), rmse_sd=float(s[:, 2].std()),
                        crps_mean=float(s[:, 3].mean()), crps_sd=float(s[:, 3].std())))
    return out


# ---------------------------------------------------------------- synthetic data
def vortex_noise_model(grid, range_scale=3.0, amplitude=1.0, m_eff=3):
    """The simulation-study vortex with every correlation range stretched by range_scale."""
    from .simstudy import vortex_fields
    basis = TensorBasis(grid.bounds, m_eff)
    pts = grid.cell_centers()
    vals = vortex_fields(pts, grid.bounds, amplitude)
    vals[:, 0] -= 2 * np.log(range_scale)
    coef = np.concatenate([project(basis, pts, vals[:, g]) for g in range(7)])
    return AnisotropyModel(ModelKind.NA, np.r_[coef, 0.0], grid.bounds, m_eff)


def synthetic_series(grid, T=143, seed=0, phi=0.8, noise_model=None, base=30.0, plume=6.0):
    """Plume-like series: a tidally advected freshwater blob plus AR(1) spatial noise.

    z_t = base - plume * blob_t + x_t with x_t = phi x_{t-1} + e_t, e_t ~ GMRF(noise_model).
    The default noise is the stretched vortex of vortex_noise_model.
    """
    rng = np.random.default_rng(seed)
    if noise_model is None:
        noise_model = vortex_noise_model(grid)
    lat = LatentSpec(grid, noise_model)
    E = lat.sample(T + 1, rng).T
    c = grid.cell_centers()
    lo, hi = grid.lower, grid.upper
    width = 0.2 * (hi[0] - lo[0])
    depth = (c[:, 2] - lo[2]) / (hi[2] - lo[2])
    Z = np.empty((T + 1, grid.n_cells))
    x = E[0] / np.sqrt(1 - phi ** 2)
    for t in range(T + 1):
        if t:
            x = phi * x + E[t]
        ang = 2 * np.pi * t / 72.0
        cx = lo[0] + (0.35 + 0.15 * np.cos(ang)) * (hi[0] - lo[0])
        cy = lo[1] + (0.35 + 0.15 * np.sin(ang)) * (hi[1] - lo[1])
        blob = np.exp(-((c[:, 0] - cx) ** 2 + (c[:, 1] - cy) ** 2) / (2 * width ** 2)) * np.exp(-2 * depth)
        Z[t] = base - plume * blob + x
    return FieldSeries(grid, Z)


def synthetic_segments(grid, field, n_segments=9, seed=0, sigma=0.05, samples_per_cell=3, spread=0.15):
    """Crossing yo-yo survey lines sampling `field` (per cell) with Gaussian noise.

    Each line passes within `spread` (fraction of the width) of the domain centre
    at a random heading and runs to the lateral boundary on both sides while the
    depth oscillates through the water column, so later lines cross earlier ones.
    """
    rng = np.random.default_rng(seed)
    lo, hi = grid.lower, grid.upper
    L = hi - lo
    mid = 0.5 * (lo + hi)
    pad = 0.02 * L[:2]
    seg, pts, vals = [], [], []
    for s in range(n_segments):
        c = mid[:2] + rng.uniform(-spread, spread, 2) * L[:2]
        ang = rng.uniform(0, np.pi)
        d = np.array([np.cos(ang), np.sin(ang)])
        # distance along +-d to the padded box
        with np.errstate(divide="ignore"):
            t_hi = np.where(d > 0, (hi[:2] - pad - c) / d, np.where(d < 0, (lo[:2] + pad - c) / d, np.inf))
            t_lo = np.where(d > 0, (lo[:2] + pad - c) / d, np.where(d < 0, (hi[:2] - pad - c) / d, -np.inf))
        a, b = c + t_lo.max() * d, c + t_hi.min() * d
        n = max(2, int(samples_per_cell * np.linalg.norm(b - a) / np.min(grid.h[:2])))
        t = np.linspace(0, 1, n)
        z = lo[2] + L[2] * (0.5 + 0.45 * np.sin(rng.uniform(0, 2 * np.pi) + 2 * np.pi * 2 * t))
        p = np.column_stack([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), z])
        seg.append(np.full(n, s))
        pts.append(p)
        vals.append(field[grid.locate_index(p)] + sigma * rng.standard_normal(n))
    return np.concatenate(seg), np.concatenate(pts), np.concatenate(vals)
