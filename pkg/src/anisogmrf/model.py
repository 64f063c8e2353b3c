"""Observation model y = A w + X beta + eps, z = (w, beta), and conditioning."""
from dataclasses import dataclass
import functools

import numpy as np
import scipy.sparse as sp

from .errors import DataError, NotSPDError, InfeasiblePoint
from .fvm import get_stencil
from .sparsela import SymbolicFactor, CholeskyFactor, nested_dissection

DEFAULT_V = 1e4
FEW_TARGETS = 100


@dataclass
class Dataset:
    """Observations at grid cells; rows with the same realization id share one field."""

    y: np.ndarray
    cells: np.ndarray
    realization: np.ndarray = None
    X: np.ndarray = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.cells = np.asarray(self.cells, dtype=np.int64).ravel()
        n = len(self.y)
        if len(self.cells) != n:
            raise DataError("y and cells differ in length")
        if not np.all(np.isfinite(self.y)):
            bad = int(np.nonzero(~np.isfinite(self.y))[0][0])
            raise DataError(f"non-finite observation at row {bad}", row=bad)
        self.realization = (np.zeros(n, dtype=np.int64) if self.realization is None
                            else np.asarray(self.realization, dtype=np.int64).ravel())
        if len(self.realization) != n:
            raise DataError("realization ids differ in length from y")
        if self.X is None:
            self.X = np.zeros((n, 0))
        X = np.asarray(self.X, dtype=float)
        self.X = X.reshape(n, -1) if n else X.reshape(0, X.shape[-1] if X.ndim == 2 else 0)

    @classmethod
    def from_locations(cls, grid, locations, y, realization=None, X=None):
        loc = np.asarray(locations, dtype=float).reshape(-1, 3)
        return cls(y, grid.locate_index(loc), realization, X)

    @classmethod
    def full_grid(cls, grid, Y, X=None):
        """Every cell observed once per column of Y (shape n_cells x R)."""
        Y = np.asarray(Y, dtype=float).reshape(grid.n_cells, -1)
        R = Y.shape[1]
        cells = np.tile(np.arange(grid.n_cells), R)
        real = np.repeat(np.arange(R), grid.n_cells)
        Xf = None if X is None else np.tile(np.asarray(X).reshape(grid.n_cells, -1), (R, 1))
        return cls(Y.T.ravel(), cells, real, Xf)

    @property
    def n(self):
        return len(self.y)

    @property
    def k(self):
        return self.X.shape[1]

    def check(self, grid):
        if len(self.cells) and (self.cells.min() < 0 or self.cells.max() >= grid.n_cells):
            raise DataError("cell index outside the grid")

    def groups(self):
        """Realizations grouped by identical (cells, X) designs."""
        out = {}
        for r in np.unique(self.realization):
            rows = np.nonzero(self.realization == r)[0]
            rows = rows[np.argsort(self.cells[rows], kind="stable")]
            c, X = self.cells[rows], self.X[rows]
            key = (c.tobytes(), X.tobytes())
            if key not in out:
                out[key] = ObservationGroup(c, X, [], [])
            out[key].ids.append(int(r))
            out[key].ys.append(self.y[rows])
        return list(out.values())


@dataclass
class ObservationGroup:
    cells: np.ndarray
    X: np.ndarray
    ids: list
    ys: list

    @property
    def Y(self):
        return np.column_stack(self.ys) if self.ys else np.zeros((len(self.cells), 0))

    @property
    def n(self):
        return len(self.cells)

    def counts(self, n_cells):
        return np.bincount(self.cells, minlength=n_cells).astype(float)


def build_A(dataset, grid):
    dataset.check(grid)
    n = dataset.n
    return sp.csr_matrix((np.ones(n), (np.arange(n), dataset.cells)), shape=(n, grid.n_cells))


class AugmentedPattern:
    """Symmetric pattern of Q_C: pattern(Q) plus k dense covariate rows/columns."""

    def __init__(self, stencil, k, leaf=64):
        self.stencil = stencil
        n = stencil.n
        self.n, self.k = n, k
        qptr, qind = stencil.q_pattern()
        self.q_indptr, self.q_indices = qptr, qind
        if k == 0:
            self.indptr, self.indices = qptr, qind
            self.q_pos = np.arange(len(qind))
        else:
            tot = n + k
            cnt = np.r_[np.diff(qptr) + k, np.full(k, tot)]
            indptr = np.r_[0, np.cumsum(cnt)]
            indices = np.empty(indptr[-1], dtype=np.int64)
            rowsQ = np.repeat(np.arange(n), np.diff(qptr))
            # rows of the field block: Q columns followed by the k covariate columns
            shift = np.repeat(indptr[:n] - qptr[:n], np.diff(qptr))
            self.q_pos = np.arange(len(qind)) + shift
            indices[self.q_pos] = qind
            tail = indptr[1:n + 1, None] - k + np.arange(k)[None, :]
            indices[tail.ravel()] = np.tile(np.arange(n, tot), n)
            indices[indptr[n]:] = np.tile(np.arange(tot), k)
            self.indptr, self.indices = indptr, indices
            self.wb_pos = tail                                     # (n, k): entry (l, n+c)
            self.bw_pos = (indptr[n:n + k, None] + np.arange(n)[None, :])  # (k, n): entry (n+c, l)
            self.bb_pos = indptr[n:n + k, None] + n + np.arange(k)[None, :]
        rows = np.repeat(np.arange(n), np.diff(qptr))
        diag = rows == qind
        self.diag_pos = self.q_pos[np.nonzero(diag)[0]]
        self.size = n + k
        self.nnz = len(self.indices)
        grid = stencil.grid
        perm, sn_ptr = nested_dissection(grid.shape, reach=2, leaf=leaf, extra=k)
        self.symbolic = SymbolicFactor(self.indptr, self.indices, perm, sn_ptr)
        # positions of the Q pattern inside the selected inverse storage
        self.qpat_in_L = self.symbolic.positions(rows, qind)

    def prior_data(self, Qdata, V):
        data = np.zeros(self.nnz)
        data[self.q_pos] = Qdata
        if self.k:
            data[self.bb_pos.ravel()] = (np.eye(self.k) / V).ravel()
        return data

    def add_observations(self, data, group, tau):
        data = data.copy()
        data[self.diag_pos] += tau * group.counts(self.n)
        if self.k:
            AX = np.zeros((self.n, self.k))
            np.add.at(AX, group.cells, group.X)
            data[self.wb_pos.ravel()] += tau * AX.ravel()
            data[self.bw_pos.ravel()] += tau * AX.T.ravel()
            data[self.bb_pos.ravel()] += tau * (group.X.T @ group.X).ravel()
        return data

    def matrix(self, data):
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.size, self.size))

    def factor(self, data):
        return CholeskyFactor(self.symbolic, data)


@functools.lru_cache(maxsize=8)
def get_pattern(grid, k, boundary="mirror"):
    return AugmentedPattern(get_stencil(grid, boundary), k)


def St_y(group, Y, n):
    """S^T Y for the group's design, shape (n + k, R)."""
    R = Y.shape[1]
    out = np.zeros((n + group.X.shape[1], R))
    np.add.at(out, group.cells, Y)
    if group.X.shape[1]:
        out[n:] = group.X.T @ Y
    return out


def S_apply(group, mu, n):
    """S mu for mu of shape (n + k, R)."""
    out = mu[group.cells]
    if group.X.shape[1]:
        out = out + group.X @ mu[n:]
    return out


class LatentSpec:
    """Prior N(0, Q_z^{-1}) on z = (w, beta) with Q_z = blockdiag(Q, I_k / V)."""

    def __init__(self, grid, model, k=0, V=DEFAULT_V, boundary="mirror"):
        self.grid, self.model, self.k, self.V = grid, model, int(k), float(V)
        self.boundary = boundary
        self.stencil = get_stencil(grid, boundary)
        self.pattern = get_pattern(grid, self.k, boundary)
        self._Qdata = None

    @property
    def Qdata(self):
        if self._Qdata is None:
            self._Qdata = self.stencil.Q_from_A_data(self.stencil.assemble_A_data(self.model))
        return self._Qdata

    def Q(self):
        st = self.stencil
        ptr, ind = st.q_pattern()
        return sp.csr_matrix((self.Qdata, ind, ptr), shape=(st.n, st.n))

    def Qz_data(self):
        return self.pattern.prior_data(self.Qdata, self.V)

    def Qz(self):
        return self.pattern.matrix(self.Qz_data())

    def prior_factor(self):
        try:
            return self.pattern.factor(self.Qz_data())
        except NotSPDError as e:
            raise NotSPDError(f"{e}; parameters {list(self.model.theta)}", pivot=e.pivot,
                              params=list(self.model.theta)) from None

    def sample(self, n_samples=1, rng=None):
        """Draws of the field w (n_cells x n_samples)."""
        rng = np.random.default_rng(rng)
        fac = self.prior_factor()
        z = rng.standard_normal((self.pattern.size, n_samples))
        x = fac.sample(z)
        return x[: self.grid.n_cells]


class ConditionalResult:
    def __init__(self, latent, dataset, sigma2, groups, factors, mu, ids):
        self.latent = latent
        self.dataset = dataset
        self.sigma2 = sigma2
        self.groups = groups
        self.factors = factors
        self.mu = mu
        self.ids = ids
        self._pinv = {}

    @property
    def mean(self):
        """mu_C; a vector for a single realization, else (l + k, R)."""
        cols = [self.mu[r] for r in self.ids]
        if len(cols) == 1:
            return cols[0]
        return np.column_stack(cols)

    def factor(self, realization=None):
        return self.factors[self._group_index(realization)]

    def _group_index(self, realization):
        if realization is None:
            realization = self.ids[0]
        for gi, g in enumerate(self.groups):
            if realization in g.ids:
                return gi
        if not self.groups:
            return 0
        raise KeyError(f"unknown realization {realization}")

    def Q_C(self, realization=None):
        gi = self._group_index(realization)
        data = self.latent.Qz_data()
        if self.groups:
            data = self.latent.pattern.add_observations(data, self.groups[gi], 1.0 / self.sigma2)
        return self.latent.pattern.matrix(data)

    def _partial(self, gi):
        if gi not in self._pinv:
            self._pinv[gi] = self.factors[gi].partial_inverse()
        return self._pinv[gi]

    def predict(self, targets, mode="latent", realization=None, X=None, grid_targets=False):
        """Predictive mean and variance at target locations (or cell indices if grid_targets)."""
        if mode not in ("latent", "observation"):
            raise ValueError("mode must be 'latent' or 'observation'")
        lat = self.latent
        n, k = lat.grid.n_cells, lat.k
        cells = (np.asarray(targets, dtype=np.int64).ravel() if grid_targets
                 else lat.grid.locate_index(np.asarray(targets, dtype=float).reshape(-1, 3)))
        nt = len(cells)
        if k:
            if X is None:
                raise ValueError("covariates for targets are required")
            X = np.asarray(X, dtype=float).reshape(nt, k)
        gi = self._group_index(realization)
        mu = self.mu[realization if realization is not None else self.ids[0]]
        mean = mu[cells] + (X @ mu[n:] if k else 0.0)
        fac = self.factors[gi]
        if nt >= FEW_TARGETS:
            pi = self._partial(gi)
            var = pi.values(cells, cells)
            if k:
                cols = np.arange(n, n + k)
                # Sigma_{beta, cell} and Sigma_{beta, beta}; beta is dense-coupled so both are in the pattern
                Sbc = np.stack([pi.values(np.full(nt, n + c), cells) for c in range(k)], axis=1)
                Sbb = pi.values(np.repeat(cols, k), np.tile(cols, k)).reshape(k, k)
                var = var + 2 * np.sum(X * Sbc, axis=1) + np.einsum("ij,jk,ik->i", X, Sbb, X)
        else:
            T = np.zeros((n + k, nt))
            T[cells, np.arange(nt)] = 1.0
            if k:
                T[n:] = X.T
            var = np.sum(T * fac.solve(T), axis=0) if nt else np.zeros(0)
        if mode == "observation":
            var = var + self.sigma2
        return mean, var


def condition(latent, dataset, sigma2):
    """Posterior of z given data, one field per realization."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    if dataset.k != latent.k:
        raise ValueError(f"dataset has {dataset.k} covariates, latent spec expects {latent.k}")
    dataset.check(latent.grid)
    tau = 1.0 / sigma2
    n = latent.grid.n_cells
    pat = latent.pattern
    prior = latent.Qz_data()
    groups = dataset.groups() if dataset.n else []
    factors, mu, ids = [], {}, []
    for g in groups:
        fac = pat.factor(pat.add_observations(prior, g, tau))
        m = fac.solve(tau * St_y(g, g.Y, n))
        factors.append(fac)
        for c, r in enumerate(g.ids):
            mu[r] = m[:, c]
            ids.append(r)
    if not groups:
        factors.append(pat.factor(prior))
        mu[0] = np.zeros(pat.size)
        ids.append(0)
    return ConditionalResult(latent, dataset, sigma2, groups, factors, mu, sorted(ids))


def predict(conditional, targets, mode="latent", **kw):
    return conditional.predict(targets, mode=mode, **kw)
