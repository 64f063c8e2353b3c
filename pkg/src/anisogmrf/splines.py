import numpy as np
from scipy.interpolate import BSpline

from .errors import DomainError, RankDeficientError

_AXES = "xyz"


class Basis1D:
    """Second-order B-splines on [a, b] with zero end slopes.

    Raw splines live on uniform knots extended two spacings past each end, so
    m_eff + 2 raw functions overlap [a, b]. Summing the first two and the last
    two raw functions imposes alpha_0 = alpha_1 and alpha_{-2} = alpha_{-1},
    leaving m_eff free functions.
    """

    order = 2

    def __init__(self, a, b, m_eff=3):
        if not b > a:
            raise ValueError("need b > a")
        if m_eff < 2:
            raise ValueError("m_eff must be >= 2")
        self.a, self.b, self.m_eff = float(a), float(b), int(m_eff)
        n_int = self.m_eff
        dt = (self.b - self.a) / n_int
        self.knots = self.a + dt * np.arange(-self.order, n_int + self.order + 1)
        self.knots[self.order] = self.a
        self.knots[n_int + self.order] = self.b
        self.n_raw = len(self.knots) - self.order - 1
        fold = np.zeros((self.n_raw, self.m_eff))
        fold[0, 0] = fold[1, 0] = 1.0
        for c in range(1, self.m_eff - 1):
            fold[c + 1, c] = 1.0
        fold[-1, -1] = fold[-2, -1] = 1.0
        self.fold = fold

    def _clip(self, t):
        t = np.asarray(t, dtype=float)
        tol = 1e-10 * (self.b - self.a)
        if not np.all(np.isfinite(t)) or np.any(t < self.a - tol) or np.any(t > self.b + tol):
            raise DomainError(f"evaluation outside [{self.a}, {self.b}]")
        return np.clip(t, self.a, self.b)

    def raw(self, t):
        t = self._clip(np.atleast_1d(t))
        return BSpline.design_matrix(t, self.knots, self.order).toarray()

    def __call__(self, t):
        return self.raw(t) @ self.fold

    def derivative(self, t):
        t = self._clip(np.atleast_1d(t))
        out = np.empty((len(t), self.n_raw))
        for c in range(self.n_raw):
            coef = np.zeros(self.n_raw)
            coef[c] = 1.0
            out[:, c] = BSpline(self.knots, coef, self.order, extrapolate=False).derivative()(t)
        return np.nan_to_num(out) @ self.fold


class TensorBasis:
    """Tensor product of three Basis1D; function (i,j,k) has index i*my*mz + j*mz + k."""

    def __init__(self, bounds, m_eff=3):
        bounds = tuple(float(x) for x in bounds)
        self.bounds = bounds
        self.axes = [Basis1D(bounds[2 * d], bounds[2 * d + 1], m_eff) for d in range(3)]
        self.m = tuple(b.m_eff for b in self.axes)

    @classmethod
    def for_grid(cls, grid, m_eff=3):
        return cls(grid.bounds, m_eff)

    @property
    def size(self):
        return self.m[0] * self.m[1] * self.m[2]

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        single = s.ndim == 1
        s = np.atleast_2d(s)
        try:
            bx, by, bz = (self.axes[d](s[:, d]) for d in range(3))
        except DomainError as e:
            raise DomainError(f"point outside the spline domain: {e}") from None
        f = bx[:, :, None, None] * by[:, None, :, None] * bz[:, None, None, :]
        f = f.reshape(len(s), -1)
        return f[0] if single else f

    def eval_basis(self, s):
        return self(s)

    def project(self, points, values, weights=None):
        return project(self, points, values)


class SplineField:
    def __init__(self, basis, coef):
        coef = np.asarray(coef, dtype=float)
        if coef.shape != (basis.size,):
            raise ValueError(f"expected {basis.size} coefficients, got {coef.shape}")
        self.basis = basis
        self.coef = coef

    def __call__(self, s):
        return self.basis(s) @ self.coef

    eval = __call__


def project(basis, points, values):
    """Least-squares spline coefficients for values sampled at points."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    values = np.asarray(values, dtype=float)
    for d, b in enumerate(basis.axes):
        r = np.linalg.matrix_rank(b(np.unique(points[:, d])))
        if r < b.m_eff:
            raise RankDeficientError(
                f"sample points do not resolve the {_AXES[d]} axis basis (rank {r} < {b.m_eff})",
                axis=_AXES[d],
            )
    F = basis(points)
    coef, *_ = np.linalg.lstsq(F, values, rcond=None)
    return coef
