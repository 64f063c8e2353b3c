import enum

import numpy as np

from .errors import OmegaUndefinedError, NotSPDError
from .splines import TensorBasis

FIELD_NAMES = ("log_kappa2", "log_gamma", "vx", "vy", "vz", "rho1", "rho2")
AXIS_EPS = 1e-8


def _omega_frame(v, with_jac=False):
    """Unit vectors n1, n2 spanning the plane orthogonal to v (zero where v = 0).

    Returns n1, n2 (..., 3) and, if requested, their Jacobians d n / d v as
    (..., 3, 3) arrays indexed [component, v component].
    """
    v = np.asarray(v, dtype=float)
    shp = v.shape[:-1]
    vn = np.linalg.norm(v, axis=-1)
    hnorm = np.hypot(v[..., 0], v[..., 1])
    zero = vn == 0
    lock = (hnorm <= AXIS_EPS * vn) & ~zero

    w1 = np.zeros(shp + (3,))
    w1[..., 0] = -v[..., 1]
    w1[..., 1] = v[..., 0]
    dw1 = np.zeros(shp + (3, 3))
    dw1[..., 0, 1] = -1.0
    dw1[..., 1, 0] = 1.0
    if np.any(lock):
        # v close to the z axis: project e_x onto the plane orthogonal to v
        vl = v[lock]
        vv = np.sum(vl * vl, axis=-1)
        ex = np.array([1.0, 0.0, 0.0])
        w1[lock] = ex - (vl[:, :1] / vv[:, None]) * vl
        eye = np.eye(3)
        d = -(vl[:, :, None] * eye[0][None, None, :] + vl[:, 0][:, None, None] * eye[None]) / vv[:, None, None]
        d += 2 * vl[:, 0][:, None, None] * vl[:, :, None] * vl[:, None, :] / vv[:, None, None] ** 2
        dw1[lock] = d

    w2 = np.cross(v, w1)
    dw2 = np.empty(shp + (3, 3))
    for m in range(3):
        em = np.zeros(3)
        em[m] = 1.0
        dw2[..., :, m] = np.cross(em, w1) + np.cross(v, dw1[..., :, m])

    def unit(w, dw):
        nrm = np.linalg.norm(w, axis=-1)
        safe = np.where(nrm > 0, nrm, 1.0)
        n = w / safe[..., None]
        n[zero] = 0.0
        if not with_jac:
            return n, None
        P = np.eye(3) - n[..., :, None] * n[..., None, :]
        dn = np.einsum("...ab,...bm->...am", P, dw) / safe[..., None, None]
        dn[zero] = 0.0
        return n, dn

    n1, dn1 = unit(w1, dw1)
    n2, dn2 = unit(w2, dw2)
    return n1, n2, dn1, dn2


def _check_rho(v, rho1, rho2):
    vn = np.linalg.norm(np.asarray(v, dtype=float), axis=-1)
    bad = (vn == 0) & ((np.asarray(rho1) != 0) | (np.asarray(rho2) != 0))
    if np.any(bad):
        raise OmegaUndefinedError("v = 0 with nonzero rho: the plane orthogonal to v is undefined")


def build_omega(v, rho1, rho2):
    """omega = rho1*w1/|w1| + rho2*w2/|w2| with w1 = (-vy, vx, 0), w2 = v x w1."""
    _check_rho(v, rho1, rho2)
    n1, n2, _, _ = _omega_frame(v)
    rho1 = np.asarray(rho1, dtype=float)[..., None]
    rho2 = np.asarray(rho2, dtype=float)[..., None]
    return rho1 * n1 + rho2 * n2


def build_H(gamma, v, rho1, rho2):
    v = np.asarray(v, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma <= 0):
        raise ValueError("gamma must be positive")
    w = build_omega(v, rho1, rho2)
    return (gamma[..., None, None] * np.eye(3) + v[..., :, None] * v[..., None, :]
            + w[..., :, None] * w[..., None, :])


def H_and_jacobian(log_gamma, v, rho1, rho2):
    """H and dH/d(log gamma, vx, vy, vz, rho1, rho2) with shape (..., 3, 3, 6)."""
    v = np.asarray(v, dtype=float)
    gamma = np.exp(np.asarray(log_gamma, dtype=float))
    rho1 = np.asarray(rho1, dtype=float)
    rho2 = np.asarray(rho2, dtype=float)
    _check_rho(v, rho1, rho2)
    n1, n2, dn1, dn2 = _omega_frame(v, with_jac=True)
    w = rho1[..., None] * n1 + rho2[..., None] * n2
    dw = rho1[..., None, None] * dn1 + rho2[..., None, None] * dn2
    eye = np.eye(3)
    H = gamma[..., None, None] * eye + v[..., :, None] * v[..., None, :] + w[..., :, None] * w[..., None, :]
    J = np.empty(H.shape + (6,))
    J[..., 0] = gamma[..., None, None] * eye
    for m in range(3):
        ev = np.zeros(3)
        ev[m] = 1.0
        dvv = ev[:, None] * v[..., None, :] + v[..., :, None] * ev[None, :]
        dwm = dw[..., :, m]
        J[..., 1 + m] = dvv + dwm[..., :, None] * w[..., None, :] + w[..., :, None] * dwm[..., None, :]
    for q, n in ((4, n1), (5, n2)):
        J[..., q] = n[..., :, None] * w[..., None, :] + w[..., :, None] * n[..., None, :]
    return H, J


def _check_spd(H):
    H = np.asarray(H, dtype=float)
    if H.shape[-2:] != (3, 3):
        raise ValueError("H must be 3x3")
    if not np.allclose(H, np.swapaxes(H, -1, -2), rtol=1e-12, atol=0):
        raise NotSPDError("H is not symmetric")
    if np.any(np.linalg.eigvalsh(H)[..., 0] <= 0):
        raise NotSPDError("H is not positive definite")
    return H


def marginal_variance(kappa2, H):
    H = _check_spd(H)
    kappa2 = np.asarray(kappa2, dtype=float)
    if np.any(kappa2 <= 0):
        raise ValueError("kappa2 must be positive")
    return 1.0 / (8 * np.pi * np.sqrt(kappa2) * np.sqrt(np.linalg.det(H)))


def _inv_sqrt(H):
    lam, U = np.linalg.eigh(H)
    return (U / np.sqrt(lam)[..., None, :]) @ np.swapaxes(U, -1, -2)


def analytic_covariance(kappa2, H, s1, s2):
    """Exponential covariance sigma_m^2 * exp(-kappa |H^{-1/2} (s1 - s2)|)."""
    H = _check_spd(H)
    d = np.asarray(s1, dtype=float) - np.asarray(s2, dtype=float)
    r = np.linalg.norm(d @ _inv_sqrt(H), axis=-1)
    return marginal_variance(kappa2, H) * np.exp(-np.sqrt(kappa2) * r)


def analytic_correlation(kappa2, H, d):
    H = _check_spd(H)
    r = np.linalg.norm(np.asarray(d, dtype=float) @ _inv_sqrt(H), axis=-1)
    return np.exp(-np.sqrt(kappa2) * r)


def principal_ranges(kappa2, H, level=0.05):
    """Distance along each coordinate axis where the correlation drops to `level`."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    H = _check_spd(H)
    G = _inv_sqrt(H)
    return -np.log(level) / (np.sqrt(kappa2) * np.linalg.norm(G, axis=0))


def semi_axes(kappa2, H):
    """Eigenvectors scaled to sqrt(lambda)/kappa: the e^-1 iso-correlation ellipsoid."""
    lam, U = np.linalg.eigh(_check_spd(H))
    return (U * np.sqrt(lam)).T / np.sqrt(kappa2)


class ModelKind(str, enum.Enum):
    SI = "si"
    SA = "sa"
    NA = "na"

    @classmethod
    def parse(cls, s):
        if isinstance(s, cls):
            return s
        try:
            return cls(str(s).lower())
        except ValueError:
            raise ValueError(f"unknown model kind {s!r}; expected si, sa or na") from None

    def n_params(self, m_eff=3):
        return {"si": 3, "sa": 8, "na": 7 * m_eff ** 3 + 1}[self.value]

    def param_names(self, m_eff=3):
        if self is ModelKind.SI:
            return ["log_kappa2", "log_gamma", "log_tau"]
        if self is ModelKind.SA:
            return list(FIELD_NAMES) + ["log_tau"]
        p = m_eff ** 3
        return [f"{g}[{c}]" for g in FIELD_NAMES for c in range(p)] + ["log_tau"]


class AnisotropyModel:
    """Parameter functions of one of the SI / SA / NA flavours.

    theta always ends with log tau_N (noise precision).
    """

    def __init__(self, kind, theta, bounds=None, m_eff=3):
        self.kind = ModelKind.parse(kind)
        self.m_eff = m_eff
        self.theta = np.array(theta, dtype=float)
        n = self.kind.n_params(m_eff)
        if self.theta.shape != (n,):
            raise ValueError(f"{self.kind.name} expects {n} parameters, got {self.theta.shape}")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("non-finite parameter")
        self.basis = None
        if self.kind is ModelKind.NA:
            if bounds is None:
                raise ValueError("NA model needs domain bounds")
            self.basis = TensorBasis(bounds, m_eff)

    @property
    def log_tau(self):
        return self.theta[-1]

    @property
    def tau(self):
        return float(np.exp(self.theta[-1]))

    @property
    def sigma2(self):
        return 1.0 / self.tau

    def constants(self):
        """The seven field values for SI/SA models."""
        t = self.theta
        if self.kind is ModelKind.SI:
            return np.array([t[0], t[1], 0, 0, 0, 0, 0], dtype=float)
        if self.kind is ModelKind.SA:
            return t[:7].copy()
        raise ValueError("NA model has no constant fields")

    def blocks(self):
        p = self.m_eff ** 3
        return self.theta[:-1].reshape(7, p)

    def fields(self, points, F=None):
        """Raw field values (n, 7): log kappa2, log gamma, vx, vy, vz, rho1, rho2."""
        if self.kind is not ModelKind.NA:
            n = len(np.atleast_2d(points)) if F is None else F.shape[0]
            return np.tile(self.constants(), (n, 1))
        if F is None:
            F = self.basis(np.atleast_2d(points))
        return F @ self.blocks().T

    def pullback(self, dfields, F=None):
        """Map a gradient w.r.t. per-point field values (n, 7) to theta[:-1]."""
        dfields = np.asarray(dfields)
        if self.kind is ModelKind.SI:
            return dfields[:, :2].sum(axis=0)
        if self.kind is ModelKind.SA:
            return dfields.sum(axis=0)
        return (F.T @ dfields).T.ravel()

    def evaluate(self, s):
        f = self.fields(np.atleast_2d(s))
        H = build_H(np.exp(f[:, 1]), f[:, 2:5], f[:, 5], f[:, 6])
        k2 = np.exp(f[:, 0])
        if np.asarray(s).ndim == 1:
            return k2[0], H[0]
        return k2, H

    def kappa2(self, s):
        return self.evaluate(s)[0]

    def H(self, s):
        return self.evaluate(s)[1]

    def with_theta(self, theta):
        m = object.__new__(AnisotropyModel)
        m.kind, m.m_eff, m.basis = self.kind, self.m_eff, self.basis
        m.theta = np.array(theta, dtype=float)
        if m.theta.shape != self.theta.shape:
            raise ValueError("parameter length mismatch")
        return m

    @classmethod
    def from_constants(cls, kind, log_kappa2, log_gamma, v=(0, 0, 0), rho=(0, 0), log_tau=0.0,
                       bounds=None, m_eff=3):
        kind = ModelKind.parse(kind)
        c = np.r_[log_kappa2, log_gamma, v, rho]
        if kind is ModelKind.SI:
            th = [log_kappa2, log_gamma, log_tau]
        elif kind is ModelKind.SA:
            th = np.r_[c, log_tau]
        else:
            th = np.r_[np.repeat(c, m_eff ** 3), log_tau]
        return cls(kind, th, bounds, m_eff)

    def to_dict(self):
        d = {"kind": self.kind.value, "theta": [float(x) for x in self.theta],
             "layout": self.kind.param_names(self.m_eff)}
        if self.kind is ModelKind.NA:
            d["m_eff"] = self.m_eff
            d["bounds"] = list(self.basis.bounds)
        return d

    @classmethod
    def from_dict(cls, d, bounds=None):
        kind = ModelKind.parse(d["kind"])
        return cls(kind, d["theta"], d.get("bounds", bounds), d.get("m_eff", 3))


def na_from_sa(sa, bounds, m_eff=3):
    """NA model whose coefficient blocks are constant at the SA values."""
    c = sa.constants()
    return AnisotropyModel(ModelKind.NA, np.r_[np.repeat(c, m_eff ** 3), sa.log_tau], bounds, m_eff)
