"""Marginal log-likelihood of theta, its analytic gradient, and maximization."""
from dataclasses import dataclass, field, asdict
import time

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize

from .anisotropy import AnisotropyModel, ModelKind, na_from_sa
from .errors import NotSPDError, InfeasiblePoint
from .model import DEFAULT_V, get_pattern, St_y, S_apply
from .fvm import get_stencil

LOG2PI = np.log(2 * np.pi)


class LikelihoodWorkspace:
    """Caches grid stencils and symbolic factorizations for repeated evaluation."""

    def __init__(self, grid, kind, dataset, V=DEFAULT_V, boundary="mirror", m_eff=3, penalty=None):
        self.grid = grid
        self.kind = ModelKind.parse(kind)
        self.m_eff = m_eff
        self.dataset = dataset
        dataset.check(grid)
        self.V = float(V)
        self.k = dataset.k
        self.stencil = get_stencil(grid, boundary)
        self.pattern = get_pattern(grid, self.k, boundary)
        self.groups = dataset.groups()
        self.n_total = dataset.n
        self.n_real = sum(len(g.ids) for g in self.groups)
        self.penalty = penalty
        self.n_eval = 0
        self.n_grad = 0
        qptr, qind = self.stencil.q_pattern()
        self._qrows = np.repeat(np.arange(self.stencil.n), np.diff(qptr)).astype(np.int64)
        self._qind = qind.astype(np.int64)
        self._qptr = qptr

    def model(self, theta):
        return AnisotropyModel(self.kind, theta, self.grid.bounds, self.m_eff)

    def _factor(self, data, theta):
        try:
            return self.pattern.factor(data)
        except NotSPDError as e:
            raise InfeasiblePoint(f"precision not positive definite at theta={list(theta)}") from e

    def _outer_on_Q(self, mu_w):
        """sum_r mu_r[i] mu_r[j] over the pattern of Q."""
        out = np.zeros(len(self._qind))
        for c0 in range(0, mu_w.shape[1], 8):
            m = mu_w[:, c0:c0 + 8]
            out += np.einsum("ij,ij->i", m[self._qrows], m[self._qind])
        return out

    def evaluate(self, theta, gradient=True):
        theta = np.asarray(theta, dtype=float)
        model = self.model(theta)
        st, pat = self.stencil, self.pattern
        n, k = st.n, self.k
        tau = model.tau
        k2, Hcol, Jcol = st.evaluate(model, jacobian=gradient)
        adata = -st.AH_data(Hcol)
        adata[st.diag_pos] += self.grid.V * k2
        qdata = st.Q_from_A_data(adata)
        Q = sp.csr_matrix((qdata, self._qind, self._qptr), shape=(n, n))
        prior = pat.prior_data(qdata, self.V)

        fz = self._factor(prior, theta)
        ld_z = fz.logdet()
        W = None
        if gradient:
            W = self.n_real * fz.partial_inverse().store[pat.qpat_in_L]
        del fz

        ll = 0.0
        g_tau = 0.0
        for grp in self.groups:
            Y = grp.Y
            ng, R = grp.n, Y.shape[1]
            fc = self._factor(pat.add_observations(prior, grp, tau), theta)
            mu = fc.solve(tau * St_y(grp, Y, n))
            resid = Y - S_apply(grp, mu, n)
            mw = mu[:n]
            quad = np.sum(mw * (Q @ mw), axis=0)
            if k:
                quad = quad + np.sum(mu[n:] ** 2, axis=0) / self.V
            rss = np.sum(resid ** 2, axis=0)
            ll += np.sum(-0.5 * ng * LOG2PI + 0.5 * ld_z + 0.5 * ng * np.log(tau)
                         - 0.5 * fc.logdet() - 0.5 * quad - 0.5 * tau * rss)
            if gradient:
                pc = fc.partial_inverse()
                W -= R * pc.store[pat.qpat_in_L]
                W -= self._outer_on_Q(mw)
                tr = np.sum(pc.values(grp.cells, grp.cells))
                if k:
                    for c in range(k):
                        bc = pc.values(np.full(ng, n + c), grp.cells)
                        tr += 2 * np.dot(grp.X[:, c], bc)
                    cols = np.arange(n, n + k)
                    Sbb = pc.values(np.repeat(cols, k), np.tile(cols, k)).reshape(k, k)
                    tr += np.einsum("ij,jk,ik->", grp.X, Sbb, grp.X)
                g_tau += np.sum(0.5 * ng - 0.5 * tau * tr - 0.5 * tau * rss)
                del pc
            del fc
        self.n_eval += 1
        if not gradient:
            if self.penalty is not None:
                ll += self.penalty(theta)[0]
            return ll
        self.n_grad += 1
        G = st.grad_A(adata, W)
        grad = np.r_[st.field_gradient(model, G, k2, Jcol), g_tau]
        if self.penalty is not None:
            pv, pg = self.penalty(theta)
            ll += pv
            grad = grad + pg
        return ll, grad

    def value(self, theta):
        return self.evaluate(theta, gradient=False)

    def gradient(self, theta):
        return self.evaluate(theta, gradient=True)[1]


def log_likelihood(kind, theta, dataset, grid, **kw):
    return LikelihoodWorkspace(grid, kind, dataset, **kw).value(theta)


def gradient(kind, theta, dataset, grid, **kw):
    return LikelihoodWorkspace(grid, kind, dataset, **kw).gradient(theta)


# ------------------------------------------------------------------ checking
def fd_check(ws, theta, components=None, step=1e-4, scheme="central"):
    """Analytic gradient against finite differences with relative step.

    scheme "central" is the two-point difference; "richardson" the four-point
    (f(-2h) - 8f(-h) + 8f(h) - f(2h)) / 12h, whose truncation error is O(h^4).
    """
    theta = np.asarray(theta, dtype=float)
    _, g = ws.evaluate(theta)
    comps = range(len(theta)) if components is None else components
    rows = []
    for i in comps:
        h = step * max(1.0, abs(theta[i]))

        def f(k):
            t = theta.copy()
            t[i] += k * h
            return ws.value(t)

        if scheme == "central":
            fd = (f(1) - f(-1)) / (2 * h)
        elif scheme == "richardson":
            fd = (8 * (f(1) - f(-1)) - (f(2) - f(-2))) / (12 * h)
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
        err = abs(g[i] - fd) / max(abs(fd), abs(g[i]), 1e-300)
        rows.append({"index": int(i), "analytic": float(g[i]), "fd": float(fd), "rel_err": float(err)})
    return {"step": step, "scheme": scheme, "components": rows,
            "max_rel_err": max(r["rel_err"] for r in rows)}


# ------------------------------------------------------------------ fitting
@dataclass
class FitResult:
    kind: str
    theta: list
    loglik: float
    grad_norm: float
    iterations: int
    n_eval: int
    converged: bool
    message: str
    wall_time: float
    layout: list = field(default_factory=list)
    history: list = field(default_factory=list)

    @property
    def log_tau(self):
        return self.theta[-1]

    def to_dict(self):
        d = asdict(self)
        d.pop("history")
        return d

    def model(self, bounds=None, m_eff=3):
        return AnisotropyModel(self.kind, self.theta, bounds, m_eff)


def default_init(kind, dataset, grid, m_eff=3):
    """Starting point from the data variance and a range of 1/5 of the domain."""
    kind = ModelKind.parse(kind)
    y = dataset.y
    var = float(np.var(y)) if len(y) > 1 else 1.0
    var = max(var, 1e-12)
    r0 = 0.2 * float(np.mean(grid.upper - grid.lower))
    s2 = 0.9 * var
    # sigma^2 = 1/(8 pi kappa gamma^1.5) and r0 = ln(20) sqrt(gamma) / kappa
    gamma = np.sqrt(r0 / (8 * np.pi * np.log(20) * s2))
    kappa = np.log(20) * np.sqrt(gamma) / r0
    lk, lg, lt = 2 * np.log(kappa), np.log(gamma), -np.log(0.1 * var)
    if kind is ModelKind.SI:
        return np.array([lk, lg, lt])
    a = np.sqrt(gamma)
    # v = rho = 0 is a stationary point of the likelihood, so start slightly off it
    c = np.array([lk, lg, 0.5 * a, 0.3 * a, 0.1 * a, 0.3 * a, 0.2 * a])
    if kind is ModelKind.SA:
        return np.r_[c, lt]
    return np.r_[np.repeat(c, m_eff ** 3), lt]


def fit(kind, dataset, grid, init=None, maxiter=500, gtol=1e-5, ftol=1e-9, workspace=None,
        m_eff=3, V=DEFAULT_V, boundary="mirror", verbose=False):
    kind = ModelKind.parse(kind)
    ws = workspace or LikelihoodWorkspace(grid, kind, dataset, V=V, boundary=boundary, m_eff=m_eff)
    if init is None:
        init = default_init(kind, dataset, grid, m_eff)
    x0 = np.asarray(init, dtype=float)
    scale = 1.0 / max(ws.n_total, 1)
    cache = {}
    best = {"x": None, "ll": -np.inf, "g": None}
    t0 = time.perf_counter()

    def fg(x):
        key = x.tobytes()
        if key not in cache:
            try:
                ll, g = ws.evaluate(x)
            except InfeasiblePoint:
                ll, g = -np.inf, np.zeros_like(x)
            cache.clear()
            cache[key] = (ll, g)
            if ll > best["ll"]:
                best.update(x=x.copy(), ll=ll, g=g.copy())
        ll, g = cache[key]
        if not np.isfinite(ll):
            return 1e30, np.zeros_like(x)
        return -ll * scale, -g * scale

    history = []
    state = {"conv": False, "msg": ""}

    def converged(ll, g):
        if np.max(np.abs(g)) <= gtol * max(1.0, abs(ll)):
            return "gradient tolerance reached"
        if len(history) > 5 and abs(history[-1] - history[-6]) <= ftol * max(abs(history[-1]), 1e-300):
            return "relative change tolerance reached"
        return ""

    fg(x0)
    ll0, g0 = cache[x0.tobytes()]
    if not np.isfinite(ll0):
        raise InfeasiblePoint("initial parameters give a non positive definite precision")
    history.append(ll0)
    msg0 = converged(ll0, g0)
    if msg0:
        state.update(conv=True, msg=msg0)

    def callback(intermediate_result):
        x = intermediate_result.x
        ll, g = cache.get(x.tobytes(), (None, None))
        if ll is None:
            fg(x)
            ll, g = cache[x.tobytes()]
        if history and ll < history[-1] - 1e-9 * max(1.0, abs(history[-1])):
            raise AssertionError("optimizer accepted a step that decreased the log-likelihood")
        history.append(ll)
        if verbose:
            print(f"iter {len(history) - 1}: loglik {ll:.6f} |g|max {np.max(np.abs(g)):.3e}")
        m = converged(ll, g)
        if m:
            state.update(conv=True, msg=m)
            raise StopIteration

    res = None
    if not state["conv"]:
        res = minimize(fg, x0, jac=True, method="L-BFGS-B", callback=callback,
                       options={"maxiter": maxiter, "maxcor": 20, "ftol": 0.0, "gtol": 0.0,
                                "maxls": 40})
    x, ll, g = best["x"], best["ll"], best["g"]
    if not state["conv"]:
        m = converged(ll, g)
        state.update(conv=bool(m), msg=m or (res.message if res is not None else ""))
    return FitResult(kind=kind.value, theta=[float(v) for v in x], loglik=float(ll),
                     grad_norm=float(np.max(np.abs(g))), iterations=len(history) - 1,
                     n_eval=ws.n_eval, converged=bool(state["conv"]), message=str(state["msg"]),
                     wall_time=time.perf_counter() - t0, layout=kind.param_names(m_eff),
                     history=[float(h) for h in history])


def fit_nested(dataset, grid, kind="na", init=None, **kw):
    """SI -> SA -> NA warm starts; returns the list of fits along the chain."""
    kind = ModelKind.parse(kind)
    out = []
    si = fit("si", dataset, grid, init=init if kind is ModelKind.SI else None, **kw)
    out.append(si)
    if kind is ModelKind.SI:
        return out
    lk, lg, lt = si.theta
    a = np.exp(0.5 * lg)
    sa0 = np.array([lk, lg, 0.5 * a, 0.3 * a, 0.1 * a, 0.3 * a, 0.2 * a, lt])
    sa = fit("sa", dataset, grid, init=sa0, **kw)
    out.append(sa)
    if kind is ModelKind.SA:
        return out
    m_eff = kw.get("m_eff", 3)
    na0 = na_from_sa(AnisotropyModel("sa", sa.theta), grid.bounds, m_eff).theta
    out.append(fit("na", dataset, grid, init=na0, **kw))
    return out
