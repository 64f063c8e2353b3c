"""Slow, literal reference implementations used only by the tests."""
import numpy as np


def cox_de_boor(knots, p, i, x):
    """Value of the i-th B-spline of degree p at x (half-open support, right end closed)."""
    if p == 0:
        last = knots[-1]
        if knots[i] <= x < knots[i + 1] or (x == last and knots[i] < x <= knots[i + 1]):
            return 1.0
        return 0.0
    out = 0.0
    d1 = knots[i + p] - knots[i]
    d2 = knots[i + p + 1] - knots[i + 1]
    if d1 > 0:
        out += (x - knots[i]) / d1 * cox_de_boor(knots, p - 1, i, x)
    if d2 > 0:
        out += (knots[i + p + 1] - x) / d2 * cox_de_boor(knots, p - 1, i + 1, x)
    return out


def folded_basis_1d(a, b, m, x):
    """Degree 2, knots extended two spacings past [a, b], first two / last two summed."""
    h = (b - a) / m
    knots = [a + h * t for t in range(-2, m + 3)]
    knots[2], knots[m + 2] = a, b
    raw = [cox_de_boor(knots, 2, i, x) for i in range(m + 2)]
    return [raw[0] + raw[1]] + raw[2:m] + [raw[m] + raw[m + 1]]


def tensor_value(bounds, m, coef, s):
    bx = folded_basis_1d(bounds[0], bounds[1], m, s[0])
    by = folded_basis_1d(bounds[2], bounds[3], m, s[1])
    bz = folded_basis_1d(bounds[4], bounds[5], m, s[2])
    v = 0.0
    for i in range(m):
        for j in range(m):
            for k in range(m):
                v += coef[i * m * m + j * m + k] * bx[i] * by[j] * bz[k]
    return v


def literal_AH(grid, H_at, boundary="mirror"):
    """Dense A_H built by summing the six per-face flux expressions of every cell.

    H_at(point) returns the 3x3 tensor at a face centre. Fluxes through the domain
    boundary are dropped; neighbour indices outside the grid are reflected onto the
    boundary cell ("mirror") or the whole cross term is dropped ("drop").
    """
    M, N, P = grid.shape
    hx, hy, hz = grid.h
    lo = grid.lower
    n = grid.n_cells
    AH = np.zeros((n, n))

    def idx(i, j, k):
        return j * M * P + i * P + k

    def inside(i, j, k):
        return 0 <= i < M and 0 <= j < N and 0 <= k < P

    def clampi(i, j, k):
        return min(max(i, 0), M - 1), min(max(j, 0), N - 1), min(max(k, 0), P - 1)

    def center(i, j, k):
        return lo + (np.array([i, j, k]) + 0.5) * np.array([hx, hy, hz])

    for j in range(N):
        for i in range(M):
            for k in range(P):
                row = idx(i, j, k)
                c = center(i, j, k)

                def add(w, cells):
                    # cells: list of (sign, (i,j,k)); cross terms may reach outside
                    if boundary == "drop" and not all(inside(*q) for _, q in cells):
                        return
                    for sgn, q in cells:
                        AH[row, idx(*clampi(*q))] += sgn * w

                # R face
                if i + 1 < M:
                    H = H_at(c + [hx / 2, 0, 0])
                    a = hy * hz
                    add(a * H[0, 0] / hx, [(1, (i + 1, j, k)), (-1, (i, j, k))])
                    add(a * H[1, 0] / (4 * hy), [(1, (i + 1, j + 1, k)), (1, (i, j + 1, k)),
                                                 (-1, (i + 1, j - 1, k)), (-1, (i, j - 1, k))])
                    add(a * H[2, 0] / (4 * hz), [(1, (i + 1, j, k + 1)), (1, (i, j, k + 1)),
                                                 (-1, (i + 1, j, k - 1)), (-1, (i, j, k - 1))])
                # L face
                if i - 1 >= 0:
                    H = H_at(c - [hx / 2, 0, 0])
                    a = hy * hz
                    add(a * H[0, 0] / hx, [(1, (i - 1, j, k)), (-1, (i, j, k))])
                    add(a * H[1, 0] / (4 * hy), [(1, (i, j - 1, k)), (1, (i - 1, j - 1, k)),
                                                 (-1, (i, j + 1, k)), (-1, (i - 1, j + 1, k))])
                    add(a * H[2, 0] / (4 * hz), [(1, (i, j, k - 1)), (1, (i - 1, j, k - 1)),
                                                 (-1, (i, j, k + 1)), (-1, (i - 1, j, k + 1))])
                # B face
                if j + 1 < N:
                    H = H_at(c + [0, hy / 2, 0])
                    a = hx * hz
                    add(a * H[0, 1] / (4 * hx), [(1, (i + 1, j + 1, k)), (1, (i + 1, j, k)),
                                                 (-1, (i - 1, j + 1, k)), (-1, (i - 1, j, k))])
                    add(a * H[1, 1] / hy, [(1, (i, j + 1, k)), (-1, (i, j, k))])
                    add(a * H[2, 1] / (4 * hz), [(1, (i, j + 1, k + 1)), (1, (i, j, k + 1)),
                                                 (-1, (i, j + 1, k - 1)), (-1, (i, j, k - 1))])
                # F face
                if j - 1 >= 0:
                    H = H_at(c - [0, hy / 2, 0])
                    a = hx * hz
                    add(a * H[0, 1] / (4 * hx), [(1, (i - 1, j, k)), (1, (i - 1, j - 1, k)),
                                                 (-1, (i + 1, j, k)), (-1, (i + 1, j - 1, k))])
                    add(a * H[1, 1] / hy, [(1, (i, j - 1, k)), (-1, (i, j, k))])
                    add(a * H[2, 1] / (4 * hz), [(1, (i, j, k - 1)), (1, (i, j - 1, k - 1)),
                                                 (-1, (i, j, k + 1)), (-1, (i, j - 1, k + 1))])
                # U face
                if k + 1 < P:
                    H = H_at(c + [0, 0, hz / 2])
                    a = hx * hy
                    add(a * H[0, 2] / (4 * hx), [(1, (i + 1, j, k + 1)), (1, (i + 1, j, k)),
                                                 (-1, (i - 1, j, k + 1)), (-1, (i - 1, j, k))])
                    add(a * H[1, 2] / (4 * hy), [(1, (i, j + 1, k + 1)), (1, (i, j + 1, k)),
                                                 (-1, (i, j - 1, k + 1)), (-1, (i, j - 1, k))])
                    add(a * H[2, 2] / hz, [(1, (i, j, k + 1)), (-1, (i, j, k))])
                # D face
                if k - 1 >= 0:
                    H = H_at(c - [0, 0, hz / 2])
                    a = hx * hy
                    add(a * H[0, 2] / (4 * hx), [(1, (i - 1, j, k)), (1, (i - 1, j, k - 1)),
                                                 (-1, (i + 1, j, k)), (-1, (i + 1, j, k - 1))])
                    add(a * H[1, 2] / (4 * hy), [(1, (i, j - 1, k)), (1, (i, j - 1, k - 1)),
                                                 (-1, (i, j + 1, k)), (-1, (i, j + 1, k - 1))])
                    add(a * H[2, 2] / hz, [(1, (i, j, k - 1)), (-1, (i, j, k))])
    return AH


def dense_A(grid, model, boundary="mirror"):
    AH = literal_AH(grid, lambda s: model.H(np.asarray(s, dtype=float)), boundary)
    k2 = np.array([model.kappa2(c) for c in grid.cell_centers()])
    return grid.V * np.diag(k2) - AH


def dense_Q(grid, model, boundary="mirror"):
    A = dense_A(grid, model, boundary)
    return A.T @ A / grid.V


def dense_Qz(Q, k, V):
    n = Q.shape[0]
    out = np.zeros((n + k, n + k))
    out[:n, :n] = Q
    out[n:, n:] = np.eye(k) / V
    return out


def design(dataset, n):
    S = np.zeros((dataset.n, n))
    S[np.arange(dataset.n), dataset.cells] = 1.0
    return np.hstack([S, dataset.X])


def dense_loglik(Q, dataset, V, sigma2):
    """Sum over realizations of log N(y_r; 0, S Q_z^{-1} S^T + sigma2 I)."""
    n = Q.shape[0]
    Qz = dense_Qz(Q, dataset.k, V)
    Sz = np.linalg.inv(Qz)
    total = 0.0
    for r in np.unique(dataset.realization):
        sel = dataset.realization == r
        B = design(dataset, n)[sel]
        C = B @ Sz @ B.T + sigma2 * np.eye(sel.sum())
        y = dataset.y[sel]
        sign, ld = np.linalg.slogdet(C)
        assert sign > 0
        total += -0.5 * (len(y) * np.log(2 * np.pi) + ld + y @ np.linalg.solve(C, y))
    return total


def dense_posterior(Q, dataset, V, sigma2, realization=0):
    n = Q.shape[0]
    Qz = dense_Qz(Q, dataset.k, V)
    sel = dataset.realization == realization
    B = design(dataset, n)[sel]
    QC = Qz + B.T @ B / sigma2
    mu = np.linalg.solve(QC, B.T @ dataset.y[sel] / sigma2)
    return mu, QC


def spectral_variance(kappa2, H, n_r=400, n_theta=96, n_phi=192):
    """int (2 pi)^-3 (kappa2 + w^T H w)^-2 dw by Gauss-Legendre in (r, cos theta) and trapezoid in phi."""
    t, wt = np.polynomial.legendre.leggauss(n_r)
    # r = tan(u), u in (0, pi/2)
    u = 0.25 * np.pi * (t + 1)
    wu = 0.25 * np.pi * wt
    r = np.tan(u)
    dr = wu / np.cos(u) ** 2
    ct, wc = np.polynomial.legendre.leggauss(n_theta)
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    st = np.sqrt(1 - ct ** 2)
    dirs = np.stack([st[:, None] * np.cos(phi)[None, :], st[:, None] * np.sin(phi)[None, :],
                     np.repeat(ct[:, None], n_phi, axis=1)], axis=-1).reshape(-1, 3)
    wdir = np.repeat(wc, n_phi) * (2 * np.pi / n_phi)
    q = np.einsum("di,ij,dj->d", dirs, H, dirs)
    f = r[None, :] ** 2 / (kappa2 + q[:, None] * r[None, :] ** 2) ** 2
    return float(np.sum(wdir[:, None] * dr[None, :] * f) / (2 * np.pi) ** 3)


