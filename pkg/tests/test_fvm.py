import numpy as np
import pytest
import scipy.sparse as sp

import oracles
from anisogmrf.anisotropy import AnisotropyModel, build_H, na_from_sa
from anisogmrf.fvm import assemble_A, assemble_AH, assemble_Q, cell_kappa2, face_H, write_matrix_market
from anisogmrf.grid import GridSpec
from anisogmrf.model import LatentSpec
from anisogmrf.splines import TensorBasis, project

SI = AnisotropyModel("si", [np.log(0.2), np.log(2.5), 0.0])
SA = AnisotropyModel("sa", [np.log(0.35), np.log(0.5), 1.9, 1.4, 0.4, 1.4, 0.6, 0.0])


def random_na(grid, seed=0, scale=0.3):
    th = scale * np.random.default_rng(seed).standard_normal(190)
    return AnisotropyModel("na", th, grid.bounds)


def test_face_H_and_kappa2_stationary():
    g = GridSpec(4, 4, 4, (0, 4, 0, 4, 0, 4))
    H0 = build_H(0.5, np.array([1.9, 1.4, 0.4]), 1.4, 0.6)
    for f in g.faces(1, 2, 3):
        assert np.allclose(face_H(SA, g, f), H0)
    assert cell_kappa2(SI, g, 0, 1, 2) == pytest.approx(0.2)
    na = na_from_sa(SA, g.bounds)
    for f in g.faces(0, 0, 0) + g.faces(3, 2, 1):
        assert np.allclose(face_H(na, g, f), H0)
    assert cell_kappa2(na, g, 3, 3, 3) == pytest.approx(0.35)


def test_face_H_linear_log_gamma():
    g = GridSpec(5, 4, 3, (0, 10, 0, 8, 0, 6))
    pts = g.cell_centers()
    tb = TensorBasis(g.bounds)
    vals = np.zeros((len(pts), 7))
    vals[:, 0] = np.log(0.3)
    vals[:, 1] = -1 + 0.1 * pts[:, 0]
    coef = np.concatenate([project(tb, pts, vals[:, q]) for q in range(7)])
    m = AnisotropyModel("na", np.r_[coef, 0.0], g.bounds)
    blk = m.blocks()[1]
    for f in (g.face(2, 1, 1, "R"), g.face(2, 1, 1, "L"), g.face(0, 3, 2, "U")):
        ref = np.exp(oracles.tensor_value(g.bounds, 3, blk, f.center))
        assert np.allclose(face_H(m, g, f), ref * np.eye(3), rtol=1e-12)


def test_identity_stencil():
    g = GridSpec(5, 6, 7, (0, 5, 0, 3, 0, 14))
    m = AnisotropyModel("si", [0.0, 0.0, 0.0])
    AH = assemble_AH(m, g).toarray()
    hx, hy, hz = g.h
    i, j, k = 2, 3, 3
    r = g.linear_index(i, j, k)
    assert AH[r, r] == pytest.approx(-2 * (hy * hz / hx + hx * hz / hy + hx * hy / hz))
    assert AH[r, g.linear_index(i + 1, j, k)] == pytest.approx(hy * hz / hx)
    assert AH[r, g.linear_index(i, j - 1, k)] == pytest.approx(hx * hz / hy)
    assert AH[r, g.linear_index(i, j, k + 1)] == pytest.approx(hx * hy / hz)
    for di, dj, dk in [(1, 1, 0), (1, -1, 0), (-1, 1, 0), (-1, -1, 0), (1, 0, 1), (1, 0, -1),
                       (-1, 0, 1), (-1, 0, -1), (0, 1, 1), (0, 1, -1), (0, -1, 1), (0, -1, -1)]:
        assert AH[r, g.linear_index(i + di, j + dj, k + dk)] == 0.0


def test_cube_identity_center_coefficient():
    g = GridSpec.cube(30, 30.0)
    m = AnisotropyModel("si", [0.0, 0.0, 0.0])
    AH = assemble_AH(m, g)
    c = g.linear_index(15, 15, 15)
    assert AH[c, c] == pytest.approx(-6.0)


@pytest.mark.parametrize("model", [SI, SA])
def test_row_sums_zero(model):
    g = GridSpec(6, 5, 4, (0, 12, 0, 10, 0, 8))
    AH = assemble_AH(model, g)
    assert np.max(np.abs(AH @ np.ones(g.n_cells))) < 1e-12 * abs(AH).max()


def test_row_sums_zero_na():
    g = GridSpec(5, 4, 4, (0, 10, 0, 10, 0, 10))
    AH = assemble_AH(random_na(g), g)
    assert np.max(np.abs(AH @ np.ones(g.n_cells))) < 1e-12 * abs(AH).max()


@pytest.mark.parametrize("boundary", ["mirror", "drop"])
def test_against_literal_faces(boundary):
    g = GridSpec(3, 3, 3, (0, 3, 0, 6, 0, 9))
    m = random_na(g, 1)
    AH = assemble_AH(m, g, boundary=boundary).toarray()
    ref = oracles.literal_AH(g, m.H, boundary)
    assert np.max(np.abs(AH - ref)) <= 1e-12 * np.max(np.abs(ref))


def test_literal_faces_larger_grid():
    g = GridSpec(4, 5, 4, (0, 4, 0, 5, 0, 8))
    m = random_na(g, 2)
    ref = oracles.literal_AH(g, m.H)
    assert np.allclose(assemble_AH(m, g).toarray(), ref, rtol=0, atol=1e-12 * np.abs(ref).max())


@pytest.mark.parametrize("model_fn", [lambda g: SA, lambda g: random_na(g, 3)])
def test_Q_dense_oracle(model_fn):
    g = GridSpec(3, 4, 3, (0, 3, 0, 4, 0, 3))
    m = model_fn(g)
    Q = assemble_Q(m, g)
    ref = oracles.dense_Q(g, m)
    assert np.max(np.abs(Q.toarray() - ref)) <= 1e-12 * np.max(np.abs(ref))
    # stored pattern is the structural pattern of A^T A (no dropped or extra entries)
    A = assemble_A(m, g)
    S = (abs(A).T @ abs(A)).tocsr()
    S.eliminate_zeros()
    assert (Q != 0).sum() <= Q.nnz
    assert Q.nnz == S.nnz


def test_Q_symmetric_exactly():
    g = GridSpec(6, 5, 4)
    Q = assemble_Q(random_na(g, 4), g)
    assert abs(Q - Q.T).max() == 0.0


def test_Q_row_nnz_bound():
    g = GridSpec.cube(8)
    Q = assemble_Q(SA, g)
    assert np.diff(Q.indptr).max() <= 93


def test_null_flux():
    g = GridSpec(6, 6, 6, (0, 12, 0, 12, 0, 12))
    k2 = 1e-6
    m = AnisotropyModel("sa", [np.log(k2), 0.0, 0.8, 0.3, 0.2, 0.5, 0.1, 0.0])
    A = assemble_A(m, g)
    one = np.ones(g.n_cells)
    assert np.allclose(A @ one, g.V * k2 * one, rtol=1e-9)
    Q = assemble_Q(m, g)
    ref = k2 * (A.T @ one)
    assert np.allclose(Q @ one, ref, rtol=1e-8, atol=1e-12)
    assert np.max(np.abs(Q @ one)) < 1e-4 * abs(Q).max()


def test_boundary_variance_inflation():
    g = GridSpec.cube(12, 16.0)
    pi = LatentSpec(g, SI).prior_factor().partial_inverse()
    d = pi.diagonal()[: g.n_cells]
    c = d[g.linear_index(6, 6, 6)]
    for corner in [(0, 0, 0), (11, 0, 0), (0, 11, 11), (11, 11, 11)]:
        assert d[g.linear_index(*corner)] > c


def test_drop_matches_mirror_for_si():
    g = GridSpec.cube(6)
    assert abs(assemble_Q(SI, g) - assemble_Q(SI, g, boundary="drop")).max() == 0.0


def test_matrix_market(tmp_path):
    g = GridSpec(3, 3, 3)
    Q = assemble_Q(SA, g)
    p = tmp_path / "q.mtx"
    write_matrix_market(p, Q)
    import scipy.io
    R = scipy.io.mmread(str(p))
    assert abs(sp.csr_matrix(R) - Q).max() == 0.0
