"""Finite-volume assembly of A = V diag(kappa2) - A_H and Q = A^T A / V."""
import functools

import numpy as np
import scipy.sparse as sp

from .anisotropy import AnisotropyModel, ModelKind, build_H, H_and_jacobian
from .grid import GridSpec

BOUNDARY_MODES = ("mirror", "drop")


def _face_arrays(grid):
    """Interior faces, grouped by normal axis: owner (minus side), neighbour, centers."""
    M, N, P = grid.shape
    ii, jj, kk = np.meshgrid(np.arange(M), np.arange(N), np.arange(P), indexing="ij")
    ijk = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
    axes, own, nei = [], [], []
    for d in range(3):
        sel = ijk[ijk[:, d] < grid.shape[d] - 1]
        other = sel.copy()
        other[:, d] += 1
        axes.append(np.full(len(sel), d))
        own.append(sel)
        nei.append(other)
    axes = np.concatenate(axes)
    own = np.concatenate(own)
    nei = np.concatenate(nei)
    centers = grid.lower + (own + 0.5) * grid.h
    centers[np.arange(len(axes)), axes] += 0.5 * grid.h[axes]
    return axes, own, nei, centers


class Stencil:
    """Grid-dependent assembly data reused for every parameter value.

    A_H is stored as a COO template: entry e sits at CSR position pos[e] of A and
    contributes coef[e] * H[face[e]][comp[e], axis(face[e])].
    """

    def __init__(self, grid, boundary="mirror"):
        if boundary not in BOUNDARY_MODES:
            raise ValueError(f"boundary must be one of {BOUNDARY_MODES}")
        self.grid = grid
        self.boundary = boundary
        L = grid.n_cells
        self.n = L
        h = grid.h
        axes, own, nei, centers = _face_arrays(grid)
        self.face_axis, self.face_centers = axes, centers
        self.n_faces = len(axes)
        lin = lambda c: grid.linear_index(c[:, 0], c[:, 1], c[:, 2])
        a, b = lin(own), lin(nei)
        self.face_owner, self.face_nbr = a, b
        area = np.array([grid.area(d) for d in range(3)])[axes]
        fid = np.arange(self.n_faces)
        shape = np.array(grid.shape)

        rows, cols, coef, face, comp = [], [], [], [], []

        def add(r, c, w, f, q):
            rows.append(r); cols.append(c); coef.append(w); face.append(f); comp.append(q)

        # normal component
        w = area / h[axes]
        add(a, a, -w, fid, axes)
        add(a, b, w, fid, axes)
        add(b, a, w, fid, axes)
        add(b, b, -w, fid, axes)
        # tangential components: 4-point central difference straddling the face
        for c in range(3):
            sel = axes != c
            f = fid[sel]
            w = area[sel] / (4 * h[c])
            cells_lo, cells_hi, keep = [], [], np.ones(len(f), bool)
            for base in (own[sel], nei[sel]):
                up = base.copy()
                up[:, c] += 1
                dn = base.copy()
                dn[:, c] -= 1
                missing = (up[:, c] >= shape[c]) | (dn[:, c] < 0)
                keep &= ~missing
                up[:, c] = np.minimum(up[:, c], shape[c] - 1)
                dn[:, c] = np.maximum(dn[:, c], 0)
                cells_hi.append(lin(up))
                cells_lo.append(lin(dn))
            if boundary == "drop":
                f, w = f[keep], w[keep]
                cells_hi = [x[keep] for x in cells_hi]
                cells_lo = [x[keep] for x in cells_lo]
            ra, rb = a[f], b[f]
            qc = np.full(len(f), c)
            for hi, lo in zip(cells_hi, cells_lo):
                add(ra, hi, w, f, qc)
                add(ra, lo, -w, f, qc)
                add(rb, hi, -w, f, qc)
                add(rb, lo, w, f, qc)

        rows = np.concatenate(rows); cols = np.concatenate(cols)
        self.t_coef = np.concatenate(coef)
        self.t_face = np.concatenate(face)
        self.t_comp = np.concatenate(comp)
        self.t_row, self.t_col = rows, cols

        # CSR pattern of A: template positions plus the diagonal
        keys = np.unique(np.concatenate([rows * L + cols, np.arange(L) * (L + 1)]))
        pr, pc = np.divmod(keys, L)
        self.A_indices = pc.astype(np.int32)
        self.A_indptr = np.searchsorted(pr, np.arange(L + 1)).astype(np.int32)
        self.A_rows = pr
        self.t_pos = np.searchsorted(keys, rows * L + cols)
        self.diag_pos = np.searchsorted(keys, np.arange(L) * (L + 1))
        self.A_nnz = len(keys)
        self.t_fc = self.t_face * 3 + self.t_comp
        self._q = None
        self._g = None

    # ----- pattern products -------------------------------------------------
    def _row_pairs(self):
        """For every row of A, all ordered pairs of its stored positions."""
        ptr = self.A_indptr.astype(np.int64)
        cnt = np.diff(ptr)
        sq = cnt * cnt
        tot = int(sq.sum())
        row = np.repeat(np.arange(self.n), sq)
        off = np.arange(tot) - np.repeat(np.cumsum(sq) - sq, sq)
        c = cnt[row]
        p1 = ptr[row] + off // c
        p2 = ptr[row] + off % c
        return p1, p2

    def _q_setup(self):
        if self._q is not None:
            return self._q
        L = self.n
        p1, p2 = self._row_pairs()
        ci = self.A_indices[p1].astype(np.int64)
        cj = self.A_indices[p2].astype(np.int64)
        keys = ci * L + cj
        ukeys, inv = np.unique(keys, return_inverse=True)
        qr, qc = np.divmod(ukeys, L)
        indptr = np.searchsorted(qr, np.arange(L + 1))
        self._q = dict(p1=p1.astype(np.int32), p2=p2.astype(np.int32), qpos=inv.astype(np.int32),
                       indptr=indptr, indices=qc.astype(np.int32), keys=ukeys, nnz=len(ukeys))
        return self._q

    def q_pattern(self):
        q = self._q_setup()
        return q["indptr"], q["indices"]

    def _grad_setup(self):
        """Triples (A[i,k], Sigma[k,j], out[i,j]) over (i,j) in pattern(A)."""
        if self._g is not None:
            return self._g
        q = self._q_setup()
        L = self.n
        p1, p2 = self._row_pairs()
        rows = self.A_rows[p1]
        k = self.A_indices[p1].astype(np.int64)
        j = self.A_indices[p2].astype(np.int64)
        spos = np.searchsorted(q["keys"], k * L + j)
        self._g = dict(pa=p1.astype(np.int32), ps=spos.astype(np.int32), po=p2.astype(np.int32))
        return self._g

    # ----- numeric assembly -------------------------------------------------
    def face_fields(self, model):
        return model.fields(self.face_centers, F=getattr(self, "_Fface", None) if model.kind is ModelKind.NA else None)

    def basis_matrices(self, model):
        """Spline basis at face and cell centers (cached per stencil)."""
        if model.kind is not ModelKind.NA:
            return None, None
        key = (model.m_eff, model.basis.bounds)
        cache = getattr(self, "_bcache", None)
        if cache is None or cache[0] != key:
            Ff = model.basis(self.face_centers)
            Fc = model.basis(self.grid.cell_centers())
            self._bcache = (key, Ff, Fc)
        return self._bcache[1], self._bcache[2]

    def evaluate(self, model, jacobian=False):
        """kappa2 at cells, H columns at faces, and optionally dH/dfield."""
        Ff, Fc = self.basis_matrices(model)
        if model.kind is ModelKind.NA:
            fc = model.fields(None, F=Fc)
            ff = model.fields(None, F=Ff)
            k2 = np.exp(fc[:, 0])
            H, J = H_and_jacobian(ff[:, 1], ff[:, 2:5], ff[:, 5], ff[:, 6]) if jacobian else \
                (build_H(np.exp(ff[:, 1]), ff[:, 2:5], ff[:, 5], ff[:, 6]), None)
            # column of H along each face's normal
            idx = np.arange(self.n_faces)
            Hcol = H[idx, :, self.face_axis]
            Jcol = J[idx, :, self.face_axis, :] if jacobian else None
        else:
            c = model.constants()
            k2 = np.full(self.n, np.exp(c[0]))
            H, J = H_and_jacobian(c[1], c[2:5], c[5], c[6])
            Hcol = H.T[self.face_axis]
            Jcol = np.transpose(J, (1, 0, 2))[self.face_axis] if jacobian else None
        return k2, Hcol, Jcol

    def AH_data(self, Hcol):
        vals = self.t_coef * Hcol.ravel()[self.t_fc]
        return np.bincount(self.t_pos, vals, minlength=self.A_nnz)

    def _csr(self, data):
        return sp.csr_matrix((data, self.A_indices, self.A_indptr), shape=(self.n, self.n))

    def assemble_A_data(self, model):
        k2, Hcol, _ = self.evaluate(model)
        data = -self.AH_data(Hcol)
        data[self.diag_pos] += self.grid.V * k2
        return data

    def assemble_AH(self, model):
        _, Hcol, _ = self.evaluate(model)
        return self._csr(self.AH_data(Hcol))

    def assemble_A(self, model):
        return self._csr(self.assemble_A_data(model))

    def Q_from_A_data(self, adata):
        q = self._q_setup()
        vals = adata[q["p1"]] * adata[q["p2"]]
        data = np.bincount(q["qpos"], vals, minlength=q["nnz"]) / self.grid.V
        return data

    def assemble_Q(self, model):
        q = self._q_setup()
        data = self.Q_from_A_data(self.assemble_A_data(model))
        return sp.csr_matrix((data, q["indices"], q["indptr"]), shape=(self.n, self.n))

    def grad_A(self, adata, W_data):
        """G = (A W)/V on pattern(A), W symmetric given on pattern(Q)."""
        g = self._grad_setup()
        out = np.bincount(g["po"], adata[g["pa"]] * W_data[g["ps"]], minlength=self.A_nnz)
        return out / self.grid.V

    def field_gradient(self, model, G, k2, Jcol):
        """Pull dl/dA (on pattern(A)) back to per-cell and per-face field values."""
        dk = self.grid.V * G[self.diag_pos] * k2
        dH = -np.bincount(self.t_fc, self.t_coef * G[self.t_pos], minlength=3 * self.n_faces)
        dH = dH.reshape(self.n_faces, 3)
        dface = np.einsum("fc,fcq->fq", dH, Jcol)
        if model.kind is ModelKind.NA:
            Ff, Fc = self.basis_matrices(model)
            df = np.zeros((self.n_faces, 7))
            df[:, 1:] = dface
            dc = np.zeros((self.n, 7))
            dc[:, 0] = dk
            return model.pullback(dc, Fc) + model.pullback(df, Ff)
        tot = np.r_[dk.sum(), dface.sum(axis=0)]
        return model.pullback(tot[None, :])


@functools.lru_cache(maxsize=8)
def get_stencil(grid, boundary="mirror"):
    return Stencil(grid, boundary)


def face_H(model, grid, face):
    """H at the center of a FaceHandle."""
    return model.evaluate(np.asarray(face.center))[1]


def cell_kappa2(model, grid, i, j, k):
    return model.evaluate(grid.cell_center(i, j, k))[0]


def assemble_AH(model, grid, boundary="mirror"):
    return get_stencil(grid, boundary).assemble_AH(model)


def assemble_A(model, grid, boundary="mirror"):
    return get_stencil(grid, boundary).assemble_A(model)


def assemble_Q(model, grid, boundary="mirror"):
    return get_stencil(grid, boundary).assemble_Q(model)


def write_matrix_market(path, Q):
    """Coordinate real general format with 1-based indices, row-major order."""
    Q = sp.coo_matrix(Q)
    order = np.lexsort((Q.col, Q.row))
    with open(path, "w", newline="\n") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        fh.write(f"{Q.shape[0]} {Q.shape[1]} {Q.nnz}\n")
        for r, c, v in zip(Q.row[order], Q.col[order], Q.data[order]):
            fh.write(f"{r + 1} {c + 1} {float(v)!r}\n")
