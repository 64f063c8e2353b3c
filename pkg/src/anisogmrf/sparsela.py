"""Supernodal multifrontal Cholesky, solves, sampling and selected inversion."""
import numpy as np
import scipy.sparse as sp
from scipy.linalg import blas, lapack
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .errors import NotSPDError

try:
    import numba

    _jit = numba.njit(cache=True, nogil=True)
except ImportError:  # pragma: no cover
    _jit = None


def _extend_add_py(F, r, U):
    F[np.ix_(r, r)] += np.tril(U)


def _gather_py(F, r):
    return F[np.ix_(r, r)]


if _jit is not None:
    @_jit
    def _extend_add(F, r, U):
        # lower triangle of U into F[r, r]; F and U are Fortran ordered
        m = r.shape[0]
        for j in range(m):
            cj = r[j]
            for i in range(j, m):
                F[r[i], cj] += U[i, j]

    @_jit
    def _gather(F, r):
        # F is C ordered and symmetric
        m = r.shape[0]
        out = np.empty((m, m))
        for i in range(m):
            ri = r[i]
            for j in range(m):
                out[i, j] = F[ri, r[j]]
        return out
else:  # pragma: no cover
    _extend_add, _gather = _extend_add_py, _gather_py


# ----------------------------------------------------------------- orderings
def nested_dissection(shape, reach=2, leaf=64, extra=0):
    """Geometric nested dissection of an (M, N, P) lattice.

    Cells couple up to `reach` steps per axis, so separators are `reach` planes
    thick. Returns (perm, sn_ptr): perm[new] = old linear index
    (j*M*P + i*P + k) and supernode boundaries in the new order. `extra` dense
    trailing indices (covariates) are appended as a final supernode.
    """
    M, N, P = shape
    order, ptr = [], [0]

    def emit(lo, hi):
        i, j, k = np.meshgrid(np.arange(lo[0], hi[0]), np.arange(lo[1], hi[1]),
                              np.arange(lo[2], hi[2]), indexing="ij")
        idx = np.sort((j * M * P + i * P + k).ravel())
        order.append(idx)
        ptr.append(ptr[-1] + len(idx))

    def rec(lo, hi):
        size = [hi[d] - lo[d] for d in range(3)]
        d = int(np.argmax(size))
        if size[0] * size[1] * size[2] <= leaf or size[d] < reach + 2:
            emit(lo, hi)
            return
        mid = lo[d] + (size[d] - reach) // 2
        l_hi = list(hi); l_hi[d] = mid
        r_lo = list(lo); r_lo[d] = mid + reach
        s_lo = list(lo); s_lo[d] = mid
        s_hi = list(hi); s_hi[d] = mid + reach
        rec(lo, l_hi)
        rec(r_lo, hi)
        emit(s_lo, s_hi)

    rec([0, 0, 0], [M, N, P])
    perm = np.concatenate(order)
    if extra:
        n = M * N * P
        perm = np.r_[perm, np.arange(n, n + extra)]
        ptr.append(ptr[-1] + extra)
    return perm.astype(np.int64), np.array(ptr, dtype=np.int64)


def _pattern(A):
    A = sp.csr_matrix(A)
    A.sum_duplicates()
    A.sort_indices()
    return A


# ----------------------------------------------------------------- symbolic
class SymbolicFactor:
    """Supernode partition, front structures and assembly maps for one pattern.

    `indptr, indices` give the full symmetric pattern in CSR form (natural order).
    """

    def __init__(self, indptr, indices, perm=None, sn_ptr=None):
        indptr = np.asarray(indptr, dtype=np.int64)
        indices = np.asarray(indices, dtype=np.int64)
        n = len(indptr) - 1
        self.n = n
        self.indptr, self.indices = indptr, indices
        perm = np.arange(n) if perm is None else np.asarray(perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(n)) if n < 2000 else len(np.unique(perm)) != n:
            raise ValueError("perm is not a permutation")
        self.perm = perm
        iperm = np.empty(n, dtype=np.int64)
        iperm[perm] = np.arange(n)
        self.iperm = iperm

        rows = np.repeat(np.arange(n), np.diff(indptr))
        pr, pc = iperm[rows], iperm[indices]
        low = pr >= pc
        src = np.nonzero(low)[0]
        pr, pc = pr[low], pc[low]
        o = np.lexsort((pr, pc))
        self.src = src[o]
        self.lrow, self.lcol = pr[o], pc[o]
        self.lptr = np.searchsorted(self.lcol, np.arange(n + 1))

        if sn_ptr is None:
            sn_ptr = self._fundamental_supernodes()
        self._build(np.asarray(sn_ptr, dtype=np.int64))

    def _structures(self, sn_ptr):
        ns = len(sn_ptr) - 1
        sn_of = np.repeat(np.arange(ns), np.diff(sn_ptr))
        pend = [[] for _ in range(ns)]
        rows, parent = [], np.full(ns, -1, dtype=np.int64)
        for s in range(ns):
            c0, c1 = sn_ptr[s], sn_ptr[s + 1]
            parts = [np.arange(c0, c1), self.lrow[self.lptr[c0]:self.lptr[c1]]] + pend[s]
            pend[s] = None
            r = np.unique(np.concatenate(parts))
            rows.append(r)
            S = r[r >= c1]
            if len(S):
                p = sn_of[S[0]]
                parent[s] = p
                pend[p].append(S)
        return rows, parent, sn_of

    def _fundamental_supernodes(self):
        n = self.n
        rows, parent, _ = self._structures(np.arange(n + 1))
        cnt = np.array([len(r) for r in rows])
        nchild = np.bincount(parent[parent >= 0], minlength=n)
        ptr = [0]
        for j in range(1, n):
            merge = parent[j - 1] == j and nchild[j] == 1 and cnt[j - 1] == cnt[j] + 1
            if not merge:
                ptr.append(j)
        ptr.append(n)
        return np.array(ptr)

    def _build(self, sn_ptr):
        n = self.n
        self.sn_ptr = sn_ptr
        ns = len(sn_ptr) - 1
        self.ns = ns
        rows, parent, sn_of = self._structures(sn_ptr)
        self.rows, self.parent, self.sn_of = rows, parent, sn_of
        self.ncol = np.diff(sn_ptr)
        self.nrow = np.array([len(r) for r in rows])
        self.children = [[] for _ in range(ns)]
        for s in range(ns):
            if parent[s] >= 0:
                self.children[parent[s]].append(s)
        self.rel = [None] * ns
        for s in range(ns):
            if parent[s] >= 0:
                S = rows[s][self.ncol[s]:]
                self.rel[s] = np.searchsorted(rows[parent[s]], S).astype(np.int64)
        # map lower entries into front storage (Fortran order, nrow x ncol blocks)
        self.fent, self.fpos = [], []
        for s in range(ns):
            c0, c1 = sn_ptr[s], sn_ptr[s + 1]
            e = np.arange(self.lptr[c0], self.lptr[c1])
            lr = np.searchsorted(rows[s], self.lrow[e])
            lc = self.lcol[e] - c0
            self.fent.append(e)
            self.fpos.append(lc * self.nrow[s] + lr)
        sizes = self.nrow * self.ncol
        self.off = np.r_[0, np.cumsum(sizes)]
        self.nnz_L = int(self.off[-1])
        # global keys for entry lookup
        self._rkeys = np.concatenate([s * (n + 1) + rows[s] for s in range(ns)]) if ns else np.zeros(0, np.int64)
        self._rptr = np.r_[0, np.cumsum(self.nrow)]
        self._lookup_cache = {}

    @classmethod
    def from_matrix(cls, A, ordering="natural", grid_shape=None, extra=0, leaf=64):
        A = _pattern(A)
        n = A.shape[0]
        if ordering == "grid":
            if grid_shape is None:
                raise ValueError("grid ordering needs grid_shape")
            perm, sn_ptr = nested_dissection(grid_shape, extra=extra, leaf=leaf)
            if len(perm) != n:
                raise ValueError("grid_shape does not match the matrix size")
            return cls(A.indptr, A.indices, perm, sn_ptr)
        if ordering == "rcm":
            perm = reverse_cuthill_mckee(A, symmetric_mode=True).astype(np.int64)
        elif ordering == "natural":
            perm = np.arange(n)
        else:
            raise ValueError(f"unknown ordering {ordering!r}")
        return cls(A.indptr, A.indices, perm)

    def positions(self, rows, cols):
        """Flat storage index of entries (rows, cols) (natural order) in the factor pattern."""
        pi, pj = self.iperm[np.asarray(rows)], self.iperm[np.asarray(cols)]
        hi, lo = np.maximum(pi, pj), np.minimum(pi, pj)
        s = self.sn_of[lo]
        key = s * (self.n + 1) + hi
        g = np.searchsorted(self._rkeys, key)
        g = np.minimum(g, len(self._rkeys) - 1)
        if np.any(self._rkeys[g] != key):
            raise KeyError("entry outside the factor pattern")
        lr = g - self._rptr[s]
        lc = lo - self.sn_ptr[s]
        return self.off[s] + lc * self.nrow[s] + lr

    def pattern_positions(self, indptr, indices):
        key = (id(indptr), id(indices), len(indices))
        hit = self._lookup_cache.get(key)
        if hit is not None and hit[0] is indptr and hit[1] is indices:
            return hit[2]
        rows = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
        pos = self.positions(rows, indices)
        self._lookup_cache[key] = (indptr, indices, pos)
        return pos

    def align(self, A):
        """Data of A laid out on this symbolic pattern (zeros where A has no entry)."""
        if sp.isspmatrix_csr(A) and len(A.indptr) == len(self.indptr) and \
                np.array_equal(A.indptr, self.indptr) and np.array_equal(A.indices, self.indices):
            return np.asarray(A.data, dtype=float)
        A = _pattern(A)
        if A.shape != (self.n, self.n):
            raise ValueError("matrix dimension does not match the symbolic factor")
        n = self.n
        base = np.repeat(np.arange(n), np.diff(self.indptr)) * n + self.indices
        keys = np.repeat(np.arange(n), np.diff(A.indptr)) * n + A.indices
        g = np.searchsorted(base, keys)
        g = np.minimum(g, len(base) - 1)
        if np.any(base[g] != keys):
            raise ValueError("matrix has entries outside the symbolic pattern")
        out = np.zeros(len(base))
        out[g] = A.data
        return out

    def factorize(self, A):
        return CholeskyFactor(self, self.align(A))


# ----------------------------------------------------------------- numeric
class CholeskyFactor:
    """P A P^T = L L^T with L stored as dense supernode blocks."""

    def __init__(self, sym, data):
        self.sym = sym
        ldata = np.asarray(data, dtype=float)[sym.src]
        store = np.zeros(sym.nnz_L)
        upd = [None] * sym.ns
        logdet = 0.0
        for s in range(sym.ns):
            nj, nf = sym.ncol[s], sym.nrow[s]
            F = np.zeros((nf, nf), order="F")
            F.reshape(-1, order="F")[sym.fpos[s]] = ldata[sym.fent[s]]
            for c in sym.children[s]:
                _extend_add(F, sym.rel[c], upd[c])
                upd[c] = None
            L11, info = lapack.dpotrf(F[:nj, :nj], lower=1, clean=1)
            if info != 0:
                piv = int(sym.perm[sym.sn_ptr[s] + max(info, 1) - 1])
                raise NotSPDError(f"matrix is not positive definite (pivot at index {piv})", pivot=piv)
            blk = store[sym.off[s]:sym.off[s + 1]].reshape((nf, nj), order="F")
            blk[:nj] = L11
            if nf > nj:
                L21 = blas.dtrsm(1.0, L11, F[nj:, :nj], side=1, lower=1, trans_a=1)
                blk[nj:] = L21
                upd[s] = blas.dsyrk(-1.0, L21, beta=1.0, c=F[nj:, nj:], lower=1)
            logdet += 2.0 * np.sum(np.log(np.diag(L11)))
        self.store = store
        self.logdet_value = float(logdet)

    @property
    def n(self):
        return self.sym.n

    def logdet(self):
        return self.logdet_value

    def block(self, s):
        sym = self.sym
        return self.store[sym.off[s]:sym.off[s + 1]].reshape((sym.nrow[s], sym.ncol[s]), order="F")

    def _forward(self, y):
        sym = self.sym
        for s in range(sym.ns):
            c0, c1, nj = sym.sn_ptr[s], sym.sn_ptr[s + 1], sym.ncol[s]
            B = self.block(s)
            yj = blas.dtrsm(1.0, B[:nj], y[c0:c1], lower=1)
            y[c0:c1] = yj
            if sym.nrow[s] > nj:
                y[sym.rows[s][nj:]] -= B[nj:] @ yj
        return y

    def _backward(self, y):
        sym = self.sym
        for s in range(sym.ns - 1, -1, -1):
            c0, c1, nj = sym.sn_ptr[s], sym.sn_ptr[s + 1], sym.ncol[s]
            B = self.block(s)
            r = y[c0:c1]
            if sym.nrow[s] > nj:
                r = r - B[nj:].T @ y[sym.rows[s][nj:]]
            y[c0:c1] = blas.dtrsm(1.0, B[:nj], r, lower=1, trans_a=1)
        return y

    def _prep(self, b):
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f"right-hand side has {b.shape[0]} rows, expected {self.n}")
        vec = b.ndim == 1
        y = np.array(b[self.sym.perm].reshape(self.n, -1), order="F")
        return y, vec

    def solve(self, b):
        y, vec = self._prep(b)
        y = self._backward(self._forward(y))
        x = np.empty_like(y)
        x[self.sym.perm] = y
        return x[:, 0] if vec else x

    def sample(self, z=None, rng=None):
        """x = P^T L^{-T} z, which has precision A."""
        if z is None:
            rng = np.random.default_rng(rng)
            z = rng.standard_normal(self.n)
        z = np.asarray(z, dtype=float)
        vec = z.ndim == 1
        y = np.array(z.reshape(self.n, -1), order="F")
        y = self._backward(y)
        x = np.empty_like(y)
        x[self.sym.perm] = y
        return x[:, 0] if vec else x

    def partial_inverse(self):
        return PartialInverse(self)


class PartialInverse:
    """Entries of A^{-1} on the pattern of the Cholesky factor."""

    def __init__(self, fac):
        sym = fac.sym
        self.sym = sym
        store = np.zeros(sym.nnz_L)
        front = {}
        left = [len(c) for c in sym.children]
        for s in range(sym.ns - 1, -1, -1):
            nj, nf = sym.ncol[s], sym.nrow[s]
            B = fac.block(s)
            Li, info = lapack.dtrtri(B[:nj], lower=1)
            Sjj = Li.T @ Li
            out = store[sym.off[s]:sym.off[s + 1]].reshape((nf, nj), order="F")
            if nf > nj:
                p = sym.parent[s]
                r = sym.rel[s]
                Sss = _gather(front[p], r)
                left[p] -= 1
                if left[p] == 0:
                    del front[p]
                U = B[nj:] @ Li
                Ssj = -(Sss @ U)
                Sjj -= U.T @ Ssj
                Sjj = 0.5 * (Sjj + Sjj.T)
                out[nj:] = Ssj
            out[:nj] = Sjj
            if sym.children[s]:
                if nf > nj:
                    Fs = np.empty((nf, nf))
                    Fs[:nj, :nj] = Sjj
                    Fs[nj:, :nj] = Ssj
                    Fs[:nj, nj:] = Ssj.T
                    Fs[nj:, nj:] = Sss
                else:
                    Fs = Sjj
                front[s] = Fs
        self.store = store

    def values(self, rows, cols):
        return self.store[self.sym.positions(rows, cols)]

    def diagonal(self):
        i = np.arange(self.sym.n)
        return self.values(i, i)

    def on_pattern(self, indptr, indices):
        """Selected inverse entries for a symmetric CSR pattern (natural order)."""
        return self.store[self.sym.pattern_positions(indptr, indices)]

    def trace_with(self, M):
        """tr(A^{-1} M) for symmetric sparse M inside the factor pattern."""
        M = sp.coo_matrix(M)
        return float(np.dot(self.values(M.row, M.col), M.data))


def factorize(A, ordering="natural", grid_shape=None, symbolic=None):
    if symbolic is None:
        symbolic = SymbolicFactor.from_matrix(A, ordering=ordering, grid_shape=grid_shape)
    return symbolic.factorize(A)


def partial_inverse(factor):
    return PartialInverse(factor)
