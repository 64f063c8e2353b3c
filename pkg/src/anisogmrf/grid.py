from dataclasses import dataclass, field

import numpy as np

from .errors import GridError, DomainError

DIRECTIONS = ("L", "R", "F", "B", "U", "D")
# direction -> (axis, side)
_DIR_AXIS = {"L": (0, -1), "R": (0, 1), "F": (1, -1), "B": (1, 1), "D": (2, -1), "U": (2, 1)}


@dataclass(frozen=True)
class CellHandle:
    i: int
    j: int
    k: int
    center: tuple


@dataclass(frozen=True)
class FaceHandle:
    owner: tuple
    direction: str
    center: tuple
    area: float
    boundary: bool


@dataclass(frozen=True)
class GridSpec:
    """Regular M x N x P lattice over a box; cells indexed l = j*M*P + i*P + k."""

    M: int
    N: int
    P: int
    bounds: tuple = (0.0, 1.0, 0.0, 1.0, 0.0, 1.0)
    _h: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("M", "N", "P"):
            n = getattr(self, name)
            if int(n) != n or n < 3:
                raise GridError(f"{name} must be an integer >= 3, got {n}")
            object.__setattr__(self, name, int(n))
        b = tuple(float(x) for x in self.bounds)
        if len(b) != 6:
            raise GridError("bounds must have six entries (A1,B1,A2,B2,A3,B3)")
        object.__setattr__(self, "bounds", b)
        h = ((b[1] - b[0]) / self.M, (b[3] - b[2]) / self.N, (b[5] - b[4]) / self.P)
        if min(h) <= 0 or not np.all(np.isfinite(h)):
            raise GridError(f"bounds give non-positive cell sizes {h}")
        object.__setattr__(self, "_h", h)

    @classmethod
    def cube(cls, n, length=40.0):
        return cls(n, n, n, (0.0, length) * 3)

    @property
    def shape(self):
        return (self.M, self.N, self.P)

    @property
    def h(self):
        return np.array(self._h)

    @property
    def hx(self):
        return self._h[0]

    @property
    def hy(self):
        return self._h[1]

    @property
    def hz(self):
        return self._h[2]

    @property
    def V(self):
        return self._h[0] * self._h[1] * self._h[2]

    @property
    def n_cells(self):
        return self.M * self.N * self.P

    @property
    def lower(self):
        return np.array(self.bounds[0::2])

    @property
    def upper(self):
        return np.array(self.bounds[1::2])

    def area(self, axis):
        h = self._h
        return h[(axis + 1) % 3] * h[(axis + 2) % 3]

    def _check(self, i, j, k):
        i, j, k = (np.asarray(a) for a in (i, j, k))
        bad = (i < 0) | (i >= self.M) | (j < 0) | (j >= self.N) | (k < 0) | (k >= self.P)
        if np.any(bad):
            raise GridError(f"cell index out of range for grid {self.shape}")
        return i, j, k

    def linear_index(self, i, j, k):
        i, j, k = self._check(i, j, k)
        out = j * (self.M * self.P) + i * self.P + k
        return int(out) if out.ndim == 0 else out

    def unravel(self, l):
        l = np.asarray(l)
        if np.any((l < 0) | (l >= self.n_cells)):
            raise GridError("linear index out of range")
        j, r = np.divmod(l, self.M * self.P)
        i, k = np.divmod(r, self.P)
        return i, j, k

    def cell_center(self, i, j, k):
        i, j, k = self._check(i, j, k)
        idx = np.stack(np.broadcast_arrays(i, j, k), axis=-1)
        return self.lower + (idx + 0.5) * self.h

    def cell(self, i, j, k):
        return CellHandle(int(i), int(j), int(k), tuple(self.cell_center(i, j, k)))

    def cell_centers(self):
        """Centers of all cells, in linear-index order, shape (n_cells, 3)."""
        return self.cell_center(*self.unravel(np.arange(self.n_cells)))

    def locate(self, points):
        """Integer cell coordinates (..., 3) of points in the closed domain."""
        p = np.asarray(points, dtype=float)
        lo, hi = self.lower, self.upper
        tol = 1e-12 * np.maximum(np.abs(hi - lo), 1.0)
        if not np.all(np.isfinite(p)) or np.any(p < lo - tol) or np.any(p > hi + tol):
            raise DomainError("point outside the grid domain")
        idx = np.floor((p - lo) / self.h).astype(np.int64)
        return np.clip(idx, 0, np.array(self.shape) - 1)

    def locate_cell(self, point):
        i, j, k = self.locate(point)
        return self.cell(i, j, k)

    def locate_index(self, points):
        idx = self.locate(points)
        return self.linear_index(idx[..., 0], idx[..., 1], idx[..., 2])

    def face(self, i, j, k, direction):
        if direction not in _DIR_AXIS:
            raise GridError(f"unknown face direction {direction!r}")
        axis, side = _DIR_AXIS[direction]
        c = self.cell_center(i, j, k).copy()
        c[axis] += 0.5 * side * self._h[axis]
        idx = (i, j, k)[axis] + side
        boundary = idx < 0 or idx >= self.shape[axis]
        return FaceHandle((int(i), int(j), int(k)), direction, tuple(c), self.area(axis), boundary)

    def faces(self, i, j, k):
        return [self.face(i, j, k, d) for d in DIRECTIONS]

    def to_dict(self):
        return {"M": self.M, "N": self.N, "P": self.P, "bounds": list(self.bounds)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["M"], d["N"], d["P"], tuple(d["bounds"]))
