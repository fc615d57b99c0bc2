"""Space-time grids, grid fields, the flux-form spatial operator and quadrature.

Spatial nodes include the Dirichlet boundary; a field on a grid is stored as a
complex array of shape ``(nt + 1, *full_shape)`` with boundary entries zero.
The spatial quadrature is the trapezoid rule on the full node set, the time
quadrature the trapezoid rule on the levels.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp

from .weights import DomainSpec

SYMMETRY_TOL = 1e-12


class DiscretizationError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    domain: DomainSpec
    nx: int
    nt: int
    ny: int | None = None

    def __post_init__(self):
        if self.domain.dimension == 2 and self.ny is None:
            object.__setattr__(self, "ny", self.nx)
        if self.domain.dimension == 1 and self.ny is not None:
            raise DiscretizationError("ny given for a 1D domain")
        if min(self.counts) < 1 or self.nt < 1:
            raise DiscretizationError("grid counts must be positive")

    @property
    def dim(self) -> int:
        return self.domain.dimension

    @property
    def counts(self) -> tuple[int, ...]:
        return (self.nx,) if self.dim == 1 else (self.nx, self.ny)

    @property
    def spacings(self) -> tuple[float, ...]:
        return tuple((hi - lo) / (n + 1) for (lo, hi), n in zip(self.domain.bounds, self.counts))

    @property
    def dx(self) -> float:
        return self.spacings[0]

    @property
    def dy(self) -> float:
        return self.spacings[1]

    @property
    def dt(self) -> float:
        return self.domain.horizon / self.nt

    @property
    def cell(self) -> float:
        return float(np.prod(self.spacings))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.counts

    @property
    def full_shape(self) -> tuple[int, ...]:
        return tuple(n + 2 for n in self.counts)

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.domain.horizon, self.nt + 1)

    def axis(self, j: int) -> np.ndarray:
        lo, hi = self.domain.bounds[j]
        n = self.counts[j]
        return lo + (hi - lo) * np.arange(n + 2) / (n + 1)

    def full_points(self) -> np.ndarray:
        """Node coordinates, shape ``(*full_shape, dim)``."""
        axes = [self.axis(j) for j in range(self.dim)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def interior_points(self) -> np.ndarray:
        """Interior node coordinates, shape ``(size, dim)`` in row-major order."""
        inner = (slice(1, -1),) * self.dim
        return self.full_points()[inner].reshape(-1, self.dim)

    def embed(self, vec) -> np.ndarray:
        """Interior vectors ``(..., size)`` to full arrays with zero boundary."""
        vec = np.asarray(vec)
        lead = vec.shape[:-1]
        out = np.zeros(lead + self.full_shape, dtype=np.result_type(vec.dtype, np.complex128))
        out[(...,) + (slice(1, -1),) * self.dim] = vec.reshape(lead + self.counts)
        return out

    def restrict(self, arr) -> np.ndarray:
        arr = np.asarray(arr)
        lead = arr.shape[: arr.ndim - self.dim]
        return arr[(...,) + (slice(1, -1),) * self.dim].reshape(lead + (self.size,))

    def omega_mask(self) -> np.ndarray:
        """Interior nodes lying in the open control box."""
        pts = self.interior_points()
        mask = np.ones(len(pts), dtype=bool)
        for j, (lo, hi) in enumerate(self.domain.omega):
            mask &= (pts[:, j] > lo) & (pts[:, j] < hi)
        return mask

    def space_weights(self) -> np.ndarray:
        """Trapezoid weights on the full node set."""
        w = np.ones(self.full_shape)
        for j, h in enumerate(self.spacings):
            wj = np.full(self.full_shape[j], h)
            wj[0] = wj[-1] = h / 2
            shape = [1] * self.dim
            shape[j] = -1
            w = w * wj.reshape(shape)
        return w

    def time_weights(self, exclude_ends: bool = False) -> np.ndarray:
        w = np.full(self.nt + 1, self.dt)
        w[0] = w[-1] = self.dt / 2
        if exclude_ends:
            w[0] = w[-1] = 0.0
        return w

    def refined(self, factor: int = 2) -> "Grid":
        """Grid with spacings divided by ``factor`` (coarse nodes are kept)."""
        ny = None if self.ny is None else (self.ny + 1) * factor - 1
        return Grid(self.domain, (self.nx + 1) * factor - 1, self.nt * factor, ny)


def chi_omega(grid: Grid, vec) -> np.ndarray:
    """Zero every interior entry outside the control box (works on ``(..., size)``)."""
    return np.where(grid.omega_mask(), vec, 0)


# ---------------------------------------------------------------------------
# fields

@dataclass(frozen=True)
class Trajectory:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.complex128)
        if v.shape != (self.grid.nt + 1,) + self.grid.full_shape:
            raise DiscretizationError(f"trajectory shape {v.shape} does not match the grid")
        inner = (slice(None),) + (slice(1, -1),) * self.grid.dim
        boundary = v.copy()
        boundary[inner] = 0
        if np.any(boundary != 0):
            raise DiscretizationError("trajectory must vanish on the boundary")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_interior(cls, grid: Grid, arr) -> "Trajectory":
        return cls(grid, grid.embed(arr))

    @classmethod
    def zeros(cls, grid: Grid) -> "Trajectory":
        return cls(grid, np.zeros((grid.nt + 1,) + grid.full_shape, dtype=np.complex128))

    def interior(self) -> np.ndarray:
        return self.grid.restrict(self.values)

    def level(self, n: int) -> np.ndarray:
        return self.values[n]

    def conj(self) -> "Trajectory":
        return Trajectory(self.grid, np.conj(self.values))

    def __add__(self, other):
        return Trajectory(self.grid, self.values + other.values)

    def __sub__(self, other):
        return Trajectory(self.grid, self.values - other.values)

    def scale(self, c) -> "Trajectory":
        return Trajectory(self.grid, c * self.values)


def lp_norm_space(grid: Grid, arr, p: int) -> np.ndarray:
    """Discrete ``L^p(Omega)`` norm of full-node arrays ``(..., *full_shape)``."""
    w = grid.space_weights()
    axes = tuple(range(-grid.dim, 0))
    return np.sum(w * np.abs(arr) ** p, axis=axes) ** (1.0 / p)


@dataclass(frozen=True)
class PotentialField:
    """Potential ``q`` on the full nodes and levels, with its norm ``r`` cached."""

    grid: Grid
    values: np.ndarray
    r: float = field(init=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.complex128)
        full = (self.grid.nt + 1,) + self.grid.full_shape
        if v.shape != full:
            v = np.broadcast_to(v, full).copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "r", potential_norm_r(self))

    @classmethod
    def constant(cls, grid: Grid, c: complex) -> "PotentialField":
        return cls(grid, np.full((grid.nt + 1,) + grid.full_shape, c, dtype=np.complex128))

    @classmethod
    def zero(cls, grid: Grid) -> "PotentialField":
        return cls.constant(grid, 0.0)

    def with_values(self, values) -> "PotentialField":
        return PotentialField(self.grid, values)

    def interior(self) -> np.ndarray:
        return self.grid.restrict(self.values)

    def is_zero(self) -> bool:
        return not np.any(self.values)


def potential_norm_r(q: PotentialField) -> float:
    """Max over levels of the spatial ``L^n`` norm, ``n`` the dimension."""
    g = q.grid
    return float(np.max(lp_norm_space(g, q.values, g.dim)))


# ---------------------------------------------------------------------------
# coefficients and the spatial operator

@dataclass(frozen=True)
class Coefficients:
    """Symmetric coefficient matrix ``a(t, x)``; ``func`` returns shape (..., d, d)."""

    func: Callable
    dim: int
    time_dependent: bool = False
    name: str = "custom"

    @classmethod
    def identity(cls, dim: int) -> "Coefficients":
        return cls.constant(np.eye(dim), name="identity")

    @classmethod
    def constant(cls, matrix, name: str = "constant") -> "Coefficients":
        mat = np.array(matrix, dtype=float).reshape(np.shape(matrix) or (1, 1))
        d = mat.shape[0]

        def func(t, x, mat=mat):
            x = np.asarray(x)
            return np.broadcast_to(mat, x.shape[:-1] + (d, d))
        return cls(func, d, False, name)

    def __call__(self, t, x) -> np.ndarray:
        vals = np.asarray(self.func(t, np.asarray(x, dtype=float)), dtype=float)
        if np.any(vals != np.swapaxes(vals, -1, -2)):
            raise DiscretizationError("coefficient evaluator returns non-symmetric matrix")
        return vals


def _index(grid: Grid):
    return np.arange(grid.size).reshape(grid.counts)


def spatial_operator(grid: Grid, coeffs: Coefficients, t: float = 0.0) -> sp.csr_matrix:
    """Interior matrix of ``sum_jk d_k(a^{jk} d_j)`` with Dirichlet boundary.

    Diagonal terms use a flux form with coefficients at cell midpoints.  Cross
    terms use centered mixed differences with node coefficients.
    """
    if coeffs.dim != grid.dim:
        raise DiscretizationError("coefficient dimension does not match the grid")
    full = grid.full_points()
    h = grid.spacings
    rows, cols, vals = [], [], []
    idx = _index(grid)
    counts = grid.counts

    def add(r, c, v):
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(np.broadcast_to(v, r.shape).ravel())

    inner = (slice(1, -1),) * grid.dim
    for j in range(grid.dim):
        # a^{jj} at midpoints between node i and i+1 along axis j (full index space)
        lo = [slice(1, -1)] * grid.dim
        lo[j] = slice(0, -1)
        mids = full[tuple(lo)].copy()
        mids[..., j] += h[j] / 2
        amid = coeffs(t, mids)[..., j, j] / h[j] ** 2
        # amid index i along axis j is the face between full nodes i and i+1
        sl_m = [slice(None)] * grid.dim
        sl_p = [slice(None)] * grid.dim
        sl_m[j] = slice(0, -1)
        sl_p[j] = slice(1, None)
        a_minus = amid[tuple(sl_m)]
        a_plus = amid[tuple(sl_p)]
        add(idx, idx, -(a_minus + a_plus))
        src = [slice(None)] * grid.dim
        dst = [slice(None)] * grid.dim
        src[j] = slice(0, counts[j] - 1)
        dst[j] = slice(1, counts[j])
        face = a_plus[tuple(src)]
        add(idx[tuple(src)], idx[tuple(dst)], face)
        add(idx[tuple(dst)], idx[tuple(src)], face)
    if grid.dim == 2:
        anode = coeffs(t, full)[..., 0, 1] / (4 * h[0] * h[1])
        nx, ny = counts
        # d_x(a12 d_y z) + d_y(a12 d_x z) at interior node (i, j), full indices i+1, j+1
        for di in (-1, 1):
            for dj in (-1, 1):
                i0 = np.arange(nx)
                j0 = np.arange(ny)
                I, J = np.meshgrid(i0, j0, indexing="ij")
                It, Jt = I + di, J + dj
                ok = (It >= 0) & (It < nx) & (Jt >= 0) & (Jt < ny)
                c = di * dj * (anode[I + 1 + di, J + 1] + anode[I + 1, J + 1 + dj])
                add(idx[I[ok], J[ok]], idx[It[ok], Jt[ok]], c[ok])
    n = grid.size
    L = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsr()
    sym = ((L + L.T) * 0.5).tocsr()
    diff = abs(L - sym).max() if L.nnz else 0.0
    scale = abs(L).max() if L.nnz else 1.0
    if diff > SYMMETRY_TOL * scale:
        raise DiscretizationError(f"assembled operator is not symmetric (gap {diff:.3e})")
    return sym


class OperatorCache:
    """Spatial operators per time, reused when the coefficients are time-independent."""

    def __init__(self, grid: Grid, coeffs: Coefficients):
        self.grid = grid
        self.coeffs = coeffs
        self._fixed = None if coeffs.time_dependent else spatial_operator(grid, coeffs)

    def at(self, t: float) -> sp.csr_matrix:
        if self._fixed is not None:
            return self._fixed
        return spatial_operator(self.grid, self.coeffs, t)


def apply_G(traj: Trajectory, n: int, b: float, coeffs: Coefficients | OperatorCache,
            theta: float = 0.5) -> np.ndarray:
    """Discrete ``(1+ib) z_t + sum_jk (a^{jk} z_j)_k`` between levels ``n`` and ``n+1``.

    The time derivative is the forward difference and the spatial part is the
    ``theta``-weighted average, so the result sits at ``t_n + theta dt``.
    Returns the interior vector.
    """
    g = traj.grid
    ops = coeffs if isinstance(coeffs, OperatorCache) else OperatorCache(g, coeffs)
    t = g.times
    z = traj.interior()
    zt = (z[n + 1] - z[n]) / g.dt
    Lz = theta * (ops.at(t[n + 1]) @ z[n + 1]) + (1 - theta) * (ops.at(t[n]) @ z[n])
    return (1 + 1j * b) * zt + Lz


def apply_G_all(traj: Trajectory, b: float, coeffs, theta: float = 0.5) -> np.ndarray:
    g = traj.grid
    ops = coeffs if isinstance(coeffs, OperatorCache) else OperatorCache(g, coeffs)
    return np.stack([apply_G(traj, n, b, ops, theta) for n in range(g.nt)])


# ---------------------------------------------------------------------------
# quadrature

def integrate(grid: Grid, values, log_weight=None, *, exclude_ends: bool | None = None,
              omega_only: bool = False) -> float:
    """Space-time integral of a non-negative field on the full nodes.

    ``values`` has shape ``(nt + 1, *full_shape)``.  With ``log_weight`` (same
    shape, or broadcastable) the integrand is ``exp(log_weight) * values``,
    evaluated as ``exp(log_weight + log(values))`` where ``values > 0``; the
    first and last levels are then excluded.
    """
    return float(np.exp(log_integrate(grid, values, log_weight, exclude_ends=exclude_ends,
                                      omega_only=omega_only)))


def full_omega_mask(grid: Grid) -> np.ndarray:
    pts = grid.full_points()
    mask = np.ones(grid.full_shape, dtype=bool)
    for j, (lo, hi) in enumerate(grid.domain.omega):
        mask &= (pts[..., j] > lo) & (pts[..., j] < hi)
    return mask


def log_integrate(grid: Grid, values, log_weight=None, *, exclude_ends: bool | None = None,
                  omega_only: bool = False) -> float:
    """Logarithm of :func:`integrate`, accumulated with ``logsumexp``."""
    vals = np.asarray(values)
    if np.iscomplexobj(vals):
        raise DiscretizationError("integrand must be real")
    if np.any(np.isnan(vals)) or (log_weight is not None and np.any(np.isnan(log_weight))):
        raise DiscretizationError("NaN encountered in integrand")
    if np.any(vals < 0):
        raise DiscretizationError("integrand must be non-negative")
    if exclude_ends is None:
        exclude_ends = log_weight is not None
    shape = (grid.nt + 1,) + grid.full_shape
    vals = np.broadcast_to(vals, shape)
    w = grid.time_weights(exclude_ends).reshape((-1,) + (1,) * grid.dim) * grid.space_weights()
    if omega_only:
        w = w * full_omega_mask(grid)
    lw = np.zeros(shape) if log_weight is None else np.broadcast_to(log_weight, shape)
    keep = (vals > 0) & (w > 0)
    if not np.any(keep):
        return -np.inf
    terms = lw[keep] + np.log(vals[keep]) + np.log(w[keep])
    return float(logsumexp(terms))


def norms(traj_or_values, grid: Grid | None = None, kind: str = "L2_Q", level: int | None = None):
    """Discrete ``L2_Omega_at_t``, ``L2_Q`` and ``L2_omega_Q`` norms."""
    if isinstance(traj_or_values, Trajectory):
        grid = traj_or_values.grid
        vals = traj_or_values.values
    else:
        vals = np.asarray(traj_or_values)
    sq = np.abs(vals) ** 2
    if kind == "L2_Omega_at_t":
        arr = sq if level is None else sq[level]
        total = np.sum(grid.space_weights() * arr, axis=tuple(range(arr.ndim - grid.dim, arr.ndim)))
        return float(np.sqrt(total)) if np.ndim(total) == 0 else np.sqrt(total)
    if kind == "L2_Q":
        return float(np.sqrt(integrate(grid, sq))) if np.any(sq) else 0.0
    if kind == "L2_omega_Q":
        if not np.any(sq):
            return 0.0
        return float(np.sqrt(integrate(grid, sq, omega_only=True)))
    raise DiscretizationError(f"unknown norm kind {kind!r}")


def level_norms(traj: Trajectory) -> np.ndarray:
    """``|z(t_n)|_{L^2(Omega)}`` for every level."""
    g = traj.grid
    return np.sqrt(np.sum(g.space_weights() * np.abs(traj.values) ** 2,
                          axis=tuple(range(1, g.dim + 1))))


def theta_log_weight(ell) -> np.ndarray:
    """``log(theta^2) = 2 ell`` with levels below the underflow threshold kept finite."""
    return 2.0 * np.asarray(ell, dtype=float)


# ---------------------------------------------------------------------------
# serialization

MAGIC = b"GLCF"


def to_binary(traj: Trajectory) -> bytes:
    """Header (magic, dim, counts, spacings) then interleaved re/im doubles, time-major."""
    g = traj.grid
    counts = (g.nt + 1,) + g.full_shape
    head = MAGIC + struct.pack("<II", 1, g.dim)
    head += struct.pack(f"<{len(counts)}Q", *counts)
    head += struct.pack(f"<{1 + g.dim}d", g.dt, *g.spacings)
    payload = np.ascontiguousarray(traj.values).view(np.float64).astype("<f8").tobytes()
    return head + payload


def from_binary(data: bytes, domain: DomainSpec) -> Trajectory:
    if data[:4] != MAGIC:
        raise DiscretizationError("not a field snapshot")
    version, dim = struct.unpack_from("<II", data, 4)
    if dim != domain.dimension:
        raise DiscretizationError("snapshot dimension does not match the domain")
    off = 12
    counts = struct.unpack_from(f"<{1 + dim}Q", data, off)
    off += 8 * (1 + dim)
    off += 8 * (1 + dim)
    n = int(np.prod(counts))
    vals = np.frombuffer(data, dtype="<f8", count=2 * n, offset=off).view(np.complex128)
    ny = None if dim == 1 else counts[2] - 2
    grid = Grid(domain, counts[1] - 2, counts[0] - 1, ny)
    return Trajectory(grid, vals.reshape(counts))


def to_csv(traj: Trajectory) -> str:
    g = traj.grid
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    coords = ["x"] if g.dim == 1 else ["x", "y"]
    w.writerow(["t"] + coords + ["re", "im"])
    pts = g.full_points().reshape(-1, g.dim)
    for n, t in enumerate(g.times):
        lv = traj.values[n].reshape(-1)
        for p, v in zip(pts, lv):
            w.writerow([f"{t:.17g}"] + [f"{c:.17g}" for c in p] + [f"{v.real:.17g}", f"{v.imag:.17g}"])
    return buf.getvalue()
