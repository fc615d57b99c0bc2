"""Implicit theta-scheme for ``(1+ib) y_t - sum_jk (a^{jk} y_j)_k = source + q y`` (or ``+ f(y)``).

One step from ``t_n`` to ``t_{n+1}`` solves

    A_n y^{n+1} = B_n y^n + s^n,
    A_n = (1+ib)/dt - th (L^{n+1} + Q^{n+1}),   B_n = (1+ib)/dt + (1-th)(L^n + Q^n),

with ``s^n`` the source on the interval.  The backward equation
``(1+ib) z_t + sum_jk (a^{jk} z_j)_k = q z`` is run through the same stepper in
``tau = T - t``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import solve_banded

from .discretization import (Coefficients, Grid, OperatorCache, PotentialField, Trajectory,
                             chi_omega, norms)

log = logging.getLogger(__name__)

NEWTON_TOL = 1e-10
NEWTON_ITERS = 8
MAX_HALVINGS = 4


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SchemeConfig:
    theta_scheme: float = 0.5
    linear_tol: float = 1e-10
    max_linear_iters: int = 1000

    def __post_init__(self):
        if not 0.5 <= self.theta_scheme <= 1.0:
            raise ValueError("theta_scheme must lie in [0.5, 1]")
        if not self.linear_tol > 0:
            raise ValueError("linear_tol must be positive")


# ---------------------------------------------------------------------------
# nonlinearities

@dataclass(frozen=True)
class Nonlinearity:
    """``f`` acts elementwise on complex arrays; ``df`` returns the real 2x2 Jacobian
    ``d(Re f, Im f)/d(Re s, Im s)`` with shape (..., 2, 2)."""

    f: Callable
    df: Callable
    name: str = "custom"
    _growth: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if abs(complex(np.asarray(self.f(np.zeros(1, complex)))[0])) != 0:
            raise ValueError("nonlinearity must satisfy f(0) = 0")

    @property
    def growth_ok(self) -> bool:
        if "ok" not in self._growth:
            from .control import growth_check
            _, verdict = growth_check(self)
            self._growth["ok"] = verdict == "pass"
        return self._growth["ok"]

    def slope_at_zero(self) -> float:
        """Real part of the trace of ``df(0)`` over two."""
        J = np.asarray(self.df(np.zeros(1, complex)))[0]
        return float(np.trace(J) / 2)


def zero_nonlinearity() -> Nonlinearity:
    return Nonlinearity(lambda s: np.zeros_like(np.asarray(s, complex)),
                        lambda s: np.zeros(np.shape(s) + (2, 2)), "zero")


def linear_nonlinearity(c: float) -> Nonlinearity:
    def df(s):
        out = np.zeros(np.shape(s) + (2, 2))
        out[..., 0, 0] = out[..., 1, 1] = c
        return out
    return Nonlinearity(lambda s: c * np.asarray(s, complex), df, f"linear({c:g})")


def log_power_nonlinearity(p: float, c: float = 1.0) -> Nonlinearity:
    """``f(s) = c s ln^p(1 + |s|)``."""

    def f(s):
        s = np.asarray(s, complex)
        return c * s * np.log1p(np.abs(s)) ** p

    def df(s):
        s = np.asarray(s, complex)
        r = np.abs(s)
        lg = np.log1p(r)
        g = lg ** p
        with np.errstate(divide="ignore", invalid="ignore"):
            gp = np.where(r > 0, p * lg ** (p - 1) / (1 + r), 0.0)
            ur = np.where(r > 0, s.real / np.where(r > 0, r, 1), 0.0)
            ui = np.where(r > 0, s.imag / np.where(r > 0, r, 1), 0.0)
        # d|s| terms: s g'(r) d r with dr = (re d re + im d im)/r
        rg = np.where(r > 0, r * gp, 0.0)
        out = np.empty(s.shape + (2, 2))
        out[..., 0, 0] = g + rg * ur * ur
        out[..., 0, 1] = rg * ur * ui
        out[..., 1, 0] = rg * ui * ur
        out[..., 1, 1] = g + rg * ui * ui
        return c * out
    return Nonlinearity(f, df, f"log_power({p:g})")


# ---------------------------------------------------------------------------
# linear algebra

def _to_banded(M: sp.spmatrix) -> np.ndarray:
    """Tridiagonal sparse matrix to LAPACK banded storage (l = u = 1)."""
    n = M.shape[0]
    ab = np.zeros((3, n), dtype=np.complex128)
    ab[1] = M.diagonal()
    if n > 1:
        ab[0, 1:] = M.diagonal(1)
        ab[2, :-1] = M.diagonal(-1)
    return ab


class LinearSolver:
    """Solves ``M x = rhs``: banded elimination in 1D, Jacobi-preconditioned GMRES in 2D."""

    def __init__(self, grid: Grid, cfg: SchemeConfig):
        self.dim = grid.dim
        self.cfg = cfg

    def solve(self, M: sp.spmatrix, rhs: np.ndarray, x0=None) -> np.ndarray:
        if self.dim == 1:
            return solve_banded((1, 1), _to_banded(M), rhs, check_finite=False)
        d = M.diagonal()
        P = spla.LinearOperator(M.shape, matvec=lambda v: v / d, dtype=np.complex128)
        bn = np.linalg.norm(rhs)
        if bn == 0:
            return np.zeros_like(rhs)
        x, info = spla.gmres(M, rhs, x0=x0, rtol=self.cfg.linear_tol, atol=0.0,
                             restart=min(100, M.shape[0]), maxiter=self.cfg.max_linear_iters,
                             M=P)
        res = np.linalg.norm(M @ x - rhs) / bn
        if info != 0 and res > self.cfg.linear_tol:
            raise SolverError(f"linear solve did not converge (relative residual {res:.3e})")
        return x


class Stepper:
    """Assembles and applies the one-step matrices of the theta-scheme."""

    def __init__(self, grid: Grid, b: float, coeffs: Coefficients, cfg: SchemeConfig,
                 potential: np.ndarray | None = None, times: np.ndarray | None = None):
        self.grid = grid
        self.b = float(b)
        self.cfg = cfg
        self.th = cfg.theta_scheme
        self.ops = OperatorCache(grid, coeffs)
        self.times = grid.times if times is None else times
        self.q = potential  # interior values per level, shape (nt+1, size), or None
        self.lin = LinearSolver(grid, cfg)
        self.mass = (1 + 1j * self.b) / grid.dt
        self.eye = sp.identity(grid.size, dtype=np.complex128, format="csr")

    def operator(self, n: int, dt: float | None = None) -> sp.spmatrix:
        L = self.ops.at(self.times[n]).astype(np.complex128)
        if self.q is not None:
            L = L + sp.diags(self.q[n])
        return L

    def A(self, n: int) -> sp.spmatrix:
        return (self.mass * self.eye - self.th * self.operator(n + 1)).tocsr()

    def B(self, n: int) -> sp.spmatrix:
        return (self.mass * self.eye + (1 - self.th) * self.operator(n)).tocsr()

    def step(self, n: int, y: np.ndarray, source: np.ndarray | None = None) -> np.ndarray:
        rhs = self.B(n) @ y
        if source is not None:
            rhs = rhs + source
        return self.lin.solve(self.A(n), rhs, x0=y)


def _source_array(grid: Grid, source) -> np.ndarray | None:
    if source is None:
        return None
    src = np.asarray(source, dtype=np.complex128)
    if src.shape == (grid.nt + 1,) + grid.full_shape:
        src = grid.restrict(src)[:-1]
    elif src.shape == (grid.nt + 1, grid.size):
        src = src[:-1]
    if src.shape != (grid.nt, grid.size):
        raise SolverError("source must have one interior vector per time interval")
    return src


def _initial(grid: Grid, y0) -> np.ndarray:
    y0 = np.asarray(y0, dtype=np.complex128)
    if y0.shape == grid.full_shape:
        inner = (slice(1, -1),) * grid.dim
        edge = y0.copy()
        edge[inner] = 0
        if np.any(edge != 0):
            raise SolverError("initial state must vanish on the boundary")
        return grid.restrict(y0)
    if y0.shape == (grid.size,):
        return y0
    raise SolverError("initial state does not match the grid")


def control_source(grid: Grid, u: Trajectory | np.ndarray | None) -> np.ndarray | None:
    """``chi_omega u^n`` per interval; level ``n`` of ``u`` holds its value on ``[t_n, t_{n+1})``."""
    if u is None:
        return None
    uv = u.interior() if isinstance(u, Trajectory) else np.asarray(u, dtype=np.complex128)
    if uv.shape[0] == grid.nt + 1:
        uv = uv[:-1]
    return chi_omega(grid, uv)


def solve_forward(y0, u, b: float, a: Coefficients, q: PotentialField | None = None,
                  f: Nonlinearity | None = None, cfg: SchemeConfig = SchemeConfig(),
                  source=None, grid: Grid | None = None) -> Trajectory:
    """Forward solve; ``u`` is a control trajectory (restricted to the control box)
    and ``source`` an optional extra right-hand side given per interval."""
    if grid is None:
        if isinstance(u, Trajectory):
            grid = u.grid
        elif q is not None:
            grid = q.grid
        else:
            raise SolverError("grid required")
    if q is not None and f is not None:
        raise SolverError("give either a potential or a nonlinearity")
    y = _initial(grid, y0)
    src = _source_array(grid, source)
    cs = control_source(grid, u)
    if cs is not None:
        src = cs if src is None else src + cs
    qv = None if q is None or q.is_zero() else q.interior()
    stepper = Stepper(grid, b, a, cfg, qv)
    out = np.empty((grid.nt + 1, grid.size), dtype=np.complex128)
    out[0] = y
    for n in range(grid.nt):
        s = None if src is None else src[n]
        if f is None:
            y = stepper.step(n, y, s)
        else:
            y = _nonlinear_step(stepper, n, y, s, f)
        out[n + 1] = y
    return Trajectory.from_interior(grid, out)


# ---------------------------------------------------------------------------
# nonlinear stepping

def _real_block(M: sp.spmatrix) -> sp.csr_matrix:
    R, I = M.real, M.imag
    return sp.bmat([[R, -I], [I, R]], format="csc")


def _newton(M0: sp.spmatrix, rhs: np.ndarray, th: float, f: Nonlinearity, y: np.ndarray):
    """Solve ``M0 y - th f(y) = rhs`` starting from ``y``; returns ``None`` on failure."""
    n = y.size
    base = _real_block(M0)
    for _ in range(NEWTON_ITERS):
        F = M0 @ y - th * f.f(y) - rhs
        J = f.df(y)
        D = sp.bmat([[sp.diags(J[:, 0, 0]), sp.diags(J[:, 0, 1])],
                     [sp.diags(J[:, 1, 0]), sp.diags(J[:, 1, 1])]], format="csc")
        Jac = (base - th * D).tocsc()
        rF = np.concatenate([F.real, F.imag])
        try:
            dv = spla.spsolve(Jac, -rF)
        except RuntimeError:
            return None
        if not np.all(np.isfinite(dv)):
            return None
        dy = dv[:n] + 1j * dv[n:]
        y = y + dy
        if np.linalg.norm(dy) <= NEWTON_TOL * max(1.0, np.linalg.norm(y)):
            return y
    return None


def _nonlinear_step(stepper: Stepper, n: int, y: np.ndarray, s, f: Nonlinearity) -> np.ndarray:
    """One interval with ``dt`` halving (up to 4 times) when Newton fails."""
    grid = stepper.grid
    th = stepper.th
    L0 = stepper.operator(n)
    L1 = stepper.operator(n + 1)
    eye = stepper.eye
    for level in range(MAX_HALVINGS + 1):
        k = 2 ** level
        h = grid.dt / k
        mass = (1 + 1j * stepper.b) / h
        cur = y
        ok = True
        for sub in range(k):
            # coefficients interpolated linearly inside the interval
            w0, w1 = 1 - sub / k, 1 - (sub + 1) / k
            La = w0 * L0 + (1 - w0) * L1
            Lb = w1 * L0 + (1 - w1) * L1
            M0 = (mass * eye - th * Lb).tocsr()
            rhs = (mass * eye + (1 - th) * La) @ cur + (1 - th) * f.f(cur)
            if s is not None:
                rhs = rhs + s
            nxt = _newton(M0, rhs, th, f, cur)
            if nxt is None:
                ok = False
                break
            cur = nxt
        if ok:
            if level:
                log.debug("step %d accepted after %d halvings", n, level)
            return cur
    raise SolverError(f"nonlinear iteration diverged at step {n} after {MAX_HALVINGS} halvings")


# ---------------------------------------------------------------------------
# backward dual solve

def solve_dual_backward(zT, q: PotentialField | None, b: float, a: Coefficients,
                        cfg: SchemeConfig = SchemeConfig(), grid: Grid | None = None
                        ) -> Trajectory:
    """Solve ``(1+ib) z_t + sum_jk (a^{jk} z_j)_k = q z`` from ``z(T) = zT`` down to ``t = 0``.

    In ``tau = T - t`` this is ``(1+ib) z_tau - sum_jk (a^{jk} z_j)_k = -q z``, a
    forward problem for the same stepper with potential ``-q`` and reversed times.
    """
    if grid is None:
        if q is None:
            raise SolverError("grid required")
        grid = q.grid
    z = _initial(grid, zT)
    times = grid.times[::-1].copy()
    qv = None if q is None or q.is_zero() else -q.interior()[::-1].copy()
    stepper = Stepper(grid, b, a, cfg, qv, times=times)
    out = np.empty((grid.nt + 1, grid.size), dtype=np.complex128)
    out[0] = z
    for n in range(grid.nt):
        z = stepper.step(n, z)
        out[n + 1] = z
    return Trajectory.from_interior(grid, out[::-1])


# ---------------------------------------------------------------------------
# manufactured solutions

@dataclass(frozen=True)
class ManufacturedCase:
    """Exact solution ``exact(t, X)`` and its source ``source(t, X)`` on interior points."""

    exact: Callable
    source: Callable
    b: float
    coeffs: Coefficients
    domain: object
    name: str = "custom"


def sine_mode_case(domain, b: float = 0.7, amplitude: complex = 1 + 0.5j, decay: float = 1.0,
                   diffusion: float = 1.0) -> ManufacturedCase:
    """``y* = amplitude e^{-decay t} prod_j sin(pi (x_j - a_j)/L_j)`` with ``a = diffusion I``."""
    bounds = domain.bounds
    k2 = sum((np.pi / (hi - lo)) ** 2 for lo, hi in bounds)

    def shape(X):
        out = np.ones(X.shape[:-1])
        for j, (lo, hi) in enumerate(bounds):
            out = out * np.sin(np.pi * (X[..., j] - lo) / (hi - lo))
        return out

    def exact(t, X):
        return amplitude * np.exp(-decay * t) * shape(X)

    def source(t, X):
        # (1+ib) y_t - diffusion * Laplacian(y)
        return ((1 + 1j * b) * (-decay) + diffusion * k2) * exact(t, X)

    coeffs = Coefficients.constant(diffusion * np.eye(domain.dimension), name="scaled_identity")
    return ManufacturedCase(exact, source, b, coeffs, domain, "sine_mode")


def zero_case(domain, b: float = 0.7) -> ManufacturedCase:
    z = lambda t, X: np.zeros(X.shape[:-1], complex)  # noqa: E731
    return ManufacturedCase(z, z, b, Coefficients.identity(domain.dimension), domain, "zero")


def mms_solution(case: ManufacturedCase, grid: Grid, cfg: SchemeConfig) -> Trajectory:
    X = grid.interior_points()
    t = grid.times
    th = cfg.theta_scheme
    g = np.stack([case.source(tn, X) for tn in t])
    src = th * g[1:] + (1 - th) * g[:-1]
    y0 = case.exact(0.0, X)
    return solve_forward(y0, None, case.b, case.coeffs, cfg=cfg, source=src, grid=grid)


def mms_errors(case: ManufacturedCase, grid: Grid, cfg: SchemeConfig) -> float:
    """Max-in-time ``L^2`` error of the scheme against the exact solution."""
    sol = mms_solution(case, grid, cfg)
    X = grid.interior_points()
    ex = np.stack([case.exact(tn, X) for tn in grid.times])
    err = Trajectory.from_interior(grid, sol.interior() - ex)
    return float(np.max(norms(err, kind="L2_Omega_at_t")))


@dataclass(frozen=True)
class OrderResult:
    order_time: float
    order_space: float
    details: dict


def _richardson(fields) -> tuple[float, list[float], bool]:
    d1 = float(np.linalg.norm(fields[0] - fields[1]))
    d2 = float(np.linalg.norm(fields[1] - fields[2]))
    if d1 == 0.0 and d2 == 0.0:
        return float("nan"), [d1, d2], True
    if d2 == 0.0:
        return float("inf"), [d1, d2], False
    return float(np.log2(d1 / d2)), [d1, d2], d2 < d1


def mms_order(case: ManufacturedCase, *, nx: int = 20, nt: int = 20, fine_nt: int = 2000,
              fine_nx: int = 255, cfg: SchemeConfig = SchemeConfig()) -> OrderResult:
    """Observed orders from three-level Richardson slopes of final-time solutions.

    Space: ``nx + 1`` in ``{n, 2n, 4n}`` at ``fine_nt`` steps, compared on the
    coarse nodes.  Time: ``nt`` in ``{n, 2n, 4n}`` at ``fine_nx`` nodes.
    Each slope is ``log2(|u_h - u_{h/2}| / |u_{h/2} - u_{h/4}|)``.
    """
    dom = case.domain
    if dom.dimension != 1:
        raise SolverError("mms_order is implemented for 1D domains")
    finals = []
    for k in (1, 2, 4):
        g = Grid(dom, (nx + 1) * k - 1, fine_nt)
        sol = mms_solution(case, g, cfg).values[-1]
        finals.append(sol[::k])
    p_space, d_space, mono_s = _richardson(finals)
    finals = []
    for k in (1, 2, 4):
        g = Grid(dom, fine_nx, nt * k)
        finals.append(mms_solution(case, g, cfg).values[-1])
    p_time, d_time, mono_t = _richardson(finals)
    if not (mono_s and mono_t):
        log.warning("non-monotone refinement sequence (space %s, time %s)", d_space, d_time)
    return OrderResult(p_time, p_space, {"space_diffs": d_space, "time_diffs": d_time,
                                         "monotone": bool(mono_s and mono_t)})
