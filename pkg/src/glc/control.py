"""Penalized HUM null control with an exact discrete adjoint, and the semilinear loop.

The discrete control-to-state map is the theta-scheme of :mod:`glc.solver`
with the control entering as ``chi_omega u^n`` on interval ``n``:

    A_n y^{n+1} = B_n y^n + chi u^n.

States are paired with ``<y, w> = cell * sum y conj(w)`` and controls with
``<u, v>_U = sum_n dt * cell * sum_{i in omega} u^n conj(v^n)``.  With
``p^{nt} = p``, ``r^n = A_n^{-H} p^{n+1}`` and ``p^n = B_n^H r^n`` the adjoint of
``u -> y(T)`` is ``(Phi^* p)^n = chi r^n / dt`` and the adjoint of ``y0 -> y(T)``
is ``p^0``.  The dual functional

    J(zT) = 1/2 |Phi^* zT|_U^2 + eps/2 |zT|^2 + Re <P y0, zT>

is minimized by CG on ``(Phi Phi^* + eps) zT = -P y0``; then ``u = Phi^* zT``
drives the state to ``y(T) = -eps zT``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import solve_banded

from .discretization import (Coefficients, Grid, PotentialField, Trajectory, chi_omega, norms)
from .solver import (Nonlinearity, SchemeConfig, Stepper, _initial, _to_banded,
                     solve_forward)

log = logging.getLogger(__name__)

ADJOINT_TOL = 1e-11
QUOTIENT_FLOOR = 1e-12


class ControlError(RuntimeError):
    pass


@dataclass(frozen=True)
class HUMConfig:
    epsilon: float = 1e-8
    cg_tol: float = 1e-10
    cg_max_iters: int = 500
    record_history: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.cg_tol > 0:
            raise ValueError("cg_tol must be positive")


@dataclass
class ControlReport:
    terminal_norm: float
    control_cost: float
    cg_iters: int
    functional_value: float
    initial_norm: float = 0.0
    duality_bound: float = 0.0
    duality_slack: float = 0.0
    cg_residual: float = 0.0
    history: list = field(default_factory=list)

    def __post_init__(self):
        vals = [self.terminal_norm, self.control_cost, self.functional_value]
        if not all(np.isfinite(vals)):
            raise ControlError("non-finite control report")
        if self.terminal_norm < 0:
            raise ControlError("negative terminal norm")

    @property
    def relative_terminal(self) -> float:
        return self.terminal_norm / self.initial_norm if self.initial_norm > 0 else 0.0

    @property
    def duality_ok(self) -> bool:
        return self.terminal_norm <= self.duality_bound + self.duality_slack

    def as_dict(self) -> dict:
        return {"terminal_norm": self.terminal_norm, "control_cost": self.control_cost,
                "cg_iters": self.cg_iters, "functional_value": self.functional_value,
                "initial_norm": self.initial_norm, "relative_terminal": self.relative_terminal,
                "duality_bound": self.duality_bound, "duality_slack": self.duality_slack,
                "duality_ok": self.duality_ok, "cg_residual": self.cg_residual}


# ---------------------------------------------------------------------------
# discrete maps

class _StepFactor:
    """Solves with ``A`` and ``A^H`` for one step matrix."""

    def __init__(self, A: sp.spmatrix, dim: int):
        self.dim = dim
        if dim == 1:
            self.ab = _to_banded(A)
            self.abH = _to_banded(A.conj().T.tocsr())
        else:
            self.lu = spla.splu(A.tocsc())

    def solve(self, rhs):
        if self.dim == 1:
            return solve_banded((1, 1), self.ab, rhs, check_finite=False)
        return self.lu.solve(rhs)

    def solve_h(self, rhs):
        if self.dim == 1:
            return solve_banded((1, 1), self.abH, rhs, check_finite=False)
        return self.lu.solve(rhs, trans="H")


class DiscreteSystem:
    """Precomputed step matrices of the controlled forward scheme."""

    def __init__(self, grid: Grid, b: float, a: Coefficients, q: PotentialField | None,
                 cfg: SchemeConfig = SchemeConfig()):
        self.grid = grid
        self.cfg = cfg
        qv = None if q is None or q.is_zero() else q.interior()
        self.stepper = Stepper(grid, b, a, cfg, qv)
        constant = qv is None or bool(np.all(qv == qv[0]))
        constant = constant and not a.time_dependent
        self.mask = grid.omega_mask()
        nt = grid.nt
        if constant:
            A, B = self.stepper.A(0), self.stepper.B(0)
            f = _StepFactor(A, grid.dim)
            self.factors = [f] * nt
            self.Bs = [B] * nt
            self.BHs = [B.conj().T.tocsr()] * nt
        else:
            self.factors, self.Bs, self.BHs = [], [], []
            for n in range(nt):
                self.factors.append(_StepFactor(self.stepper.A(n), grid.dim))
                B = self.stepper.B(n)
                self.Bs.append(B)
                self.BHs.append(B.conj().T.tocsr())

    # inner products
    def inner(self, y, w) -> complex:
        return complex(self.grid.cell * np.vdot(w, y))

    def inner_u(self, u, v) -> complex:
        g = self.grid
        return complex(g.dt * g.cell * np.vdot(v[:, self.mask], u[:, self.mask]))

    def step(self, n, y, src=None):
        rhs = self.Bs[n] @ y
        if src is not None:
            rhs = rhs + src
        return self.factors[n].solve(rhs)

    def step_adjoint(self, n, p):
        return self.BHs[n] @ self.factors[n].solve_h(p)

    def forward(self, y0, u=None) -> np.ndarray:
        """All levels of the state (interior vectors); ``u`` has shape (nt, size)."""
        g = self.grid
        out = np.empty((g.nt + 1, g.size), dtype=np.complex128)
        out[0] = y = y0
        for n in range(g.nt):
            src = None if u is None else np.where(self.mask, u[n], 0)
            y = self.step(n, y, src)
            out[n + 1] = y
        return out

    def terminal(self, y0, u=None) -> np.ndarray:
        return self.forward(y0, u)[-1]

    def adjoint(self, p) -> tuple[np.ndarray, np.ndarray]:
        """``(Phi^* p, p^0)``; the first has shape (nt, size)."""
        g = self.grid
        u = np.zeros((g.nt, g.size), dtype=np.complex128)
        for n in range(g.nt - 1, -1, -1):
            r = self.factors[n].solve_h(p)
            u[n] = np.where(self.mask, r, 0) / g.dt
            p = self.BHs[n] @ r
        return u, p

    def gram(self, p, eps: float) -> np.ndarray:
        u, _ = self.adjoint(p)
        return self.terminal(np.zeros_like(p), u) + eps * p


def adjoint_check(b: float, a: Coefficients, q: PotentialField | None, grid: Grid,
                  cfg: SchemeConfig = SchemeConfig(), pairs: int = 20, seed: int = 0,
                  system: DiscreteSystem | None = None) -> dict:
    """Relative mismatches ``|<S y, z> - <y, S^* z>| / (|y| |z|)``.

    ``one_step`` uses the first step, ``full`` the composition of all steps with
    zero control, ``control`` the control-to-terminal map.
    """
    sysm = system or DiscreteSystem(grid, b, a, q, cfg)
    rng = np.random.default_rng(seed)
    n = grid.size

    def rand():
        return rng.standard_normal(n) + 1j * rng.standard_normal(n)

    def nrm(v):
        return np.sqrt(abs(sysm.inner(v, v)))

    one, full, ctrl = 0.0, 0.0, 0.0
    for k in range(pairs):
        y, z = rand(), rand()
        lhs = sysm.inner(sysm.step(0, y), z)
        rhs = sysm.inner(y, sysm.step_adjoint(0, z))
        one = max(one, abs(lhs - rhs) / (nrm(y) * nrm(z)))
        if k < max(2, pairs // 5):
            lhs = sysm.inner(sysm.terminal(y), z)
            _, p0 = sysm.adjoint(z)
            full = max(full, abs(lhs - sysm.inner(y, p0)) / (nrm(y) * nrm(z)))
            u = rng.standard_normal((grid.nt, n)) + 1j * rng.standard_normal((grid.nt, n))
            u = np.where(sysm.mask, u, 0)
            lhs = sysm.inner(sysm.terminal(np.zeros(n, complex), u), z)
            us, _ = sysm.adjoint(z)
            unrm = np.sqrt(abs(sysm.inner_u(u, u)))
            ctrl = max(ctrl, abs(lhs - sysm.inner_u(u, us)) / (unrm * nrm(z)))
    return {"one_step": float(one), "full": float(full), "control": float(ctrl),
            "max": float(max(one, full, ctrl))}


# ---------------------------------------------------------------------------
# HUM

def dual_functional(sysm: DiscreteSystem, zT, Py0, eps: float) -> float:
    u, _ = sysm.adjoint(zT)
    return float(0.5 * sysm.inner_u(u, u).real + 0.5 * eps * sysm.inner(zT, zT).real
                 + sysm.inner(Py0, zT).real)


def dual_gradient(sysm: DiscreteSystem, zT, Py0, eps: float) -> np.ndarray:
    """Gradient of the dual functional for the real pairing ``Re <., .>``."""
    return sysm.gram(zT, eps) + Py0


def _u_trajectory(grid: Grid, u: np.ndarray) -> Trajectory:
    full = np.zeros((grid.nt + 1, grid.size), dtype=np.complex128)
    full[:-1] = u
    return Trajectory.from_interior(grid, full)


def hum_null_control(y0, b: float, a: Coefficients, q: PotentialField | None, hum: HUMConfig,
                     grid: Grid, cfg: SchemeConfig = SchemeConfig(), *,
                     check_adjoint: bool = True) -> tuple[Trajectory, ControlReport]:
    """Control ``u`` (level ``n`` holds the value on ``[t_n, t_{n+1})``) and its certificate."""
    sysm = DiscreteSystem(grid, b, a, q, cfg)
    y0v = _initial(grid, y0)
    y0n = float(np.sqrt(abs(sysm.inner(y0v, y0v))))
    if check_adjoint:
        mis = adjoint_check(b, a, q, grid, cfg, pairs=3, system=sysm)
        if mis["max"] > ADJOINT_TOL:
            raise ControlError(f"discrete adjoint mismatch {mis['max']:.3e}")
    if y0n == 0:
        rep = ControlReport(0.0, 0.0, 0, 0.0, 0.0, 0.0, 0.0, 0.0)
        return Trajectory.zeros(grid), rep
    eps = hum.epsilon
    Py0 = sysm.terminal(y0v)
    n = grid.size
    H = spla.LinearOperator((n, n), matvec=lambda p: sysm.gram(p, eps), dtype=np.complex128)
    history = []
    count = [0]

    def cb(xk):
        count[0] += 1
        if hum.record_history:
            history.append(float(np.linalg.norm(sysm.gram(xk, eps) + Py0) / np.linalg.norm(Py0)))

    zT, info = spla.cg(H, -Py0, rtol=hum.cg_tol, atol=0.0, maxiter=hum.cg_max_iters, callback=cb)
    res = sysm.gram(zT, eps) + Py0
    rel = float(np.linalg.norm(res) / np.linalg.norm(Py0))
    if info != 0 and rel > hum.cg_tol:
        raise ControlError(f"CG stagnation after {count[0]} iterations (relative residual {rel:.3e})")
    u, _ = sysm.adjoint(zT)
    u_traj = _u_trajectory(grid, u)
    yT = solve_forward(y0v, u_traj, b, a, q=q, cfg=cfg, grid=grid).interior()[-1]
    term = float(np.sqrt(abs(sysm.inner(yT, yT))))
    J = dual_functional(sysm, zT, Py0, eps)
    resn = float(np.sqrt(abs(sysm.inner(res, res))))
    slack = resn + float(np.sqrt(2 * eps * abs(sysm.inner(res, zT)))) + 1e-10 * y0n
    rep = ControlReport(
        terminal_norm=term,
        control_cost=float(np.sqrt(abs(sysm.inner_u(u, u)))),
        cg_iters=count[0],
        functional_value=J,
        initial_norm=y0n,
        duality_bound=float(np.sqrt(2 * eps * abs(J))),
        duality_slack=slack,
        cg_residual=rel,
        history=history,
    )
    return u_traj, rep


# ---------------------------------------------------------------------------
# semilinear loop

def growth_check(f: Nonlinearity, magnitudes=None, directions: int = 8):
    """Ratios ``max_dir |f(s)| / (|s| ln^{1/2}|s|)``; verdict ``pass`` iff strictly
    decreasing over the last four samples (or identically zero)."""
    if magnitudes is None:
        magnitudes = [10.0 ** k for k in range(2, 9)]
    phases = np.exp(2j * np.pi * np.arange(directions) / directions)
    ratios = []
    for m in magnitudes:
        with np.errstate(over="ignore", invalid="ignore"):
            vals = np.abs(np.asarray(f.f(m * phases)))
        if not np.all(np.isfinite(vals)):
            log.warning("growth check truncated at |s| = %g (overflow)", m)
            break
        ratios.append(float(np.max(vals) / (m * np.sqrt(np.log(m)))))
    if ratios and all(r == 0 for r in ratios):
        return ratios, "pass"
    tail = ratios[-4:]
    ok = len(tail) >= 2 and all(b < a for a, b in zip(tail, tail[1:]))
    return ratios, "pass" if ok else "warn"


def linearized_potential(f: Nonlinearity, y: Trajectory) -> PotentialField:
    """``q = f(y)/y``, with ``Re tr df(0) / 2`` where ``|y| <= 1e-12``."""
    v = y.values
    small = np.abs(v) <= QUOTIENT_FLOOR
    safe = np.where(small, 1.0, v)
    q = np.where(small, f.slope_at_zero(), np.asarray(f.f(safe)) / safe)
    return PotentialField(y.grid, q)


@dataclass
class SemilinearResult:
    control: Trajectory
    report: ControlReport
    iterations: list
    converged: bool
    state: Trajectory


def semilinear_null_control(y0, b: float, a: Coefficients, f: Nonlinearity, hum: HUMConfig,
                            grid: Grid, cfg: SchemeConfig = SchemeConfig(), *,
                            max_iters: int = 30, damping: float = 1.0, tol: float = 1e-6,
                            divergence_factor: float = 1e6) -> SemilinearResult:
    """Fixed-point iteration on ``q_k = f(y_k)/y_k`` with HUM controls for each ``q_k``."""
    ratios, verdict = growth_check(f)
    if verdict != "pass":
        log.warning("growth check did not pass for %s: %s", f.name, ratios)
    y0v = _initial(grid, y0)
    y0n = float(norms(grid.embed(y0v), grid, "L2_Omega_at_t"))
    y_k = solve_forward(y0v, None, b, a, cfg=cfg, grid=grid)
    q_k = linearized_potential(f, y_k)
    log_rows = []
    prev = np.inf
    converged = False
    u = Trajectory.zeros(grid)
    for k in range(max_iters):
        u, rep = hum_null_control(y0v, b, a, q_k, hum, grid, cfg, check_adjoint=(k == 0))
        y_new = solve_forward(y0v, u, b, a, q=q_k, cfg=cfg, grid=grid)
        diff = norms(y_new - y_k, kind="L2_Q")
        if diff > prev and damping == 1.0:
            damping = 0.5
            log.info("iterate %d grew; damping set to 0.5", k)
        if damping != 1.0:
            y_new = y_k + (y_new - y_k).scale(damping)
        ynorm = norms(y_new, kind="L2_Q")
        log_rows.append({"iteration": k + 1, "update": float(diff), "state_norm": float(ynorm),
                         "r": float(q_k.r), "cg_iters": rep.cg_iters,
                         "terminal_linear": rep.terminal_norm, "damping": damping})
        if not np.isfinite(ynorm) or ynorm > divergence_factor * max(y0n, 1e-300):
            raise ControlError(f"fixed-point iteration diverged at iterate {k + 1}")
        q_new = linearized_potential(f, y_new)
        same = bool(np.array_equal(q_new.values, q_k.values))
        y_k, q_k, prev = y_new, q_new, diff
        if same or diff <= tol * y0n:
            converged = True
            break
    if not converged:
        log.warning("fixed-point loop stopped at max_iters=%d without convergence", max_iters)
    y_true = solve_forward(y0v, u, b, a, f=f, cfg=cfg, grid=grid)
    yT = y_true.values[-1]
    term = float(norms(yT, grid, "L2_Omega_at_t"))
    final = ControlReport(terminal_norm=term, control_cost=rep.control_cost,
                          cg_iters=rep.cg_iters, functional_value=rep.functional_value,
                          initial_norm=y0n, duality_bound=rep.duality_bound,
                          duality_slack=rep.duality_slack, cg_residual=rep.cg_residual)
    return SemilinearResult(u, final, log_rows, converged, y_true)
