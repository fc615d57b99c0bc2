"""Ensemble experiments on the dual system ``(1+ib) z_t + sum_jk (a^{jk} z_j)_k = q z``.

Terminal data are random combinations of low and mid sine modes with unit
``L^2`` norm.  All weighted integrals are accumulated in log space, so the
weighted quantities are meaningful even when ``theta^2`` underflows.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.special import logsumexp

from .discretization import (Coefficients, Grid, OperatorCache, PotentialField, Trajectory,
                             apply_G, full_omega_mask, level_norms, log_integrate, lp_norm_space,
                             norms)
from .solver import SchemeConfig, solve_dual_backward
from .weights import WeightSpec, eval_weights

DEGENERATE = 1e-300


class ExperimentError(ValueError):
    pass


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("GLC_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn: Callable, items: Sequence) -> list:
    """Order-preserving map over at most ``GLC_THREADS`` worker threads."""
    n = worker_count()
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# ensembles

def sine_mode(grid: Grid, modes: Sequence[int]) -> np.ndarray:
    """Product sine mode on the interior nodes, e.g. ``modes=(k,)`` in 1D."""
    pts = grid.interior_points()
    out = np.ones(len(pts))
    for j, k in enumerate(modes):
        lo, hi = grid.domain.bounds[j]
        out = out * np.sin(k * np.pi * (pts[:, j] - lo) / (hi - lo))
    return out.astype(np.complex128)


def _unit(grid: Grid, v: np.ndarray) -> np.ndarray:
    n = norms(grid.embed(v), grid, "L2_Omega_at_t")
    if n == 0:
        raise ExperimentError("zero terminal datum")
    return v / n


def fourier_ensemble(grid: Grid, size: int, seed: int, max_mode: int | None = None
                     ) -> list[np.ndarray]:
    """Random complex combinations of modes ``1..max_mode`` (default ``n/4``), unit norm."""
    if size < 1:
        raise ExperimentError("ensemble size must be >= 1")
    rng = np.random.default_rng(seed)
    kmax = [max(1, (n + 1) // 4) for n in grid.counts] if max_mode is None else \
        [max_mode] * grid.dim
    basis = []
    for idx in np.ndindex(*kmax):
        basis.append(sine_mode(grid, [i + 1 for i in idx]))
    basis = np.array(basis)
    out = []
    while len(out) < size:
        c = rng.standard_normal(len(basis)) + 1j * rng.standard_normal(len(basis))
        v = c @ basis
        if np.any(v):
            out.append(_unit(grid, v))
    return out


def pure_mode_ensemble(grid: Grid, size: int, seed: int, modes=(1,)) -> list[np.ndarray]:
    """One sine mode with seeded random unit phases."""
    rng = np.random.default_rng(seed)
    base = _unit(grid, sine_mode(grid, modes))
    return [base * np.exp(2j * np.pi * rng.random()) for _ in range(size)]


def dual_trajectories(zTs, q: PotentialField | None, b: float, a: Coefficients, grid: Grid,
                      cfg: SchemeConfig = SchemeConfig()) -> list[Trajectory]:
    return parallel_map(lambda zT: solve_dual_backward(zT, q, b, a, cfg, grid=grid), list(zTs))


# ---------------------------------------------------------------------------
# weighted integrals

@dataclass(frozen=True)
class WeightGrids:
    """``2 ell``, ``phi`` on levels (ends padded) and ``2 ell`` at half levels."""

    two_ell: np.ndarray
    phi: np.ndarray
    two_ell_half: np.ndarray
    max_two_ell: float


def weight_grids(spec: WeightSpec, grid: Grid) -> WeightGrids:
    pts = grid.full_points()
    t = grid.times
    shape = (grid.nt + 1,) + grid.full_shape
    two_ell = np.full(shape, -np.inf)
    phi = np.zeros(shape)
    inner = t[1:-1].reshape((-1,) + (1,) * grid.dim)
    w = eval_weights(spec, inner, pts[None])
    two_ell[1:-1] = 2 * w.ell
    phi[1:-1] = w.phi
    th = (t[:-1] + t[1:]) / 2
    wh = eval_weights(spec, th.reshape((-1,) + (1,) * grid.dim), pts[None])
    return WeightGrids(two_ell, phi, 2 * wh.ell, float(np.max(two_ell)))


def gradient_sq(traj: Trajectory) -> np.ndarray:
    """``|grad z|^2`` by centered differences on interior nodes (zero on the boundary)."""
    g = traj.grid
    v = traj.values
    out = np.zeros(v.shape)
    inner = (slice(None),) + (slice(1, -1),) * g.dim
    for j, h in enumerate(g.spacings):
        ax = 1 + j
        fwd = [slice(None)] + [slice(1, -1)] * g.dim
        bwd = list(fwd)
        fwd[ax] = slice(2, None)
        bwd[ax] = slice(0, -2)
        d = (v[tuple(fwd)] - v[tuple(bwd)]) / (2 * h)
        out[inner] += np.abs(d) ** 2
    return out


def _log_half_integral(grid: Grid, vals_half: np.ndarray, two_ell_half: np.ndarray) -> float:
    """Midpoint-in-time, trapezoid-in-space log integral over the intervals."""
    w = grid.space_weights()
    keep = vals_half > 0
    keep &= np.broadcast_to(w > 0, vals_half.shape)
    if not np.any(keep):
        return -np.inf
    lw = np.log(grid.dt) + np.log(np.broadcast_to(w, vals_half.shape)[keep])
    return float(logsumexp(two_ell_half[keep] + np.log(vals_half[keep]) + lw))


@dataclass
class CarlemanTerms:
    log_z: float        # log int phi^3 theta^2 |z|^2 over Q
    log_grad: float     # log int phi theta^2 |grad z|^2 over Q
    log_Gz: float       # log int theta^2 |G z|^2 over Q
    log_obs: float      # log int phi^3 theta^2 |z|^2 over (0,T) x omega


def carleman_terms(traj: Trajectory, wg: WeightGrids, b: float, ops: OperatorCache,
                   theta_t: float) -> CarlemanTerms:
    g = traj.grid
    zz = np.abs(traj.values) ** 2
    gz = gradient_sq(traj)
    phi3 = wg.phi ** 3
    lz = log_integrate(g, phi3 * zz, wg.two_ell)
    lg = log_integrate(g, wg.phi * gz, wg.two_ell)
    lo = log_integrate(g, phi3 * zz, wg.two_ell, omega_only=True)
    G = np.stack([apply_G(traj, n, b, ops, theta_t) for n in range(g.nt)])
    Gfull = np.abs(g.embed(G)) ** 2
    lG = _log_half_integral(g, Gfull, wg.two_ell_half)
    return CarlemanTerms(lz, lg, lG, lo)


def _logaddexp(*xs) -> float:
    return float(np.logaddexp.reduce(np.array(xs, dtype=float)))


# ---------------------------------------------------------------------------
# Carleman sweep

@dataclass(frozen=True)
class CarlemanSweepConfig:
    mu_list: tuple
    lambda_list: tuple
    ensemble_size: int
    rng_seed: int
    b: float = 0.0
    q: PotentialField | None = None

    def __post_init__(self):
        if any(v <= 1 for v in self.mu_list) or any(v <= 1 for v in self.lambda_list):
            raise ExperimentError("lambda and mu must be > 1")
        if self.ensemble_size < 1:
            raise ExperimentError("ensemble_size must be >= 1")


def carleman_sweep(cfg: CarlemanSweepConfig, grid: Grid, a: Coefficients, psi,
                   scheme: SchemeConfig = SchemeConfig(), zTs=None, scale: float = 1.0) -> list[dict]:
    """Rows ``(mu, lambda, samples_used, samples_skipped, C_emp)``.

    ``C_emp`` is the max over samples of the weighted left side divided by
    ``(1 + b^2)`` times the bracket on the right.
    """
    if zTs is None:
        zTs = fourier_ensemble(grid, cfg.ensemble_size, cfg.rng_seed)
    zTs = [scale * np.asarray(z) for z in zTs]
    valid = [z for z in zTs if np.any(z)]
    if not valid:
        raise ExperimentError("no valid samples")
    trajs = dual_trajectories(valid, cfg.q, cfg.b, a, grid, scheme)
    skipped_zero = len(zTs) - len(valid)
    ops = OperatorCache(grid, a)
    theta_t = 1.0 - scheme.theta_scheme
    rows = []
    for mu in cfg.mu_list:
        for lam in cfg.lambda_list:
            spec = WeightSpec(float(lam), float(mu), psi, grid.domain.horizon)
            wg = weight_grids(spec, grid)
            terms = parallel_map(lambda tr: carleman_terms(tr, wg, cfg.b, ops, theta_t), trajs)
            best, used, skipped = -np.inf, 0, skipped_zero
            for t in terms:
                k = 3 * math.log(lam) + 4 * math.log(mu)
                lhs = _logaddexp(k + t.log_z, math.log(lam) + 2 * math.log(mu) + t.log_grad)
                rhs = _logaddexp(t.log_Gz, k + t.log_obs)
                if not np.isfinite(rhs) or rhs - wg.max_two_ell < math.log(DEGENERATE):
                    skipped += 1
                    continue
                used += 1
                best = max(best, lhs - math.log(1 + cfg.b ** 2) - rhs)
            if used == 0:
                raise ExperimentError("no valid samples")
            rows.append({"mu": float(mu), "lambda": float(lam), "samples_used": used,
                         "samples_skipped": skipped, "C_emp": float(math.exp(best))})
    return rows


# ---------------------------------------------------------------------------
# observability

@dataclass
class ObservabilityReport:
    ratios: list
    C_obs: float
    r: float
    b: float
    fit: dict | None = None
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not all(np.isfinite(self.ratios)) or any(x <= 0 for x in self.ratios):
            raise ExperimentError("observability ratios must be finite and positive")


def observation_ratio(traj: Trajectory) -> float:
    z0 = norms(traj.values[0], traj.grid, "L2_Omega_at_t")
    obs = norms(traj, kind="L2_omega_Q")
    if obs == 0:
        raise ExperimentError("dual solution vanishes on the observation set")
    return float(z0 / obs)


def observability_estimate(b: float, q: PotentialField | None, ensemble_size: int, seed: int,
                           grid: Grid, a: Coefficients, cfg: SchemeConfig = SchemeConfig(),
                           zTs=None) -> ObservabilityReport:
    if zTs is None:
        zTs = fourier_ensemble(grid, ensemble_size, seed)
    if any(not np.any(z) for z in zTs):
        raise ExperimentError("zero terminal datum in ensemble")
    trajs = dual_trajectories(zTs, q, b, a, grid, cfg)
    ratios = [observation_ratio(t) for t in trajs]
    r = 0.0 if q is None else q.r
    return ObservabilityReport(ratios, float(max(ratios)), float(r), float(b))


def potential_profile(grid: Grid, name: str = "constant") -> np.ndarray:
    """Spatial profile with unit potential norm, on the full nodes."""
    pts = grid.full_points()
    if name == "constant":
        prof = np.ones(grid.full_shape)
    elif name == "bump":
        prof = np.ones(grid.full_shape)
        for j, (lo, hi) in enumerate(grid.domain.bounds):
            s = (pts[..., j] - lo) / (hi - lo)
            prof = prof * np.sin(np.pi * s) ** 2
    else:
        raise ExperimentError(f"unknown potential profile {name!r}")
    return prof / lp_norm_space(grid, prof, grid.dim)


def scaled_potential(grid: Grid, r: float, profile: str = "constant", sign: float = 1.0
                     ) -> PotentialField:
    prof = potential_profile(grid, profile)
    return PotentialField(grid, np.broadcast_to(sign * r * prof, (grid.nt + 1,) + grid.full_shape))


def constant_vs_potential(b: float, r_list: Sequence[float], ensemble_size: int, seed: int,
                          grid: Grid, a: Coefficients, cfg: SchemeConfig = SchemeConfig(),
                          profile: str = "constant", signs=(1.0, -1.0), zTs=None) -> dict:
    """``C_obs(r)`` as the max over potentials ``sign * r * profile``, and a fit of
    ``ln C_obs`` against ``r^2``."""
    if len(set(float(r) for r in r_list)) < 3:
        raise ExperimentError("fit needs at least 3 distinct r values")
    if zTs is None:
        zTs = fourier_ensemble(grid, ensemble_size, seed)
    rows, per_r = [], []
    for r in r_list:
        best = None
        for s in (signs if r != 0 else (1.0,)):
            q = None if r == 0 else scaled_potential(grid, r, profile, s)
            rep = observability_estimate(b, q, ensemble_size, seed, grid, a, cfg, zTs=zTs)
            for i, ratio in enumerate(rep.ratios):
                rows.append({"sample_id": i, "r": float(r), "sign": float(s), "ratio": ratio})
            if best is None or rep.C_obs > best.C_obs:
                best = rep
        per_r.append({"r": float(r), "C_obs": best.C_obs, "ln_C_obs": math.log(best.C_obs)})
    x = np.array([p["r"] ** 2 for p in per_r])
    y = np.array([p["ln_C_obs"] for p in per_r])
    slope, intercept = np.polyfit(x, y, 1)
    mono = bool(np.all(np.diff(y) >= 0))
    return {"per_r": per_r, "rows": rows,
            "fit": {"slope": float(slope), "intercept": float(intercept)},
            "monotone": mono}


def observability_b_sweep(b_list, r: float, ensemble_size: int, seed: int, grid: Grid,
                          a: Coefficients, cfg: SchemeConfig = SchemeConfig()) -> list[dict]:
    zTs = fourier_ensemble(grid, ensemble_size, seed)
    q = None if r == 0 else scaled_potential(grid, r)
    return [{"b": float(b), "r": float(r),
             "C_obs": observability_estimate(b, q, ensemble_size, seed, grid, a, cfg, zTs).C_obs}
            for b in b_list]


# ---------------------------------------------------------------------------
# reduced inequality and energy ratio

def lambda_threshold(b: float, r: float, c: float = 1.0) -> float:
    return c * (1 + b * b) * (1 + r * r)


def reduced_inequality_check(lam: float, mu: float, b: float, q: PotentialField | None,
                             ensemble_size: int, seed: int, grid: Grid, a: Coefficients, psi,
                             cfg: SchemeConfig = SchemeConfig(), c: float = 1.0,
                             zTs=None) -> dict:
    """Per-sample ratio ``int_Q phi^3 theta^2 |z|^2 / int_omega phi^3 theta^2 |z|^2``."""
    r = 0.0 if q is None else q.r
    if zTs is None:
        zTs = fourier_ensemble(grid, ensemble_size, seed)
    trajs = dual_trajectories(zTs, q, b, a, grid, cfg)
    wg = weight_grids(WeightSpec(float(lam), float(mu), psi, grid.domain.horizon), grid)
    ratios, skipped = [], 0
    for tr in trajs:
        zz = (wg.phi ** 3) * np.abs(tr.values) ** 2
        num = log_integrate(grid, zz, wg.two_ell)
        den = log_integrate(grid, zz, wg.two_ell, omega_only=True)
        if not np.isfinite(den) or den - wg.max_two_ell < math.log(DEGENERATE):
            skipped += 1
            continue
        ratios.append(float(math.exp(num - den)))
    if not ratios:
        raise ExperimentError("no valid samples")
    thr = lambda_threshold(b, r, c)
    return {"ratios": ratios, "C_emp": max(ratios), "skipped": skipped,
            "lambda_threshold": thr, "above_threshold": bool(lam >= thr), "r": float(r)}


def energy_ratio(trajectories: Sequence[Trajectory], q: PotentialField | None = None,
                 b: float = 0.0) -> dict:
    """``max over samples of |z(0)| / max_t |z(t)|`` (0 for vanishing samples)."""
    ratios = []
    for tr in trajectories:
        n = level_norms(tr)
        top = float(np.max(n))
        ratios.append(0.0 if top == 0 else float(n[0] / top))
    ratio = max(ratios) if ratios else 0.0
    r = 0.0 if q is None else q.r
    T = trajectories[0].grid.domain.horizon if trajectories else 1.0
    c_emp = math.log(ratio) / ((1 + r * r) * T) if ratio > 0 else float("-inf")
    return {"ratio": ratio, "ratios": ratios, "c_emp": c_emp}


# ---------------------------------------------------------------------------
# single-mode ODE reference

def single_mode_reference(grid: Grid, b: float, qc: complex, modes=(1,), diffusion: float = 1.0,
                          rtol: float = 1e-12, atol: float = 1e-14) -> dict:
    """Observation ratio and energy ratio for ``z = a(t) * mode`` with constant ``q``.

    ``a`` solves ``(1+ib) a' = (k^2 + q) a`` backward from ``a(T) = 1``, integrated
    with DOP853 together with ``int_0^T |a|^2``.  Spatial norms of the mode use
    the grid quadrature.
    """
    T = grid.domain.horizon
    k2 = diffusion * sum((k * np.pi / (hi - lo)) ** 2
                         for k, (lo, hi) in zip(modes, grid.domain.bounds))
    rate = (k2 + qc) / (1 + 1j * b)

    def rhs(s, y):
        # s = T - t; da/ds = -rate * a; running integral of |a|^2
        av = y[0] + 1j * y[1]
        d = -rate * av
        return [d.real, d.imag, abs(av) ** 2]

    sol = solve_ivp(rhs, (0.0, T), [1.0, 0.0, 0.0], method="DOP853", rtol=rtol, atol=atol,
                    dense_output=True)
    a0 = complex(sol.y[0, -1], sol.y[1, -1])
    int_a2 = float(sol.y[2, -1])
    ss = np.linspace(0.0, T, 2001)
    amp = np.abs(sol.sol(ss)[0] + 1j * sol.sol(ss)[1])
    mode = grid.embed(sine_mode(grid, modes))
    w = grid.space_weights()
    m_omega = float(np.sum(w * np.abs(mode) ** 2 * full_omega_mask(grid)))
    m_all = float(np.sum(w * np.abs(mode) ** 2))
    return {"ratio": abs(a0) * math.sqrt(m_all) / math.sqrt(int_a2 * m_omega),
            "energy_ratio": abs(a0) / float(np.max(amp)),
            "a0": a0}
