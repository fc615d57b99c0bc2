"""Acceptance criteria 1-10, one test each.  Each prints a PASS/FAIL line."""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from glc import identity as ident
from glc.cli import main as cli_main
from glc.control import (DiscreteSystem, HUMConfig, adjoint_check, dual_functional,
                         dual_gradient, growth_check, hum_null_control, semilinear_null_control)
from glc.discretization import Coefficients, Grid, PotentialField, level_norms
from glc.experiments import (CarlemanSweepConfig, carleman_sweep, constant_vs_potential,
                             fourier_ensemble, observability_estimate, pure_mode_ensemble,
                             single_mode_reference)
from glc.solver import (log_power_nonlinearity, mms_order, sine_mode_case, solve_dual_backward,
                        solve_forward)
from glc.weights import DomainSpec, WeightSpec, build_psi, eval_weights, rho_t_constant

STD = DomainSpec.interval(T=0.5, omega=(0.3, 0.7), omega0=(0.4, 0.6))
IDENT = Coefficients.identity(1)


@pytest.fixture
def verdict(capsys):
    def report(num, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num}: {title} {detail}".rstrip())
        assert ok, f"criterion {num} failed: {detail}"
    return report


@pytest.fixture(scope="module")
def std_grid():
    return Grid(STD, 199, 400)


def sine0(grid, amp=1.0):
    return amp * np.sin(np.pi * grid.interior_points()[:, 0]).astype(complex)


def test_criterion_01_identity_suite(verdict):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    worst = 0.0
    ok = True
    for c in range(200):
        m = (1, 2, 3)[c % 3]
        spec, z = ident.random_configuration(rng, m)
        pts = ident.sample_points(rng, m, 20)
        res_id, res_f = ident.verify(spec, z, pts)
        ok &= res_id.residual_ok(1e-9) and res_f.residual_ok(1e-9)
        worst = max(worst, res_id.value / max(res_id.scale, 1), res_f.value / max(res_f.scale, 1))
    elapsed = time.perf_counter() - start
    verdict(1, "identity and factorization residuals", ok and elapsed <= 60,
            f"(worst relative {worst:.2e}, {elapsed:.1f} s)")


def test_criterion_02_pointwise_estimates(verdict):
    rng = np.random.default_rng(11)
    ok = True
    worst = np.inf
    for c in range(50):
        m = (1, 2, 3)[c % 3]
        for b in (0.0, 0.5, 2.0):
            pts = ident.sample_points(rng, m, 100)
            spec, z = ident.random_elliptic_configuration(rng, m, b, pts, s0=0.5)
            for check in (ident.parabolic_pointwise_check, ident.modified_pointwise_check):
                res = check(b, spec, z, pts)
                ok &= res.slack_ok(1e-10)
                worst = min(worst, res.value / max(res.scale, 1))
    verdict(2, "pointwise estimates", ok, f"(min relative slack {worst:.2e})")


def test_criterion_03_weight_laws(verdict):
    rng = np.random.default_rng(3)
    T = 0.5
    psi = build_psi(STD)
    spec = WeightSpec(3.0, 2.0, psi, T)
    t = rng.uniform(0, T, 10_000)
    t = np.clip(t, 1e-9, T - 1e-9)
    x = rng.uniform(0, 1, 10_000)
    w = eval_weights(spec, t, x)
    representable = w.ell >= -700
    signs = bool(np.all(w.rho < 0) and np.all(np.isfinite(w.ell)) and np.all(w.ell < 0))
    theta_ok = bool(np.all((w.theta[representable] > 0) & (w.theta[representable] < 1)))
    C = rho_t_constant(spec, t, x)
    bound_ok = bool(np.all(np.abs(w.rho_t) <= C * spec.peak * w.phi ** 2 * (1 + 1e-12))) and C <= T
    # central differences on samples away from the time poles
    h = 1e-5
    td = rng.uniform(0.05 * T, 0.95 * T, 1000)
    xd = rng.uniform(0.01, 0.99, 1000)
    ev = lambda tt, xx: eval_weights(spec, tt, xx)  # noqa: E731
    w0 = ev(td, xd)
    rel = lambda fd, an: float(np.max(np.abs(fd - an) / (1 + np.abs(an))))  # noqa: E731
    errs = [
        rel((ev(td, xd + h).ell - ev(td, xd - h).ell) / (2 * h), w0.ell_j[:, 0]),
        rel((ev(td + h, xd).ell - ev(td - h, xd).ell) / (2 * h), w0.ell_t),
        rel((ev(td, xd + h).ell_j[:, 0] - ev(td, xd - h).ell_j[:, 0]) / (2 * h), w0.ell_jk[:, 0, 0]),
        rel((ev(td + h, xd).rho - ev(td - h, xd).rho) / (2 * h), w0.rho_t),
    ]
    ok = signs and theta_ok and bound_ok and max(errs) <= 1e-6
    verdict(3, "weight laws", ok,
            f"(recorded C = {C:.4f} <= T, max derivative error {max(errs):.2e}, "
            f"{int(np.sum(~representable))} samples below the underflow threshold)")


def test_criterion_04_solver(verdict, std_grid):
    res = mms_order(sine_mode_case(STD, b=0.7))
    orders_ok = abs(res.order_space - 2) <= 0.3 and abs(res.order_time - 2) <= 0.3
    decay = []
    for b in (0.0, 1.0):
        n = level_norms(solve_forward(sine0(std_grid), None, b, IDENT, grid=std_grid))
        exact = n[0] * np.exp(-np.pi ** 2 * std_grid.times / (1 + b * b))
        decay.append(float(np.max(np.abs(n - exact) / exact)))
    rng = np.random.default_rng(0)
    zT = rng.standard_normal(std_grid.size) + 1j * rng.standard_normal(std_grid.size)
    q = PotentialField.constant(std_grid, 2.0)
    z1 = solve_dual_backward(zT, q, 2.0, IDENT, grid=std_grid)
    z2 = solve_dual_backward(zT.conj(), q, -2.0, IDENT, grid=std_grid)
    sym = float(np.max(np.abs(z1.values - z2.values.conj())) / np.max(np.abs(z1.values)))
    ok = orders_ok and max(decay) <= 1e-3 and sym <= 1e-12
    verdict(4, "solver", ok, f"(orders space {res.order_space:.3f} time {res.order_time:.3f}, "
                            f"decay error {max(decay):.1e}, conjugation gap {sym:.1e})")


def test_criterion_05_adjoint(verdict, std_grid):
    mis = max(adjoint_check(b, IDENT, None, std_grid)["max"] for b in (0.0, 2.0))
    sysm = DiscreteSystem(std_grid, 2.0, IDENT, None)
    rng = np.random.default_rng(5)
    rand = lambda: rng.standard_normal(std_grid.size) + 1j * rng.standard_normal(std_grid.size)  # noqa: E731
    Py0 = sysm.terminal(sine0(std_grid))
    z = rand()
    eps = 1e-8
    grad = dual_gradient(sysm, z, Py0, eps)
    worst = 0.0
    for _ in range(10):
        d = rand()
        d /= np.sqrt(abs(sysm.inner(d, d)))
        h = 1e-6
        fd = (dual_functional(sysm, z + h * d, Py0, eps)
              - dual_functional(sysm, z - h * d, Py0, eps)) / (2 * h)
        an = sysm.inner(grad, d).real
        worst = max(worst, abs(fd - an) / abs(an))
    ok = mis <= 1e-11 and worst <= 1e-6
    verdict(5, "discrete adjoint", ok, f"(mismatch {mis:.1e}, gradient error {worst:.1e})")


def test_criterion_06_null_control(verdict, std_grid):
    y0 = sine0(std_grid)
    ok = True
    notes = []
    for b in (0.0, 2.0):
        terms = []
        for eps in (1e-4, 1e-6, 1e-8):
            start = time.perf_counter()
            _, rep = hum_null_control(y0, b, IDENT, None, HUMConfig(epsilon=eps), std_grid)
            elapsed = time.perf_counter() - start
            ok &= rep.duality_ok and rep.cg_iters <= 500 and elapsed <= 120
            terms.append(rep.terminal_norm)
            if eps == 1e-8:
                ok &= rep.relative_terminal <= 1e-2
                notes.append(f"b={b:g}: {rep.relative_terminal:.1e} in {rep.cg_iters} iters")
        ok &= all(t1 <= t0 + 1e-10 for t0, t1 in zip(terms, terms[1:]))
    verdict(6, "null control", ok, "(" + "; ".join(notes) + ")")


def test_criterion_07_semilinear(verdict, std_grid):
    f = log_power_nonlinearity(0.25)
    y0 = sine0(std_grid, 0.1)
    assert np.max(np.abs(y0)) == pytest.approx(0.1, rel=1e-3)
    res = semilinear_null_control(y0, 0.0, IDENT, f, HUMConfig(epsilon=1e-8), std_grid)
    _, v_good = growth_check(f)
    _, v_bad = growth_check(log_power_nonlinearity(1.0))
    ok = (res.converged and len(res.iterations) <= 30 and res.report.relative_terminal <= 1e-2
          and v_good == "pass" and v_bad == "warn")
    verdict(7, "semilinear control", ok,
            f"({len(res.iterations)} iterations, terminal ratio {res.report.relative_terminal:.1e}, "
            f"growth {v_good}/{v_bad})")


def test_criterion_08_carleman(verdict, std_grid, tmp_path):
    cfg = CarlemanSweepConfig((3.0,), (20.0, 40.0, 80.0), 16, 3)
    rows = carleman_sweep(cfg, std_grid, IDENT, build_psi(STD))
    vals = [r["C_emp"] for r in rows]
    finite = all(np.isfinite(vals))
    spread = max(vals) / min(vals)
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"seed": 3}))
    outs = []
    for k in range(2):
        prefix = str(tmp_path / f"run{k}")
        assert cli_main(["carleman-sweep", "--config", str(conf), "--output", prefix]) == 0
        outs.append(Path(prefix + ".sweep.csv").read_bytes())
    ok = finite and spread <= 5 and outs[0] == outs[1]
    verdict(8, "Carleman sweep", ok, f"(C_emp {', '.join(f'{v:.6f}' for v in vals)}; "
                                     f"max/min {spread:.6f})")


def test_criterion_09_observability_law(verdict, std_grid):
    res = constant_vs_potential(0.0, [0.0, 2.0, 4.0, 8.0], 16, 1, std_grid, IDENT)
    lnC = [p["ln_C_obs"] for p in res["per_r"]]
    zTs = pure_mode_ensemble(std_grid, 16, 1)
    rep = observability_estimate(0.0, None, 16, 1, std_grid, IDENT, zTs=zTs)
    ref = single_mode_reference(std_grid, 0.0, 0.0)["ratio"]
    gap = abs(rep.C_obs - ref) / ref
    ok = res["monotone"] and res["fit"]["slope"] >= 0 and gap <= 1e-3
    verdict(9, "observability law", ok,
            f"(ln C_obs {', '.join(f'{v:.3f}' for v in lnC)}; slope {res['fit']['slope']:.4f}; "
            f"oracle gap {gap:.1e})")


SMALL = {
    "verify-identity": {"identity_configs": 12, "pointwise_configs": 3, "pointwise_points": 10},
    "carleman-sweep": {"nx": 49, "nt": 100, "ensemble_size": 4},
    "observability": {"nx": 49, "nt": 100, "ensemble_size": 4, "r": 2.0, "potential": "bump"},
    "constant-vs-potential": {"nx": 49, "nt": 100, "ensemble_size": 3, "b_list": [0, 1]},
    "null-control": {"nx": 49, "nt": 100, "b": 2.0, "epsilon_list": [1e-4, 1e-6]},
    "semilinear-control": {"nx": 49, "nt": 100, "y0_amplitude": 0.1, "epsilon": 1e-6},
    "mms": {"mms_nx": 10, "mms_nt": 10, "mms_fine_nx": 63, "mms_fine_nt": 400},
}


def test_criterion_10_determinism(verdict, tmp_path, monkeypatch):
    same = []
    for exp, extra in SMALL.items():
        conf = tmp_path / f"{exp}.json"
        conf.write_text(json.dumps({"seed": 17, **extra}))
        digests = []
        for k, threads in enumerate(("1", "3")):
            monkeypatch.setenv("GLC_THREADS", threads)
            prefix = tmp_path / f"{exp}_{k}" / "out"
            assert cli_main([exp, "--config", str(conf), "--output", str(prefix)]) == 0
            files = sorted(prefix.parent.glob("out.*.csv"))
            digests.append([(p.name, p.read_bytes()) for p in files])
        same.append(bool(digests[0]) and digests[0] == digests[1])
    verdict(10, "determinism", all(same),
            f"({sum(same)}/{len(same)} experiments byte-identical across reruns)")
