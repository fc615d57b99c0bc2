"""Command line entry point: ``glc <subcommand> --config <path> [--set k=v]... [--output prefix]``.

Exit codes: 0 success, 2 invalid configuration or precondition, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pydantic
import scipy

from . import __version__
from . import identity as ident
from .config import EXPERIMENTS, ConfigError, RunConfig, load_config
from .control import (ControlError, adjoint_check, hum_null_control, semilinear_null_control)
from .discretization import DiscretizationError, to_binary
from .experiments import (CarlemanSweepConfig, ExperimentError, carleman_sweep,
                          constant_vs_potential, fourier_ensemble, observability_b_sweep,
                          observability_estimate, pure_mode_ensemble, single_mode_reference)
from .solver import SolverError, mms_order, sine_mode_case
from .weights import WeightError, build_psi

log = logging.getLogger("glc")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


@dataclass
class Table:
    columns: list
    rows: list


@dataclass
class RunReport:
    config: dict
    payload: dict
    tables: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def as_dict(self) -> dict:
        return {"config": self.config, "payload": self.payload,
                "tables": {k: {"columns": t.columns, "rows": len(t.rows)}
                           for k, t in self.tables.items()},
                "versions": self.versions, "wall_time": self.wall_time}


# ---------------------------------------------------------------------------
# experiments

def _identity(cfg: RunConfig, psi):
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for c in range(cfg.identity_configs):
        m = cfg.m_values[c % len(cfg.m_values)]
        spec, z = ident.random_configuration(rng, m)
        pts = ident.sample_points(rng, m, cfg.identity_points)
        res_id, res_f = ident.verify(spec, z, pts)
        scale = max(res_id.scale, res_f.scale, 1.0)
        rows.append([c, m, res_id.value, res_f.value, scale,
                     res_id.residual_ok(1e-9) and res_f.residual_ok(1e-9)])
    tables = {"residuals": Table(["config_id", "m", "identity_residual",
                                  "factorization_residual", "scale", "ok"], rows)}
    payload = {"configs": len(rows), "all_ok": all(r[-1] for r in rows),
               "max_relative": max(max(r[2], r[3]) / r[4] for r in rows)}
    if cfg.pointwise_configs:
        prow = []
        for c in range(cfg.pointwise_configs):
            m = cfg.m_values[c % len(cfg.m_values)]
            for b in cfg.pointwise_b:
                pts = ident.sample_points(rng, m, cfg.pointwise_points)
                spec, z = ident.random_elliptic_configuration(rng, m, b, pts)
                p1 = ident.parabolic_pointwise_check(b, spec, z, pts)
                p2 = ident.modified_pointwise_check(b, spec, z, pts)
                prow.append([c, m, b, p1.value, p1.scale, p2.value, p2.scale,
                             p1.slack_ok(1e-10) and p2.slack_ok(1e-10)])
        tables["pointwise"] = Table(["config_id", "m", "b", "slack_unmodified", "scale_unmodified",
                                     "slack_modified", "scale_modified", "ok"], prow)
        payload["pointwise_ok"] = all(r[-1] for r in prow)
    return payload, tables


def _carleman(cfg: RunConfig, psi):
    grid = cfg.grid()
    q = cfg.potential_field(grid)
    sc = CarlemanSweepConfig(tuple(cfg.mu_list), tuple(cfg.lambda_list), cfg.ensemble_size,
                             cfg.seed, cfg.b, q)
    rows = carleman_sweep(sc, grid, cfg.coeffs(), psi, cfg.scheme())
    vals = [r["C_emp"] for r in rows]
    table = Table(["mu", "lambda", "samples_used", "C_emp"],
                  [[r["mu"], r["lambda"], r["samples_used"], r["C_emp"]] for r in rows])
    payload = {"rows": rows, "max_over_min": max(vals) / min(vals),
               "all_finite": bool(np.all(np.isfinite(vals)))}
    return payload, {"sweep": table}


def _ensemble(cfg: RunConfig, grid):
    if cfg.ensemble == "pure_mode":
        return pure_mode_ensemble(grid, cfg.ensemble_size, cfg.seed, [cfg.y0_mode] * grid.dim)
    return fourier_ensemble(grid, cfg.ensemble_size, cfg.seed)


def _observability(cfg: RunConfig, psi):
    grid = cfg.grid()
    q = cfg.potential_field(grid)
    rep = observability_estimate(cfg.b, q, cfg.ensemble_size, cfg.seed, grid, cfg.coeffs(),
                                 cfg.scheme(), zTs=_ensemble(cfg, grid))
    payload = {"C_obs": rep.C_obs, "r": rep.r, "b": rep.b, "fit": None}
    if cfg.ensemble == "pure_mode" and cfg.coefficients == "identity" and cfg.potential in (
            "zero", "constant"):
        qc = 0.0 if q is None else cfg.potential_sign * cfg.r / grid.domain.measure()
        ref = single_mode_reference(grid, cfg.b, qc, [cfg.y0_mode] * grid.dim)
        payload["oracle_ratio"] = ref["ratio"]
        payload["oracle_relative_gap"] = abs(rep.C_obs - ref["ratio"]) / ref["ratio"]
    table = Table(["sample_id", "r", "ratio"], [[i, rep.r, x] for i, x in enumerate(rep.ratios)])
    return payload, {"ratios": table}


def _constant_vs_potential(cfg: RunConfig, psi):
    grid = cfg.grid()
    prof = "bump" if cfg.potential == "bump" else "constant"
    a = cfg.coeffs()
    res = constant_vs_potential(cfg.b, cfg.r_list, cfg.ensemble_size, cfg.seed, grid, a,
                                cfg.scheme(), profile=prof, zTs=_ensemble(cfg, grid))
    tables = {
        "ratios": Table(["sample_id", "r", "sign", "ratio"],
                        [[x["sample_id"], x["r"], x["sign"], x["ratio"]] for x in res["rows"]]),
        "constants": Table(["r", "C_obs", "ln_C_obs"],
                           [[p["r"], p["C_obs"], p["ln_C_obs"]] for p in res["per_r"]]),
    }
    payload = {"per_r": res["per_r"], "fit": res["fit"], "monotone": res["monotone"]}
    if cfg.b_list:
        sweep = observability_b_sweep(cfg.b_list, cfg.r, cfg.ensemble_size, cfg.seed, grid, a,
                                      cfg.scheme())
        tables["b_sweep"] = Table(["b", "r", "C_obs"], [[s["b"], s["r"], s["C_obs"]] for s in sweep])
        payload["b_sweep"] = sweep
    return payload, tables


def _report_row(b, eps, rep):
    return [b, eps, rep.terminal_norm, rep.relative_terminal, rep.control_cost, rep.cg_iters,
            rep.functional_value, rep.duality_bound, rep.duality_ok]


REPORT_COLUMNS = ["b", "epsilon", "terminal_norm", "relative_terminal", "control_cost",
                  "cg_iters", "functional_value", "duality_bound", "duality_ok"]


def _null_control(cfg: RunConfig, psi, out_prefix: str):
    grid = cfg.grid()
    a = cfg.coeffs()
    q = cfg.potential_field(grid)
    y0 = cfg.initial_state(grid)
    mis = adjoint_check(cfg.b, a, q, grid, cfg.scheme())
    if mis["max"] > 1e-11:
        raise ControlError(f"discrete adjoint mismatch {mis['max']:.3e}")
    eps_list = cfg.epsilon_list or [cfg.epsilon]
    rows, reports = [], []
    for eps in eps_list:
        u, rep = hum_null_control(y0, cfg.b, a, q, cfg.hum(eps), grid, cfg.scheme(),
                                  check_adjoint=False)
        rows.append(_report_row(cfg.b, eps, rep))
        reports.append({"epsilon": eps, **rep.as_dict()})
        if cfg.save_fields:
            Path(f"{out_prefix}.control_eps{eps:g}.bin").write_bytes(to_binary(u))
    terms = [r["terminal_norm"] for r in reports]
    payload = {"adjoint_mismatch": mis, "runs": reports,
               "monotone_in_epsilon": bool(all(b <= a + 1e-10 for a, b in zip(terms, terms[1:]))),
               "duality_ok": all(r["duality_ok"] for r in reports)}
    return payload, {"report": Table(REPORT_COLUMNS, rows)}


def _semilinear(cfg: RunConfig, psi, out_prefix: str):
    grid = cfg.grid()
    a = cfg.coeffs()
    y0 = cfg.initial_state(grid)
    f = cfg.nonlinear()
    res = semilinear_null_control(y0, cfg.b, a, f, cfg.hum(), grid, cfg.scheme(),
                                  max_iters=cfg.fp_max_iters, tol=cfg.fp_tol)
    cols = ["iteration", "update", "state_norm", "r", "cg_iters", "terminal_linear", "damping"]
    it = Table(cols, [[row[c] for c in cols] for row in res.iterations])
    payload = {"converged": res.converged, "iterations": len(res.iterations),
               "growth_ok": f.growth_ok, "report": res.report.as_dict()}
    if cfg.save_fields:
        Path(f"{out_prefix}.control.bin").write_bytes(to_binary(res.control))
    return payload, {"iterations": it,
                     "report": Table(REPORT_COLUMNS, [_report_row(cfg.b, cfg.epsilon, res.report)])}


def _mms(cfg: RunConfig, psi):
    case = sine_mode_case(cfg.domain(), b=cfg.mms_b)
    res = mms_order(case, nx=cfg.mms_nx, nt=cfg.mms_nt, fine_nx=cfg.mms_fine_nx,
                    fine_nt=cfg.mms_fine_nt, cfg=cfg.scheme())
    d = res.details
    table = Table(["quantity", "order", "diff_coarse", "diff_fine"],
                  [["space", res.order_space, *d["space_diffs"]],
                   ["time", res.order_time, *d["time_diffs"]]])
    return ({"order_space": res.order_space, "order_time": res.order_time,
             "monotone": d["monotone"]}, {"orders": table})


def execute(cfg: RunConfig, out_prefix: str) -> RunReport:
    psi = build_psi(cfg.domain())
    start = time.perf_counter()
    exp = cfg.experiment
    if exp == "verify-identity":
        payload, tables = _identity(cfg, psi)
    elif exp == "carleman-sweep":
        payload, tables = _carleman(cfg, psi)
    elif exp == "observability":
        payload, tables = _observability(cfg, psi)
    elif exp == "constant-vs-potential":
        payload, tables = _constant_vs_potential(cfg, psi)
    elif exp == "null-control":
        payload, tables = _null_control(cfg, psi, out_prefix)
    elif exp == "semilinear-control":
        payload, tables = _semilinear(cfg, psi, out_prefix)
    else:
        payload, tables = _mms(cfg, psi)
    versions = {"glc": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                "pydantic": pydantic.VERSION}
    return RunReport(cfg.echo(), payload, tables, versions, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# output

def format_cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if np.isfinite(f) else str(f)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def emit_report(report: RunReport, prefix: str) -> list[Path]:
    """Write ``<prefix>.json`` and one ``<prefix>.<table>.csv`` per table."""
    paths = []
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    for name, table in report.tables.items():
        p = Path(f"{prefix}.{name}.csv")
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(table.columns)
            for row in table.rows:
                w.writerow([format_cell(v) for v in row])
        paths.append(p)
    p = Path(f"{prefix}.json")
    p.write_text(json.dumps(_jsonable(report.as_dict()), indent=2, sort_keys=True) + "\n",
                 encoding="utf-8")
    paths.append(p)
    return paths


def run(config_path, overrides=(), experiment: str | None = None,
        output: str | None = None) -> int:
    try:
        cfg = load_config(config_path, overrides, experiment)
        prefix = output or cfg.output
        Path(prefix).parent.mkdir(parents=True, exist_ok=True)
        report = execute(cfg, prefix)
        emit_report(report, prefix)
    except pydantic.ValidationError as exc:
        print(f"glc: invalid configuration:\n{exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, WeightError, DiscretizationError, ident.IdentityError) as exc:
        print(f"glc: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ControlError, SolverError, ExperimentError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"glc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"glc: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(f"glc: {cfg.experiment} done, wrote {prefix}.*")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="glc", description=__doc__.splitlines()[0])
    parser.add_argument("subcommand", choices=EXPERIMENTS)
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key (repeatable)")
    parser.add_argument("--output", default=None, help="output path prefix")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(args.config, args.overrides, args.subcommand, args.output)


if __name__ == "__main__":
    sys.exit(main())
