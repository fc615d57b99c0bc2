"""Run configuration: a flat JSON schema and the preset catalog it refers to."""

from __future__ import annotations

import json
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .discretization import Coefficients, Grid, PotentialField
from .experiments import scaled_potential, sine_mode
from .solver import (Nonlinearity, SchemeConfig, linear_nonlinearity, log_power_nonlinearity,
                     zero_nonlinearity)
from .control import HUMConfig
from .weights import DomainSpec

EXPERIMENTS = ("verify-identity", "carleman-sweep", "observability", "constant-vs-potential",
               "null-control", "semilinear-control", "mms")

Experiment = Literal["verify-identity", "carleman-sweep", "observability",
                     "constant-vs-potential", "null-control", "semilinear-control", "mms"]


class ConfigError(ValueError):
    pass


class RunConfig(BaseModel):
    """All keys are top-level.  Unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True, frozen=True)

    experiment: Experiment
    seed: int
    output: str = "glc_run"

    # domain and grid
    dimension: Literal[1, 2] = 1
    bounds: list[list[float]] = Field(default_factory=lambda: [[0.0, 1.0]])
    T: float = 0.5
    omega: list[list[float]] = Field(default_factory=lambda: [[0.3, 0.7]])
    omega0: list[list[float]] = Field(default_factory=lambda: [[0.4, 0.6]])
    nx: int = 199
    ny: Optional[int] = None
    nt: int = 400

    # operator
    b: float = 0.0
    coefficients: Literal["identity", "constant", "variable"] = "identity"
    coefficient_params: list[float] = Field(default_factory=list)
    potential: Literal["zero", "constant", "bump"] = "zero"
    r: float = 0.0
    potential_sign: float = 1.0

    # weights
    lam: float = Field(40.0, alias="lambda")
    mu: float = 3.0
    lambda_list: list[float] = Field(default_factory=lambda: [20.0, 40.0, 80.0])
    mu_list: list[float] = Field(default_factory=lambda: [3.0])

    # scheme
    theta_scheme: float = 0.5
    linear_tol: float = 1e-10
    max_linear_iters: int = 1000

    # control
    epsilon: float = 1e-8
    epsilon_list: list[float] = Field(default_factory=list)
    cg_tol: float = 1e-10
    cg_max_iters: int = 500
    y0: Literal["sine", "bump"] = "sine"
    y0_mode: int = 1
    y0_amplitude: float = 1.0
    nonlinearity: Literal["zero", "linear", "log_power"] = "log_power"
    nonlinearity_param: float = 0.25
    fp_max_iters: int = 30
    fp_tol: float = 1e-6
    save_fields: bool = False

    # ensembles
    ensemble_size: int = 16
    ensemble: Literal["fourier", "pure_mode"] = "fourier"
    r_list: list[float] = Field(default_factory=lambda: [0.0, 2.0, 4.0, 8.0])
    b_list: list[float] = Field(default_factory=list)

    # identity
    identity_configs: int = 200
    identity_points: int = 20
    m_values: list[int] = Field(default_factory=lambda: [1, 2, 3])
    pointwise_configs: int = 0
    pointwise_points: int = 100
    pointwise_b: list[float] = Field(default_factory=lambda: [0.0, 0.5, 2.0])

    # mms
    mms_nx: int = 20
    mms_nt: int = 20
    mms_fine_nx: int = 255
    mms_fine_nt: int = 2000
    mms_b: float = 0.7

    @field_validator("nx", "nt", "ensemble_size", "identity_configs", "identity_points",
                     "cg_max_iters", "fp_max_iters", "mms_nx", "mms_nt")
    @classmethod
    def _positive(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("m_values")
    @classmethod
    def _dims(cls, v):
        if not v or any(m not in (1, 2, 3) for m in v):
            raise ValueError("m_values must be a non-empty subset of {1, 2, 3}")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        d = self.dimension
        for name in ("bounds", "omega", "omega0"):
            box = getattr(self, name)
            if len(box) != d or any(len(iv) != 2 for iv in box):
                raise ValueError(f"{name} must list {d} intervals [lo, hi]")
        if d == 1 and self.ny is not None:
            raise ValueError("ny is only valid for dimension 2")
        if not (0.5 <= self.theta_scheme <= 1.0):
            raise ValueError("theta_scheme must lie in [0.5, 1]")
        if self.epsilon <= 0 or any(e <= 0 for e in self.epsilon_list):
            raise ValueError("epsilon must be positive")
        if self.lam <= 1 or self.mu <= 1 or min(self.lambda_list + self.mu_list, default=2) <= 1:
            raise ValueError("lambda and mu must be > 1")
        if self.experiment == "constant-vs-potential" and len(set(self.r_list)) < 3:
            raise ValueError("r_list needs at least 3 distinct values for the fit")
        return self

    # -- construction of runtime objects --------------------------------
    def domain(self) -> DomainSpec:
        return DomainSpec(self.dimension, tuple(map(tuple, self.bounds)), self.T,
                          tuple(map(tuple, self.omega)), tuple(map(tuple, self.omega0)))

    def grid(self) -> Grid:
        return Grid(self.domain(), self.nx, self.nt, self.ny)

    def scheme(self) -> SchemeConfig:
        return SchemeConfig(self.theta_scheme, self.linear_tol, self.max_linear_iters)

    def hum(self, epsilon: float | None = None) -> HUMConfig:
        return HUMConfig(self.epsilon if epsilon is None else epsilon, self.cg_tol,
                         self.cg_max_iters)

    def coeffs(self) -> Coefficients:
        return build_coefficients(self.coefficients, self.coefficient_params, self.dimension)

    def potential_field(self, grid: Grid) -> PotentialField | None:
        if self.potential == "zero" or self.r == 0:
            return None
        return scaled_potential(grid, self.r, self.potential, self.potential_sign)

    def initial_state(self, grid: Grid) -> np.ndarray:
        if self.y0 == "sine":
            return self.y0_amplitude * sine_mode(grid, [self.y0_mode] * grid.dim)
        pts = grid.interior_points()
        out = np.ones(len(pts))
        for j, (lo, hi) in enumerate(grid.domain.bounds):
            s = (pts[:, j] - lo) / (hi - lo)
            out = out * 16 * s * s * (1 - s) * (1 - s)
        return (self.y0_amplitude * out).astype(complex)

    def nonlinear(self) -> Nonlinearity:
        if self.nonlinearity == "zero":
            return zero_nonlinearity()
        if self.nonlinearity == "linear":
            return linear_nonlinearity(self.nonlinearity_param)
        return log_power_nonlinearity(self.nonlinearity_param)

    def echo(self) -> dict:
        return self.model_dump(by_alias=True, mode="json")


def build_coefficients(name: str, params, dim: int) -> Coefficients:
    """Coefficient catalog.

    ``identity``: ``a = I``.  ``constant``: 1D ``[a]``, 2D ``[a11, a12, a22]``.
    ``variable``: ``a = (c0 + c1 x_1 (1 - x_1)) I`` from ``[c0, c1]``.
    """
    params = list(params)
    if name == "identity":
        if params:
            raise ConfigError("identity coefficients take no parameters")
        return Coefficients.identity(dim)
    if name == "constant":
        if dim == 1 and len(params) == 1:
            mat = [[params[0]]]
        elif dim == 2 and len(params) == 3:
            mat = [[params[0], params[1]], [params[1], params[2]]]
        else:
            raise ConfigError("constant coefficients need [a] in 1D or [a11, a12, a22] in 2D")
        if np.min(np.linalg.eigvalsh(np.array(mat))) <= 0:
            raise ConfigError("constant coefficient matrix must be positive definite")
        return Coefficients.constant(mat)
    if name == "variable":
        if len(params) != 2:
            raise ConfigError("variable coefficients need [c0, c1]")
        c0, c1 = params
        if c0 <= 0 or c0 + min(c1, 0) / 4 <= 0:
            raise ConfigError("variable coefficients must stay positive")

        def func(t, x):
            x = np.asarray(x)
            s = c0 + c1 * x[..., 0] * (1 - x[..., 0])
            return s[..., None, None] * np.eye(dim)
        return Coefficients(func, dim, False, "variable")
    raise ConfigError(f"unknown coefficient preset {name!r}")


def parse_value(text: str):
    """``--set`` values: JSON when it parses, otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path, overrides=(), experiment: str | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        data[key.strip()] = parse_value(val)
    if experiment is not None:
        if "experiment" in data and data["experiment"] != experiment:
            raise ConfigError(f"config experiment {data['experiment']!r} does not match "
                              f"subcommand {experiment!r}")
        data["experiment"] = experiment
    return RunConfig.model_validate(data)
