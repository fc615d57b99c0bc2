"""Weight-base function and Carleman weights on boxes in one or two dimensions.

With ``psi`` vanishing on the boundary and ``|psi|_C`` its sup norm,

    phi = e^{mu psi} / (t (T - t)),
    rho = (e^{mu psi} - e^{2 mu |psi|_C}) / (t (T - t)),
    ell = lam rho,   theta = e^ell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .symalg import MultiPoly

UNDERFLOW = -700.0


class WeightError(ValueError):
    pass


def _box(b) -> tuple[tuple[float, float], ...]:
    return tuple((float(lo), float(hi)) for lo, hi in b)


def _inside_open(box, x) -> bool:
    return all(lo < xi < hi for (lo, hi), xi in zip(box, x))


@dataclass(frozen=True)
class DomainSpec:
    """Box ``Omega``, horizon ``T``, control box ``omega`` and inner box ``omega0``."""

    dimension: int
    bounds: tuple
    horizon: float
    omega: tuple
    omega0: tuple

    def __post_init__(self):
        for name in ("bounds", "omega", "omega0"):
            object.__setattr__(self, name, _box(getattr(self, name)))
        d = self.dimension
        if d not in (1, 2):
            raise WeightError("dimension must be 1 or 2")
        for name in ("bounds", "omega", "omega0"):
            box = getattr(self, name)
            if len(box) != d:
                raise WeightError(f"{name} must have {d} intervals")
            if any(not lo < hi for lo, hi in box):
                raise WeightError(f"{name} has an empty interval")
        if not self.horizon > 0:
            raise WeightError("horizon T must be positive")
        for (a, b), (c, e) in zip(self.bounds, self.omega):
            if c < a or e > b:
                raise WeightError("omega must lie inside the domain")
        for (a, b), (c, e) in zip(self.omega, self.omega0):
            if not (a < c and e < b):
                raise WeightError("closure of omega0 must lie inside omega")

    @classmethod
    def interval(cls, a=0.0, b=1.0, T=1.0, omega=(0.3, 0.7), omega0=(0.4, 0.6)):
        return cls(1, (tuple((a, b)),), T, (tuple(omega),), (tuple(omega0),))

    def in_omega(self, x) -> bool:
        return _inside_open(self.omega, np.atleast_1d(x))

    def measure(self) -> float:
        return float(np.prod([hi - lo for lo, hi in self.bounds]))


@dataclass(frozen=True)
class PsiField:
    """Product of per-axis parabolas ``(x - a)(b - x) / normalizer``."""

    bounds: tuple
    normalizer: float = 1.0
    sup_norm: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "bounds", _box(self.bounds))
        peak = np.prod([(hi - lo) ** 2 / 4 for lo, hi in self.bounds]) / self.normalizer
        object.__setattr__(self, "sup_norm", float(peak))

    @property
    def dimension(self) -> int:
        return len(self.bounds)

    def _factors(self, x):
        x = np.asarray(x, dtype=float)
        f, df = [], []
        for j, (lo, hi) in enumerate(self.bounds):
            xj = x[..., j]
            f.append((xj - lo) * (hi - xj))
            df.append(lo + hi - 2 * xj)
        return f, df

    def value(self, x):
        """``psi`` at points ``x`` of shape (..., d)."""
        f, _ = self._factors(x)
        return np.prod(f, axis=0) / self.normalizer

    def grad(self, x):
        f, df = self._factors(x)
        d = self.dimension
        out = []
        for j in range(d):
            g = df[j]
            for k in range(d):
                if k != j:
                    g = g * f[k]
            out.append(g / self.normalizer)
        return np.stack(out, axis=-1)

    def hess(self, x):
        f, df = self._factors(x)
        d = self.dimension
        rows = []
        for j in range(d):
            row = []
            for k in range(d):
                if j == k:
                    h = -2.0 * np.ones_like(f[j])
                    for i in range(d):
                        if i != j:
                            h = h * f[i]
                else:
                    h = df[j] * df[k]
                    for i in range(d):
                        if i not in (j, k):
                            h = h * f[i]
                row.append(h / self.normalizer)
            rows.append(np.stack(row, axis=-1))
        return np.stack(rows, axis=-2)

    def critical_point(self) -> np.ndarray:
        """The unique interior zero of the gradient (the box center)."""
        return np.array([(lo + hi) / 2 for lo, hi in self.bounds])


def _axis_nodes(lo, hi, n):
    return np.linspace(lo, hi, n)


def build_psi(domain: DomainSpec, nodes: int = 101, normalizer: float = 1.0) -> PsiField:
    """Construct ``psi`` for ``domain`` and check its three properties on a grid.

    The gradient condition is checked on every node outside ``omega0`` except
    the box corners, where the product form has a vanishing gradient.
    """
    psi = PsiField(domain.bounds, normalizer)
    if not _inside_open(domain.omega0, psi.critical_point()):
        raise WeightError("critical point outside ω₀")
    axes = [_axis_nodes(lo, hi, nodes) for lo, hi in domain.bounds]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, domain.dimension)
    on_edge = np.zeros(len(X), dtype=bool)
    corner_count = np.zeros(len(X), dtype=int)
    for j, (lo, hi) in enumerate(domain.bounds):
        e = (X[:, j] == lo) | (X[:, j] == hi)
        on_edge |= e
        corner_count += e
    vals = psi.value(X)
    if np.any(vals[~on_edge] <= 0):
        raise WeightError("psi is not positive in the interior")
    if np.any(vals[on_edge] != 0):
        raise WeightError("psi does not vanish on the boundary")
    in0 = np.array([_inside_open(domain.omega0, x) for x in X])
    corner = corner_count == domain.dimension if domain.dimension > 1 else np.zeros(len(X), bool)
    check = ~in0 & ~corner
    gnorm = np.linalg.norm(psi.grad(X), axis=-1)
    if np.any(gnorm[check] <= 0):
        raise WeightError("critical point outside ω₀")
    return psi


@dataclass(frozen=True)
class WeightSpec:
    lam: float
    mu: float
    psi: PsiField
    horizon: float
    validate: bool = True

    def __post_init__(self):
        if not self.horizon > 0:
            raise WeightError("horizon must be positive")
        if not self.validate:
            return
        if not self.lam > 1:
            raise WeightError("lambda must be > 1")
        if not self.mu > 1:
            raise WeightError("mu must be > 1")

    @property
    def peak(self) -> float:
        """``e^{2 mu |psi|_C}``."""
        return math.exp(2 * self.mu * self.psi.sup_norm)


@dataclass(frozen=True)
class WeightEval:
    phi: np.ndarray
    rho: np.ndarray
    ell: np.ndarray
    theta: np.ndarray
    ell_t: np.ndarray
    ell_j: np.ndarray
    ell_jk: np.ndarray
    phi_t: np.ndarray
    rho_t: np.ndarray
    psi: np.ndarray


def safe_exp(ell):
    """``e^ell`` with exact zero below the underflow threshold."""
    ell = np.asarray(ell, dtype=float)
    out = np.zeros_like(ell)
    ok = ell >= UNDERFLOW
    out[ok] = np.exp(ell[ok])
    return out


def eval_weights(spec: WeightSpec, t, x) -> WeightEval:
    """Weights and derivatives at times ``t`` and points ``x`` (broadcast, shape (..., d))."""
    t = np.asarray(t, dtype=float)
    T = spec.horizon
    if np.any(t <= 0) or np.any(t >= T):
        raise WeightError("t must lie in (0, T)")
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != spec.psi.dimension:
        x = x[..., None]
    lam, mu = spec.lam, spec.mu
    psi = spec.psi.value(x)
    gpsi = spec.psi.grad(x)
    hpsi = spec.psi.hess(x)
    t, psi = np.broadcast_arrays(t, psi)
    den = t * (T - t)
    den_t = T - 2 * t
    e = np.exp(mu * psi)
    phi = e / den
    rho = (e - spec.peak) / den
    inv_t = -den_t / den**2
    phi_t = e * inv_t
    rho_t = (e - spec.peak) * inv_t
    ell = lam * rho
    ell_j = lam * mu * phi[..., None] * gpsi
    ell_jk = (lam * mu**2 * phi[..., None, None] * gpsi[..., :, None] * gpsi[..., None, :]
              + lam * mu * phi[..., None, None] * hpsi)
    return WeightEval(phi=phi, rho=rho, ell=ell, theta=safe_exp(ell), ell_t=lam * rho_t,
                      ell_j=ell_j, ell_jk=ell_jk, phi_t=phi_t, rho_t=rho_t, psi=psi)


def rho_t_constant(spec: WeightSpec, t, x) -> float:
    """Smallest ``C`` with ``|rho_t| <= C e^{2 mu |psi|_C} phi^2`` on the samples."""
    w = eval_weights(spec, t, x)
    return float(np.max(np.abs(w.rho_t) / (spec.peak * w.phi**2)))


def phi_t_constant(spec: WeightSpec, t, x) -> float:
    """Smallest ``C`` with ``|phi_t| <= C phi^2`` on the samples."""
    w = eval_weights(spec, t, x)
    return float(np.max(np.abs(w.phi_t) / w.phi**2))


def log_weighted(log_weight, term):
    """``exp(log_weight + log(term))`` with zero where ``term == 0``."""
    term = np.asarray(term, dtype=float)
    out = np.zeros(np.broadcast(log_weight, term).shape)
    lw = np.broadcast_to(log_weight, out.shape)
    tb = np.broadcast_to(term, out.shape)
    pos = tb > 0
    out[pos] = np.exp(lw[pos] + np.log(tb[pos]))
    return out


# ---------------------------------------------------------------------------
# Schrodinger-type weight

@dataclass(frozen=True)
class SchrodingerWeight:
    """``ell = s exp(gamma (|x - x0|^2 - c (t - t0)^2))``."""

    gamma: float
    c: float
    x0: tuple
    t0: float
    s: float

    def _g(self, t, x):
        x = np.asarray(x, dtype=float)
        dx = x - np.asarray(self.x0)
        return np.sum(dx * dx, axis=-1) - self.c * (np.asarray(t) - self.t0) ** 2

    def ell(self, t, x):
        return self.s * np.exp(self.gamma * self._g(t, x))

    def ell_t(self, t, x):
        return self.ell(t, x) * self.gamma * (-2 * self.c * (np.asarray(t) - self.t0))

    def ell_x(self, t, x):
        dx = np.asarray(x, dtype=float) - np.asarray(self.x0)
        return self.ell(t, x)[..., None] * self.gamma * 2 * dx

    def ell_xx(self, t, x):
        dx = np.asarray(x, dtype=float) - np.asarray(self.x0)
        m = dx.shape[-1]
        g = self.gamma
        return self.ell(t, x)[..., None, None] * (4 * g * g * dx[..., :, None] * dx[..., None, :]
                                                  + 2 * g * np.eye(m))

    def taylor_poly(self, point: Sequence[float], order: int = 4) -> MultiPoly:
        """Polynomial in ``(t, x)`` whose derivatives up to ``order`` at ``point``
        coincide with those of ``ell``.

        ``g`` is quadratic, so ``s e^{gamma g(P)} sum_n (gamma (g - g(P)))^n / n!``
        agrees with ``ell`` to order ``order`` at ``P``.
        """
        point = np.asarray(point, dtype=float)
        m = len(self.x0)
        nv = m + 1
        v = MultiPoly.variables(nv)
        g = -self.c * (v[0] - self.t0) * (v[0] - self.t0)
        for j in range(m):
            g = g + (v[j + 1] - self.x0[j]) * (v[j + 1] - self.x0[j])
        gp = float(self._g(point[0], point[1:]))
        h = self.gamma * (g - gp)
        total = MultiPoly.const(nv, 1.0)
        term = MultiPoly.const(nv, 1.0)
        for n in range(1, order + 1):
            term = term * h * (1.0 / n)
            total = total + term
        return total * (self.s * math.exp(self.gamma * gp))


def schrodinger_weight(gamma: float, c: float, x0, t0: float, s: float,
                       bounds) -> SchrodingerWeight:
    if not (gamma > 0 and c > 0 and s > 0):
        raise WeightError("gamma, c and s must be positive")
    x0 = tuple(float(v) for v in np.atleast_1d(x0))
    box = _box(bounds)
    if len(box) != len(x0):
        raise WeightError("x0 dimension mismatch")
    if all(lo <= xi <= hi for (lo, hi), xi in zip(box, x0)):
        raise WeightError("x0 must lie outside the closed domain")
    return SchrodingerWeight(float(gamma), float(c), x0, float(t0), float(s))
