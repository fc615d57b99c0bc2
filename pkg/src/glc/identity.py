"""Pointwise weighted identity for ``(alpha + i beta) d_t + sum_jk d_k(a^{jk} d_j)``.

Everything is assembled in terms of ``v = theta z`` (``theta = e^ell``) so that
with polynomial data every part is itself a polynomial and the identity can be
checked with zero discretization error.  The assembly functions only use
``+ - *``, ``conj`` and ``d(var)`` on their inputs, so the same code also runs on
:class:`GridField` samples with central differences (the finite-difference
cross-check).

Variable 0 is time; spatial direction ``j`` (0-based) is variable ``j + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from .symalg import MultiPoly, random_poly


class IdentityError(ValueError):
    pass


# ---------------------------------------------------------------------------
# grid samples with central differences

class GridField:
    """Samples of a function on a uniform local space-time grid.

    ``d(axis)`` is the second-order central difference; the outermost layer
    along that axis becomes NaN, so after ``k`` nested derivatives the central
    node stays valid as long as the grid has ``k`` layers on each side.
    """

    __slots__ = ("data", "h")

    def __init__(self, data, h: float):
        self.data = np.asarray(data, dtype=complex)
        self.h = float(h)

    def const_like(self, c):
        return GridField(np.full(self.data.shape, complex(c)), self.h)

    def _val(self, other):
        return other.data if isinstance(other, GridField) else other

    def __add__(self, other):
        return GridField(self.data + self._val(other), self.h)

    __radd__ = __add__

    def __sub__(self, other):
        return GridField(self.data - self._val(other), self.h)

    def __rsub__(self, other):
        return GridField(self._val(other) - self.data, self.h)

    def __neg__(self):
        return GridField(-self.data, self.h)

    def __mul__(self, other):
        return GridField(self.data * self._val(other), self.h)

    __rmul__ = __mul__

    def conj(self):
        return GridField(np.conj(self.data), self.h)

    def real(self):
        return GridField(self.data.real.astype(complex), self.h)

    def d(self, axis: int):
        out = np.full(self.data.shape, np.nan + 0j)
        n = self.data.shape[axis]
        hi = [slice(None)] * self.data.ndim
        lo = [slice(None)] * self.data.ndim
        mid = [slice(None)] * self.data.ndim
        hi[axis] = slice(2, n)
        lo[axis] = slice(0, n - 2)
        mid[axis] = slice(1, n - 1)
        out[tuple(mid)] = (self.data[tuple(hi)] - self.data[tuple(lo)]) / (2.0 * self.h)
        return GridField(out, self.h)

    def center(self) -> complex:
        idx = tuple(s // 2 for s in self.data.shape)
        return complex(self.data[idx])

    @classmethod
    def sample(cls, func: Callable, point: Sequence[float], h: float, layers: int):
        """Sample ``func(*coords)`` (vectorized) around ``point``."""
        offs = np.arange(-layers, layers + 1) * h
        axes = [p + offs for p in point]
        mesh = np.meshgrid(*axes, indexing="ij")
        vals = func(*mesh)
        return cls(np.broadcast_to(np.asarray(vals, dtype=complex), mesh[0].shape).copy(), h)


def _value(f, point):
    if isinstance(f, GridField):
        return f.center()
    return f.eval_many(point)


# ---------------------------------------------------------------------------
# operator data

@dataclass(frozen=True)
class OperatorSpec:
    """Coefficients of the operator and the multiplier data ``Psi``, ``ell``."""

    m: int
    alpha: Any
    beta: Any
    a: tuple
    psi_gauge: Any
    ell: Any
    s0: float = 0.0
    family: str = "general"

    def __post_init__(self):
        a = tuple(tuple(row) for row in self.a)
        object.__setattr__(self, "a", a)
        if len(a) != self.m or any(len(row) != self.m for row in a):
            raise IdentityError(f"coefficient matrix must be {self.m}x{self.m}")
        if self.s0 < 0:
            raise IdentityError("ellipticity constant must be >= 0")
        polys = [self.alpha, self.beta, self.psi_gauge, self.ell] + [c for row in a for c in row]
        if all(isinstance(p, MultiPoly) for p in polys):
            nv = self.m + 1
            for p in polys:
                if p.num_vars != nv:
                    raise IdentityError(f"dimension mismatch: expected {nv} variables, got {p.num_vars}")
                if not p.is_real():
                    raise IdentityError("alpha, beta, a, Psi and ell must have real coefficients")
            for j in range(self.m):
                for k in range(j + 1, self.m):
                    if a[j][k] != a[k][j]:
                        raise IdentityError(f"a^{{{j + 1}{k + 1}}} != a^{{{k + 1}{j + 1}}}")

    @property
    def num_vars(self) -> int:
        return self.m + 1

    def b_constant(self) -> float:
        """The constant value of ``beta`` for the parabolic family (``alpha = 1``)."""
        if not (isinstance(self.alpha, MultiPoly) and isinstance(self.beta, MultiPoly)):
            raise IdentityError("parabolic checks need polynomial alpha and beta")
        if not (self.alpha.is_constant() and self.alpha.constant_value() == 1):
            raise IdentityError("parabolic checks need alpha == 1")
        if not self.beta.is_constant():
            raise IdentityError("parabolic checks need a constant beta")
        return self.beta.constant_value().real

    def min_ellipticity(self, points) -> float:
        """Smallest eigenvalue of ``(a^{jk})`` over ``points``."""
        pts = np.atleast_2d(points)
        vals = np.empty((pts.shape[0], self.m, self.m))
        for j in range(self.m):
            for k in range(self.m):
                vals[:, j, k] = self.a[j][k].eval_many(pts).real
        return float(np.linalg.eigvalsh(vals).min())


def divergence_term(m, a, ell):
    """``sum_jk (a^{jk} ell_j)_k``."""
    lj = [ell.d(j + 1) for j in range(m)]
    total = None
    for k in range(m):
        al = _sum(a[j][k] * lj[j] for j in range(m))
        term = al.d(k + 1)
        total = term if total is None else total + term
    return total


def laplacian(m, f):
    return _sum(f.d(j + 1).d(j + 1) for j in range(m))


def _sum(items):
    items = iter(items)
    total = next(items)
    for it in items:
        total = total + it
    return total


# ---------------------------------------------------------------------------
# presets

FAMILIES = ("general", "parabolic", "ginzburg_landau", "hyperbolic", "schrodinger",
            "schrodinger_p", "plate")


def _is_identity_matrix(a) -> bool:
    m = len(a)
    for j in range(m):
        for k in range(m):
            c = a[j][k]
            if not isinstance(c, MultiPoly) or not c.is_constant():
                return False
            if c.constant_value() != (1.0 if j == k else 0.0):
                return False
    return True


def preset(family: str, m: int, a, ell, *, b: float = 0.0, p=None, psi_gauge=None,
           s0: float = 0.0) -> OperatorSpec:
    """Fill ``alpha``, ``beta`` and ``Psi`` for one of the standard operator families."""
    nv = m + 1
    one = MultiPoly.const(nv, 1.0)
    zero = MultiPoly.zero(nv)
    base_psi = psi_gauge if psi_gauge is not None else zero
    if family == "parabolic":
        alpha, beta = one, zero
        psi = -2.0 * divergence_term(m, a, ell)
    elif family == "ginzburg_landau":
        alpha, beta = one, MultiPoly.const(nv, b)
        psi = -2.0 * divergence_term(m, a, ell)
    elif family == "hyperbolic":
        for row in a:
            for c in row:
                if isinstance(c, MultiPoly) and not c.d(0).is_zero():
                    raise IdentityError("hyperbolic family needs time-independent a^{jk}")
        alpha, beta, psi = zero, zero, base_psi
    elif family in ("schrodinger", "plate", "schrodinger_p"):
        if not _is_identity_matrix(a):
            raise IdentityError(f"{family} family requires a = identity matrix")
        alpha = zero
        if family == "schrodinger_p":
            if p is None:
                raise IdentityError("schrodinger_p needs p(x)")
            if not p.d(0).is_zero():
                raise IdentityError("p must not depend on t")
            beta = p
        else:
            beta = one
        psi = -1.0 * laplacian(m, ell)
    elif family == "general":
        raise IdentityError("general family has no preset; build OperatorSpec directly")
    else:
        raise IdentityError(f"unknown family {family!r}")
    return OperatorSpec(m=m, alpha=alpha, beta=beta, a=a, psi_gauge=psi, ell=ell, s0=s0,
                        family=family)


# ---------------------------------------------------------------------------
# assembly

@dataclass
class IdentityParts:
    A: Any
    I1: Any
    I2: Any
    M: Any
    V: list
    B: Any
    theta_Pz: Any
    rhs_terms: dict = field(default_factory=dict)
    c_jk: list | None = None
    B_tilde: Any = None
    V_tilde: list | None = None
    extras: dict = field(default_factory=dict)


def _assemble(m, alpha, beta, a, Psi, ell, v, *, theta=None, z=None, modified_b=None):
    I = 1j
    D = lambda f, j: f.d(j + 1)  # noqa: E731
    Dt = lambda f: f.d(0)  # noqa: E731
    J = range(m)

    lt = Dt(ell)
    lj = [D(ell, j) for j in J]
    al = [_sum(a[j][k] * lj[j] for j in J) for k in J]          # sum_j a^{jk} l_j
    S = _sum(D(al[k], k) for k in J)                             # sum_jk (a^{jk} l_j)_k
    A = _sum(al[k] * lj[k] for k in J) - S - Psi

    vb = v.conj()
    vt = Dt(v)
    vbt = vt.conj()
    vj = [D(v, j) for j in J]
    vbj = [w.conj() for w in vj]
    av = [_sum(a[j][k] * vj[j] for j in J) for k in J]           # sum_j a^{jk} v_j
    avb = [w.conj() for w in av]
    Lv = _sum(D(av[k], k) for k in J)
    vv = (v * vb).real()

    I1 = I * beta * vt - alpha * lt * v + Lv + A * v
    al_vj = _sum(al[k] * vj[k] for k in J)                       # sum_jk a^{jk} l_j v_k
    I2 = alpha * vt - I * beta * lt * v - 2.0 * al_vj + Psi * v

    # theta * P z by the chain rule, z = v / theta
    w = [vj[j] - lj[j] * v for j in J]
    aw = [_sum(a[j][k] * w[j] for j in J) for k in J]
    theta_Pz = (alpha + I * beta) * (vt - lt * v) + _sum(D(aw[k], k) - lj[k] * aw[k] for k in J)

    X = [vbj[k] * v - vj[k] * vb for k in J]                     # conj(v_k) v - v_k conj(v)
    E = _sum(av[k] * vbj[k] for k in J).real()                   # sum_jk a^{jk} v_j conj(v_k)

    M = ((alpha * alpha + beta * beta) * lt - alpha * A) * vv + alpha * E \
        + I * beta * _sum(al[k] * X[k] for k in J)

    Psi_j = [D(Psi, j) for j in J]
    a_psi = [_sum(a[j][k] * Psi_j[j] for j in J) for k in J]     # sum_j a^{jk} Psi_j
    V = []
    for k in J:
        quad = 2.0 * (av[k] * al_vj.conj() + avb[k] * al_vj) - al[k] * (2.0 * E)
        Vk = (-I * beta * (al[k] * (vbt * v - vb * vt) + lt * (av[k] * vb - avb[k] * v))
              - alpha * (av[k] * vbt + avb[k] * vt)
              - Psi * (av[k] * vb + avb[k] * v)
              + (2.0 * A * al[k] + a_psi[k] - 2.0 * alpha * lt * al[k]) * vv
              + quad)
        V.append(Vk)

    B = (Dt(alpha * alpha * lt) + Dt(beta * beta * lt) - Dt(alpha * A)
         - 2.0 * (_sum(D(alpha * lt * al[k], k) for k in J) + alpha * Psi * lt)
         + _sum(D(a_psi[k], k) for k in J)
         + 2.0 * (_sum(D(al[k] * A, k) for k in J) + A * Psi))

    # right-hand side of the identity, term by term
    Wjk = [[(vj[k] * vbj[j]).real() * 2.0 for k in J] for j in J]   # v_k conj(v_j) + c.c.
    rhs2 = None
    for j in J:
        for k in J:
            C = (2.0 * _sum(D(al[k], kp) * a[j][kp] for kp in J)
                 - _sum(D(a[j][k] * al[kp], kp) for kp in J)
                 + 0.5 * Dt(alpha * a[j][k]) - a[j][k] * Psi)
            term = C * Wjk[j][k]
            rhs2 = term if rhs2 is None else rhs2 + term
    beta_lt_j = [D(beta * lt, j) for j in J]
    rhs3 = I * _sum((Dt(beta * al[k]) + _sum(a[j][k] * beta_lt_j[j] for j in J)) * X[k] for k in J)
    rhs4 = -1.0 * _sum(D(alpha, k) * (av[k] * vbt + avb[k] * vt) for k in J)
    rhs5 = I * (beta * Psi + _sum(D(beta * al[k], k) for k in J)) * (vb * vt - v * vbt)
    rhs6 = B * vv
    rhs_terms = {"2|I1|^2": 2.0 * (I1 * I1.conj()).real(), "grad": rhs2, "mixed_t": rhs3,
                 "alpha_k": rhs4, "time": rhs5, "B|v|^2": rhs6}

    parts = IdentityParts(A=A, I1=I1, I2=I2, M=M, V=V, B=B, theta_Pz=theta_Pz,
                          rhs_terms=rhs_terms)
    parts.extras.update(S=S, vv=vv, Wjk=Wjk, X=X, lt=lt, lj=lj, al=al, vt=vt, vbt=vbt, v=v, vb=vb,
                        vj=vj)

    if theta is not None and z is not None:
        zt = Dt(z)
        zj = [D(z, j) for j in J]
        Lz = _sum(D(_sum(a[j][k] * zj[j] for j in J), k) for k in J)
        parts.extras["theta_Pz_direct"] = theta * ((alpha + I * beta) * zt + Lz)

    if modified_b is not None:
        _assemble_modified(parts, m, a, modified_b, theta=theta, z=z)
    return parts


def _assemble_modified(parts: IdentityParts, m, a, b, *, theta=None, z=None):
    """Parts ``c^{jk}``, ``B~``, ``V~`` of the modified estimate (alpha = 1, beta = b)."""
    I = 1j
    J = range(m)
    D = lambda f, j: f.d(j + 1)  # noqa: E731
    Dt = lambda f: f.d(0)  # noqa: E731
    ex = parts.extras
    S, vv, X, lj, al, v, vb, vj = (ex[k] for k in ("S", "vv", "X", "lj", "al", "v", "vb", "vj"))
    vbj = [w.conj() for w in vj]
    g = 1.0 + b * b
    c2 = b * b / g
    Sj = [D(S, j) for j in J]

    cjk = [[2.0 * _sum(D(al[k], kp) * a[j][kp] for kp in J)
            - _sum(D(a[j][k], kp) * al[kp] for kp in J)
            + 0.5 * Dt(a[j][k]) + (0.5 / g) * a[j][k] * S for k in J] for j in J]

    aLL = _sum(al[k] * lj[k] for k in J)
    a_Sj = [_sum(a[j][k] * Sj[j] for j in J) for k in J]          # sum_j a^{jk} S_j
    Bt = (parts.B - 2.0 * c2 * S * aLL - c2 * S * S
          + c2 * (2.0 * _sum(a_Sj[k] * lj[k] for k in J) + _sum(D(a_Sj[k], k) for k in J)))

    Vt = []
    for k in J:
        corr_v = (I * b / g) * S * _sum(a[j][k] * (vbj[j] * v - vj[j] * vb) for j in J)
        if theta is not None and z is not None:
            # literal z-form of the gradient corrections
            zb = z.conj()
            zj = [D(z, j) for j in J]
            th2S = theta * theta * S
            corr_z = (-c2 * th2S * _sum(a[j][k] * (zj[j].conj() * z + zj[j] * zb) for j in J)
                      + c2 * _sum(D(th2S, j) * a[j][k] for j in J) * (z * zb)
                      - 2.0 * c2 * S * al[k] * vv)
        else:
            # theta eliminated: theta^2 (|z|^2)_j = (|v|^2)_j - 2 l_j |v|^2,
            # (theta^2 S)_j |z|^2 = (2 l_j S + S_j) |v|^2
            corr_z = (-c2 * S * _sum(a[j][k] * (vbj[j] * v + vj[j] * vb) for j in J)
                      + c2 * _sum(a[j][k] * (2.0 * lj[j] * S + Sj[j]) for j in J) * vv)
        Vt.append(parts.V[k] + corr_v + corr_z)

    parts.c_jk = cjk
    parts.B_tilde = Bt
    parts.V_tilde = Vt
    ex["Sj"] = Sj


def _fields(spec: OperatorSpec):
    return spec.m, spec.alpha, spec.beta, spec.a, spec.psi_gauge, spec.ell


def assemble_parts(spec: OperatorSpec, z: MultiPoly, *, modified: bool = False) -> IdentityParts:
    """Assemble all parts with the polynomial ``z`` taken as ``v`` (theta eliminated)."""
    if isinstance(z, MultiPoly) and z.num_vars != spec.num_vars:
        raise IdentityError(f"dimension mismatch: z has {z.num_vars} variables, "
                            f"operator needs {spec.num_vars}")
    b = spec.b_constant() if modified else None
    m, alpha, beta, a, Psi, ell = _fields(spec)
    return _assemble(m, alpha, beta, a, Psi, ell, z, modified_b=b)


# ---------------------------------------------------------------------------
# checks

@dataclass(frozen=True)
class CheckResult:
    """``value`` is a max residual (identities) or a min slack (inequalities)."""

    value: float
    scale: float
    details: dict = field(default_factory=dict)

    def residual_ok(self, tol: float) -> bool:
        return self.value <= tol * max(self.scale, 1.0)

    def slack_ok(self, tol: float) -> bool:
        return self.value >= -tol * max(self.scale, 1.0)


def _scale(terms, points) -> float:
    best = 0.0
    for t in terms:
        vals = np.abs(_value(t, points))
        if np.size(vals):
            best = max(best, float(np.nanmax(vals)))
    return best


def _lhs_identity(parts, m, theta_Pz):
    lhs_mult = theta_Pz * parts.I1.conj() + theta_Pz.conj() * parts.I1
    return lhs_mult, parts.M.d(0), _sum(parts.V[k].d(k + 1) for k in range(m))


def _factorization_result(parts: IdentityParts, pts) -> CheckResult:
    tPz = parts.theta_Pz
    r1 = tPz - (parts.I1 + parts.I2)
    prod = tPz * parts.I1.conj() + tPz.conj() * parts.I1
    rhs = 2.0 * (parts.I1 * parts.I1.conj()) + parts.I1 * parts.I2.conj() + parts.I2 * parts.I1.conj()
    r2 = prod - rhs
    res1 = float(np.max(np.abs(_value(r1, pts)), initial=0.0))
    res2 = float(np.max(np.abs(_value(r2, pts)), initial=0.0))
    scale = _scale([tPz, parts.I1, parts.I2, prod, rhs], pts)
    return CheckResult(max(res1, res2), scale, {"sum": res1, "product": res2})


def _identity_result(parts: IdentityParts, m: int, pts) -> CheckResult:
    lhs_terms = _lhs_identity(parts, m, parts.theta_Pz)
    lhs = _sum(lhs_terms)
    rhs = _sum(parts.rhs_terms.values())
    res = float(np.max(np.abs(_value(lhs - rhs, pts)), initial=0.0))
    scale = _scale(list(lhs_terms) + list(parts.rhs_terms.values()), pts)
    return CheckResult(res, scale)


def check_factorization(spec: OperatorSpec, z, sample_points) -> CheckResult:
    """Max residual of ``theta P z = I1 + I2`` and of the product expansion."""
    return _factorization_result(assemble_parts(spec, z), np.atleast_2d(sample_points))


def check_identity(spec: OperatorSpec, z, sample_points) -> CheckResult:
    """Max residual ``|LHS - RHS|`` of the weighted identity."""
    return _identity_result(assemble_parts(spec, z), spec.m, np.atleast_2d(sample_points))


def verify(spec: OperatorSpec, z, sample_points) -> tuple[CheckResult, CheckResult]:
    """Identity and factorization residuals from a single assembly."""
    parts = assemble_parts(spec, z)
    pts = np.atleast_2d(sample_points)
    return _identity_result(parts, spec.m, pts), _factorization_result(parts, pts)


def _require_gauge(spec: OperatorSpec):
    expected = -2.0 * divergence_term(spec.m, spec.a, spec.ell)
    diff = spec.psi_gauge - expected
    if not diff.is_zero() and diff.max_abs_coef() > 1e-12 * max(1.0, expected.max_abs_coef()):
        raise IdentityError("gauge mismatch: Psi must equal -2 sum_jk (a^{jk} ell_j)_k")


def _gl_rhs_common(parts, m, a, b):
    """``ib sum_jk (a^{jk}_t l_j + 2 a^{jk} l_{jt}) X_k`` pieces, per k."""
    lj = parts.extras["lj"]
    return [_sum(a[j][k].d(0) * lj[j] + 2.0 * a[j][k] * lj[j].d(0) for j in range(m))
            for k in range(m)]


def parabolic_pointwise_check(b: float, spec: OperatorSpec, z, sample_points) -> CheckResult:
    """Min slack of the pointwise estimate for ``G = (1 + ib) d_t + div(a grad)``."""
    spec = _as_gl(spec, b)
    _require_gauge(spec)
    pts = np.atleast_2d(sample_points)
    if spec.s0 > 0 and spec.min_ellipticity(pts) < spec.s0 * (1 - 1e-12):
        raise IdentityError("ellipticity condition fails on sample points")
    m, a = spec.m, spec.a
    parts = assemble_parts(spec, z)
    ex = parts.extras
    S, vv, X, Wjk, al = ex["S"], ex["vv"], ex["X"], ex["Wjk"], ex["al"]
    tPz = parts.theta_Pz
    lhs_terms = [(tPz * tPz.conj()).real(), parts.M.d(0),
                 _sum(parts.V[k].d(k + 1) for k in range(m))]
    grad = None
    for j in range(m):
        for k in range(m):
            c = (2.0 * _sum(al[k].d(kp + 1) * a[j][kp] for kp in range(m))
                 - _sum(a[j][k].d(kp + 1) * al[kp] for kp in range(m))
                 + 0.5 * a[j][k].d(0) + a[j][k] * S)
            grad = c * Wjk[j][k] if grad is None else grad + c * Wjk[j][k]
    common = _gl_rhs_common(parts, m, a, b)
    mixed = 1j * b * _sum(common[k] * X[k] for k in range(m))
    vb, v, vt, vbt = ex["vb"], ex["v"], ex["vt"], ex["vbt"]
    timet = -1j * b * S * (vb * vt - v * vbt)
    rhs_terms = [grad, mixed, timet, parts.B * vv]
    slack = _sum(lhs_terms) - _sum(rhs_terms)
    vals = _value(slack, pts)
    scale = _scale(lhs_terms + rhs_terms, pts)
    imag = float(np.max(np.abs(np.imag(vals)), initial=0.0))
    return CheckResult(float(np.min(np.real(vals))) if np.size(vals) else 0.0,
                       scale, {"max_imag": imag, "slack": slack})


def modified_pointwise_check(b: float, spec: OperatorSpec, z, sample_points) -> CheckResult:
    """Min slack of the modified pointwise estimate (with ``V~``, ``c^{jk}``, ``B~``)."""
    spec = _as_gl(spec, b)
    _require_gauge(spec)
    if spec.s0 <= 0:
        raise IdentityError("modified estimate needs an ellipticity constant s0 > 0")
    pts = np.atleast_2d(sample_points)
    if spec.min_ellipticity(pts) < spec.s0 * (1 - 1e-12):
        raise IdentityError("ellipticity condition fails on sample points")
    m, a = spec.m, spec.a
    parts = assemble_parts(spec, z, modified=True)
    ex = parts.extras
    S, vv, X, Wjk, Sj = ex["S"], ex["vv"], ex["X"], ex["Wjk"], ex["Sj"]
    tPz = parts.theta_Pz
    lhs_terms = [2.0 * (tPz * tPz.conj()).real(), parts.M.d(0),
                 _sum(parts.V_tilde[k].d(k + 1) for k in range(m))]
    grad = _sum(parts.c_jk[j][k] * Wjk[j][k] for j in range(m) for k in range(m))
    common = _gl_rhs_common(parts, m, a, b)
    g = 1.0 + b * b
    mixed = 1j * b * _sum((common[k] + (1.0 / g) * _sum(Sj[j] * a[j][k] for j in range(m))) * X[k]
                          for k in range(m))
    rhs_terms = [grad, parts.B_tilde * vv, mixed]
    slack = _sum(lhs_terms) - _sum(rhs_terms)
    vals = _value(slack, pts)
    scale = _scale(lhs_terms + rhs_terms, pts)
    s_vals = np.real(_value(S, pts))
    return CheckResult(float(np.min(np.real(vals))) if np.size(vals) else 0.0,
                       scale, {"max_imag": float(np.max(np.abs(np.imag(vals)), initial=0.0)),
                               "min_divergence_term": float(np.min(s_vals, initial=np.inf)),
                               "slack": slack, "parts": parts})


def modified_slack_split(b: float, spec: OperatorSpec, z):
    """Closed-form value of the modified-estimate slack as explicit squares.

    Returns ``(squares, s_term)`` where ``squares`` is a sum of squared moduli
    (always >= 0) and ``s_term = S/(1+b^2) sum_jk a^{jk} w_j conj(w_k)`` with
    ``w_j = v_j + 2ib l_j v`` carries the sign of ``S = sum_jk (a^{jk} l_j)_k``.
    The slack polynomial equals ``squares + s_term`` exactly.
    """
    spec = _as_gl(spec, b)
    m, a = spec.m, spec.a
    parts = assemble_parts(spec, z)
    ex = parts.extras
    S, v, vj, lj = ex["S"], ex["v"], ex["vj"], ex["lj"]
    tPz, I1 = parts.theta_Pz, parts.I1
    g = 1.0 + b * b
    d1 = tPz - I1
    wq = (1 - 1j * b) * tPz + 1j * b * v * S
    squares = (d1 * d1.conj() + I1 * I1.conj()).real() + (1.0 / g) * (wq * wq.conj()).real()
    wj = [vj[j] + 2j * b * lj[j] * v for j in range(m)]
    quad = _sum(a[j][k] * wj[j] * wj[k].conj() for j in range(m) for k in range(m)).real()
    return squares, (1.0 / g) * S * quad


def parabolic_slack_split(b: float, spec: OperatorSpec, z):
    """Slack of the unmodified estimate equals ``|theta G z - I1|^2 + |I1|^2``."""
    spec = _as_gl(spec, b)
    parts = assemble_parts(spec, z)
    d1 = parts.theta_Pz - parts.I1
    return (d1 * d1.conj() + parts.I1 * parts.I1.conj()).real()


def _as_gl(spec: OperatorSpec, b: float) -> OperatorSpec:
    nv = spec.num_vars
    if isinstance(spec.alpha, MultiPoly) and isinstance(spec.beta, MultiPoly):
        if not (spec.alpha.is_constant() and spec.alpha.constant_value() == 1.0):
            raise IdentityError("parabolic checks need alpha == 1")
        if spec.beta.is_constant() and abs(spec.beta.constant_value() - b) == 0:
            return spec
    return replace(spec, alpha=MultiPoly.const(nv, 1.0), beta=MultiPoly.const(nv, b))


# ---------------------------------------------------------------------------
# finite-difference cross-check on a local grid

def fd_identity_residual(m: int, alpha: Callable, beta: Callable, a, psi: Callable,
                         ell: Callable, z: Callable, point, h: float) -> dict:
    """Residuals at ``point`` using true ``theta = exp(ell)`` and ``v = theta z``.

    Every input is a vectorized callable of ``(t, x_1, ..., x_m)``.  All
    derivatives are central differences with step ``h``, so the residuals are
    ``O(h^2)``.  ``theta P z`` is computed directly from ``z`` rather than via
    the chain-rule form used by the polynomial route.
    """
    layers = 6
    S = lambda f: GridField.sample(f, point, h, layers)  # noqa: E731
    th = S(lambda *c: np.exp(ell(*c)))
    zf = S(z)
    v = th * zf
    af = tuple(tuple(S(a[j][k]) for k in range(m)) for j in range(m))
    parts = _assemble(m, S(alpha), S(beta), af, S(psi), S(ell), v, theta=th, z=zf)
    direct = parts.extras["theta_Pz_direct"]
    lhs = _sum(_lhs_identity(parts, m, direct))
    rhs = _sum(parts.rhs_terms.values())
    return {
        "identity": abs((lhs - rhs).center()),
        "factorization": abs((direct - (parts.I1 + parts.I2)).center()),
        "chain_rule": abs((direct - parts.theta_Pz).center()),
        "scale": max(abs(lhs.center()), abs(rhs.center()), 1.0),
    }


def fd_modified_correction_gap(m: int, b: float, a, ell: Callable, z: Callable, point,
                               h: float) -> float:
    """Gap between the z-form and theta-eliminated gradient corrections at ``point``."""
    layers = 6
    S = lambda f: GridField.sample(f, point, h, layers)  # noqa: E731
    th = S(lambda *c: np.exp(ell(*c)))
    zf = S(z)
    v = th * zf
    af = tuple(tuple(S(a[j][k]) for k in range(m)) for j in range(m))
    ellf = S(ell)
    one, bf = ellf.const_like(1.0), ellf.const_like(b)
    psi = -2.0 * divergence_term(m, af, ellf)
    pz = _assemble(m, one, bf, af, psi, ellf, v, theta=th, z=zf, modified_b=b)
    pv = _assemble(m, one, bf, af, psi, ellf, v, modified_b=b)
    return max(abs((pz.V_tilde[k] - pv.V_tilde[k]).center()) for k in range(m))


# ---------------------------------------------------------------------------
# random ensembles

def sample_points(rng: np.random.Generator, m: int, n: int, lo: float = 0.1,
                  hi: float = 0.9) -> np.ndarray:
    return rng.uniform(lo, hi, size=(n, m + 1))


def _random_symmetric(rng, m, degree, scale, diag_shift=0.0):
    nv = m + 1
    a = [[None] * m for _ in range(m)]
    for j in range(m):
        for k in range(j, m):
            c = random_poly(rng, nv, degree, scale=scale)
            if j == k and diag_shift:
                c = c + diag_shift
            a[j][k] = a[k][j] = c
    return tuple(tuple(row) for row in a)


def random_configuration(rng: np.random.Generator, m: int) -> tuple[OperatorSpec, MultiPoly]:
    """Random general operator: symmetric ``a`` and real ``alpha, beta, ell, Psi`` of
    degree <= 2 and a complex ``z`` of degree <= 3."""
    nv = m + 1
    a = _random_symmetric(rng, m, 2, 1.0)
    spec = OperatorSpec(m=m, alpha=random_poly(rng, nv, 2), beta=random_poly(rng, nv, 2),
                        a=a, psi_gauge=random_poly(rng, nv, 2), ell=random_poly(rng, nv, 2))
    return spec, random_poly(rng, nv, 3, complex_coefs=True)


def random_elliptic_configuration(rng: np.random.Generator, m: int, b: float, pts, *,
                                  s0: float = 0.5, max_tries: int = 200):
    """Random parabolic-gauge operator with ``a >= s0`` and ``S >= 0`` on ``pts``.

    ``a`` is ``s0 + 1`` on the diagonal plus small degree-1 perturbations,
    ``ell`` is a convex quadratic plus a small cubic part, and draws are
    rejected until ellipticity and the sign of ``S = sum_jk (a^{jk} ell_j)_k``
    hold on every point.
    """
    nv = m + 1
    pts = np.atleast_2d(pts)
    for _ in range(max_tries):
        a = _random_symmetric(rng, m, 1, 0.2 / m, diag_shift=s0 + 1.0)
        x = MultiPoly.variables(nv)
        quad = _sum(float(rng.uniform(0.5, 2.0)) * x[j + 1] * x[j + 1] for j in range(m))
        ell = quad + random_poly(rng, nv, 2, scale=0.5) + random_poly(rng, nv, 3, scale=0.1)
        spec = preset("ginzburg_landau", m, a, ell, b=b, s0=s0)
        if spec.min_ellipticity(pts) < s0:
            continue
        if np.min(np.real(divergence_term(m, a, ell).eval_many(pts))) < 0:
            continue
        return spec, random_poly(rng, nv, 3, complex_coefs=True)
    raise IdentityError("could not draw an elliptic configuration with S >= 0")
