"""Sparse multivariate polynomials with complex coefficients.

Variables are ordered ``(t, x_1, ..., x_m)``; index 0 is time.  Terms are kept
as an integer exponent matrix plus a coefficient vector so that products and
sums vectorize in numpy.  Instances are immutable.
"""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence

import numpy as np

# coefficients below this are dropped (denormal guard)
PRUNE = 1e-300


class PolyError(ValueError):
    pass


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _combine(num_vars: int, exps: np.ndarray, coefs: np.ndarray):
    """Merge duplicate exponent rows and prune vanishing coefficients."""
    if exps.shape[0] == 0:
        return np.zeros((0, num_vars), dtype=np.int64), np.zeros(0, dtype=complex)
    if num_vars == 0:
        total = coefs.sum()
        if abs(total) < PRUNE:
            return np.zeros((0, 0), dtype=np.int64), np.zeros(0, dtype=complex)
        return np.zeros((1, 0), dtype=np.int64), np.array([total], dtype=complex)
    base = int(exps.max()) + 1
    if base ** num_vars < 2 ** 62:
        weights = base ** np.arange(num_vars, dtype=np.int64)
        keys = exps @ weights
        uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    else:
        uniq, first, inverse = np.unique(exps, axis=0, return_index=True, return_inverse=True)
        inverse = inverse.ravel()
    n = len(first)
    re = np.bincount(inverse, weights=coefs.real, minlength=n)
    im = np.bincount(inverse, weights=coefs.imag, minlength=n)
    merged = re + 1j * im
    keep = np.abs(merged) >= PRUNE
    return exps[first][keep], merged[keep]


class MultiPoly:
    """Polynomial in ``num_vars`` real variables with complex coefficients."""

    __slots__ = ("num_vars", "exps", "coefs")

    def __init__(self, num_vars: int, exps=None, coefs=None, *, _canonical: bool = False):
        self.num_vars = int(num_vars)
        if exps is None:
            exps = np.zeros((0, self.num_vars), dtype=np.int64)
            coefs = np.zeros(0, dtype=complex)
        exps = np.asarray(exps, dtype=np.int64).reshape(-1, self.num_vars)
        coefs = np.asarray(coefs, dtype=complex).ravel()
        if exps.shape[0] != coefs.shape[0]:
            raise PolyError("exponent/coefficient count mismatch")
        if np.any(exps < 0):
            raise PolyError("negative exponent")
        if not _canonical:
            exps, coefs = _combine(self.num_vars, exps, coefs)
        self.exps = _freeze(exps)
        self.coefs = _freeze(coefs)

    # -- constructors ---------------------------------------------------
    @classmethod
    def zero(cls, num_vars: int) -> "MultiPoly":
        return cls(num_vars)

    @classmethod
    def const(cls, num_vars: int, c: complex) -> "MultiPoly":
        return cls(num_vars, np.zeros((1, num_vars), dtype=np.int64), [c])

    @classmethod
    def var(cls, num_vars: int, index: int) -> "MultiPoly":
        if not 0 <= index < num_vars:
            raise PolyError(f"variable index {index} out of range for {num_vars} variables")
        e = np.zeros((1, num_vars), dtype=np.int64)
        e[0, index] = 1
        return cls(num_vars, e, [1.0])

    @classmethod
    def from_terms(cls, num_vars: int, terms: Mapping[Sequence[int], complex]) -> "MultiPoly":
        items = list(terms.items())
        for e, _ in items:
            if len(e) != num_vars:
                raise PolyError(f"exponent tuple {tuple(e)} does not have length {num_vars}")
        exps = np.array([e for e, _ in items], dtype=np.int64).reshape(-1, num_vars)
        return cls(num_vars, exps, [c for _, c in items])

    @classmethod
    def variables(cls, num_vars: int) -> tuple["MultiPoly", ...]:
        return tuple(cls.var(num_vars, i) for i in range(num_vars))

    # -- inspection -----------------------------------------------------
    @property
    def terms(self) -> dict[tuple[int, ...], complex]:
        return {tuple(int(x) for x in e): complex(c) for e, c in zip(self.exps, self.coefs)}

    def __len__(self) -> int:
        return self.coefs.shape[0]

    def is_zero(self) -> bool:
        return len(self) == 0

    def degree(self) -> int:
        if self.is_zero():
            return -1
        return int(self.exps.sum(axis=1).max())

    def is_constant(self) -> bool:
        return self.is_zero() or (len(self) == 1 and not self.exps.any())

    def constant_value(self) -> complex:
        """Value of the constant term (0 if absent)."""
        mask = ~self.exps.any(axis=1)
        return complex(self.coefs[mask].sum()) if mask.any() else 0j

    def const_like(self, c: complex) -> "MultiPoly":
        return MultiPoly.const(self.num_vars, c)

    def is_real(self) -> bool:
        return bool(np.all(self.coefs.imag == 0.0))

    def max_abs_coef(self) -> float:
        return float(np.abs(self.coefs).max()) if len(self) else 0.0

    def __eq__(self, other) -> bool:
        if not isinstance(other, MultiPoly):
            return NotImplemented
        return self.num_vars == other.num_vars and self.terms == other.terms

    __hash__ = None

    def __repr__(self) -> str:
        if self.is_zero():
            return f"MultiPoly({self.num_vars}, 0)"
        names = ["t"] + [f"x{i}" for i in range(1, self.num_vars)]
        parts = []
        for e, c in sorted(self.terms.items()):
            mono = "*".join(f"{n}^{k}" if k > 1 else n for n, k in zip(names, e) if k)
            parts.append(f"({c:g})" + (f"*{mono}" if mono else ""))
        return f"MultiPoly({self.num_vars}, " + " + ".join(parts) + ")"

    # -- arithmetic -----------------------------------------------------
    def _coerce(self, other) -> "MultiPoly":
        if isinstance(other, MultiPoly):
            if other.num_vars != self.num_vars:
                raise PolyError(
                    f"variable-count mismatch: {self.num_vars} vs {other.num_vars}")
            return other
        if isinstance(other, (int, float, complex, np.number)):
            return MultiPoly.const(self.num_vars, complex(other))
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        if other.is_zero():
            return self
        if self.is_zero():
            return other
        return MultiPoly(self.num_vars,
                         np.concatenate([self.exps, other.exps]),
                         np.concatenate([self.coefs, other.coefs]))

    __radd__ = __add__

    def __neg__(self) -> "MultiPoly":
        return MultiPoly(self.num_vars, self.exps, -self.coefs, _canonical=True)

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def scale(self, c: complex) -> "MultiPoly":
        c = complex(c)
        if c == 0:
            return MultiPoly.zero(self.num_vars)
        coefs = self.coefs * c
        keep = np.abs(coefs) >= PRUNE
        return MultiPoly(self.num_vars, self.exps[keep], coefs[keep], _canonical=True)

    def __mul__(self, other):
        if isinstance(other, (int, float, complex, np.number)):
            return self.scale(other)
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        if self.is_zero() or other.is_zero():
            return MultiPoly.zero(self.num_vars)
        exps = (self.exps[:, None, :] + other.exps[None, :, :]).reshape(-1, self.num_vars)
        coefs = (self.coefs[:, None] * other.coefs[None, :]).ravel()
        return MultiPoly(self.num_vars, exps, coefs)

    __rmul__ = __mul__

    def __pow__(self, n: int) -> "MultiPoly":
        if n < 0:
            raise PolyError("negative power")
        out = MultiPoly.const(self.num_vars, 1.0)
        base = self
        while n:
            if n & 1:
                out = out * base
            base = base * base
            n >>= 1
        return out

    def conj(self) -> "MultiPoly":
        """Complex conjugate (variables are real)."""
        return MultiPoly(self.num_vars, self.exps, np.conj(self.coefs), _canonical=True)

    def real(self) -> "MultiPoly":
        return MultiPoly(self.num_vars, self.exps, self.coefs.real.astype(complex))

    def imag(self) -> "MultiPoly":
        return MultiPoly(self.num_vars, self.exps, self.coefs.imag.astype(complex))

    def d(self, var: int) -> "MultiPoly":
        """Exact partial derivative with respect to variable ``var``."""
        if not 0 <= var < self.num_vars:
            raise PolyError(f"variable index {var} out of range for {self.num_vars} variables")
        mask = self.exps[:, var] > 0
        exps = self.exps[mask].copy()
        coefs = self.coefs[mask] * exps[:, var]
        exps[:, var] -= 1
        return MultiPoly(self.num_vars, exps, coefs, _canonical=True)

    # -- evaluation -----------------------------------------------------
    def __call__(self, *point) -> complex:
        if len(point) == 1 and np.ndim(point[0]) == 1:
            point = tuple(point[0])
        return self.eval(point)

    def eval(self, point: Sequence[float]) -> complex:
        point = tuple(point)
        if len(point) != self.num_vars:
            raise PolyError(f"point has length {len(point)}, expected {self.num_vars}")
        if self.is_zero():
            return 0j
        total = 0j
        for e, c in zip(self.exps, self.coefs):
            mono = 1.0
            for x, k in zip(point, e):
                for _ in range(int(k)):
                    mono = mono * x
            total += c * mono
        return total

    def eval_many(self, points) -> np.ndarray:
        """Evaluate at each row of ``points`` (shape ``(P, num_vars)``)."""
        pts = np.asarray(points, dtype=float).reshape(-1, self.num_vars)
        if self.is_zero():
            return np.zeros(pts.shape[0], dtype=complex)
        maxdeg = int(self.exps.max())
        powers = np.ones((pts.shape[0], self.num_vars, maxdeg + 1))
        for k in range(1, maxdeg + 1):
            powers[:, :, k] = powers[:, :, k - 1] * pts
        mono = np.ones((pts.shape[0], len(self)))
        for v in range(self.num_vars):
            mono *= powers[:, v, self.exps[:, v]]
        return mono @ self.coefs

    def substitute_shift(self, shift: Sequence[float]) -> "MultiPoly":
        """Polynomial ``p(y + shift)`` as a polynomial in ``y``."""
        out = MultiPoly.zero(self.num_vars)
        xs = [MultiPoly.var(self.num_vars, i) + float(s) for i, s in enumerate(shift)]
        for e, c in zip(self.exps, self.coefs):
            mono = MultiPoly.const(self.num_vars, c)
            for x, k in zip(xs, e):
                if k:
                    mono = mono * x ** int(k)
            out = out + mono
        return out


def poly_combine(p: MultiPoly, q: MultiPoly | None, op: str, c: complex | None = None) -> MultiPoly:
    """``op`` is ``"add"``, ``"mul"`` or ``"scale"`` (the latter uses ``c``)."""
    if op == "scale":
        if c is None:
            raise PolyError("scale requires a coefficient")
        return p.scale(c)
    if q is None or q.num_vars != p.num_vars:
        raise PolyError("variable-count mismatch")
    if op == "add":
        return p + q
    if op == "mul":
        return p * q
    raise PolyError(f"unknown op {op!r}")


def poly_diff(p: MultiPoly, var: int) -> MultiPoly:
    return p.d(var)


def poly_eval(p: MultiPoly, point: Sequence[float]) -> complex:
    return p.eval(point)


def random_poly(rng: np.random.Generator, num_vars: int, degree: int, *,
                complex_coefs: bool = False, density: float = 1.0,
                scale: float = 1.0) -> MultiPoly:
    """Random polynomial with total degree <= ``degree``."""
    exps = [e for e in _exponents(num_vars, degree)]
    mask = rng.random(len(exps)) < density
    coefs = rng.uniform(-scale, scale, len(exps))
    if complex_coefs:
        coefs = coefs + 1j * rng.uniform(-scale, scale, len(exps))
    chosen = [e for e, keep in zip(exps, mask) if keep]
    return MultiPoly(num_vars, np.array(chosen, dtype=np.int64).reshape(-1, num_vars),
                     coefs[mask])


def _exponents(num_vars: int, degree: int) -> Iterable[tuple[int, ...]]:
    if num_vars == 0:
        yield ()
        return
    for k in range(degree + 1):
        for rest in _exponents(num_vars - 1, degree - k):
            yield (k,) + rest
