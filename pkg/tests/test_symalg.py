import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glc.symalg import MultiPoly, PolyError, poly_combine, poly_diff, poly_eval, random_poly

NV = 3


def exps(nv, deg):
    return [e for e in itertools.product(range(deg + 1), repeat=nv) if sum(e) <= deg]


@st.composite
def int_polys(draw, nv=NV, deg=4):
    terms = {}
    for e in exps(nv, deg):
        if draw(st.booleans()):
            re = draw(st.integers(-5, 5))
            im = draw(st.integers(-5, 5))
            terms[e] = complex(re, im)
    return MultiPoly.from_terms(nv, terms)


dyadic = st.tuples(*[st.integers(-8, 8).map(lambda k: k / 4) for _ in range(NV)])


def test_monomial_product():
    t, x = MultiPoly.variables(2)
    assert poly_combine(x * x, x, "mul") == x ** 3


def test_additive_inverse_is_zero():
    rng = np.random.default_rng(1)
    p = random_poly(rng, 3, 3, complex_coefs=True)
    assert poly_combine(p, poly_combine(p, None, "scale", -1), "add").is_zero()


def test_conjugate_pair():
    t, x = MultiPoly.variables(2)
    assert (x + 1j * t) * (x - 1j * t) == x * x + t * t


def test_derivatives():
    t, x = MultiPoly.variables(2)
    assert poly_diff(x * x * t, 1) == 2 * x * t
    assert poly_diff(x * x, 0).is_zero()
    xt = x * t
    assert poly_diff(poly_diff(xt, 0), 1) == poly_diff(poly_diff(xt, 1), 0) == MultiPoly.const(2, 1)


def test_evaluation():
    t, x = MultiPoly.variables(2)
    assert poly_eval(x * x + 1j * t, (3, 2)) == 4 + 3j
    assert poly_eval(MultiPoly.zero(2), (0.3, 0.7)) == 0
    assert poly_eval((x + 1j * t) * (x - 1j * t), (1, 2)) == 5 == (2 + 1j) * (2 - 1j)


def test_errors():
    p = MultiPoly.var(2, 0)
    with pytest.raises(PolyError):
        poly_combine(p, MultiPoly.var(3, 0), "add")
    with pytest.raises(PolyError):
        poly_diff(p, 2)
    with pytest.raises(PolyError):
        poly_eval(p, (1.0,))


def test_zero_coefficients_pruned():
    p = MultiPoly.from_terms(2, {(1, 0): 1.0, (0, 1): 0.0})
    assert len(p) == 1
    assert all(abs(c) > 0 for c in (p - p + p).terms.values())


@settings(max_examples=60, deadline=None)
@given(int_polys(), int_polys(), st.lists(dyadic, min_size=1, max_size=100))
def test_product_evaluates_exactly(p, q, points):
    pq = p * q
    for pt in points:
        assert pq.eval(pt) == p.eval(pt) * q.eval(pt)


@settings(max_examples=60, deadline=None)
@given(int_polys(), int_polys(), st.integers(0, NV - 1))
def test_leibniz(p, q, k):
    assert (p * q).d(k) == p.d(k) * q + p * q.d(k)


@settings(max_examples=60, deadline=None)
@given(int_polys(deg=5), st.integers(0, NV - 1), st.integers(0, NV - 1))
def test_mixed_partials_commute(p, i, j):
    assert p.d(i).d(j) == p.d(j).d(i)


@settings(max_examples=40, deadline=None)
@given(int_polys(), int_polys(), int_polys())
def test_ring_laws(p, q, r):
    assert p + q == q + p
    assert p * q == q * p
    assert (p + q) + r == p + (q + r)
    assert (p * q) * r == p * (q * r)


def test_random_products_at_rational_points(rng):
    # float coefficients: agreement to rounding at 100 random rational points
    for _ in range(20):
        p = random_poly(rng, 3, 4, complex_coefs=True)
        q = random_poly(rng, 3, 4, complex_coefs=True)
        pts = rng.integers(-10, 11, size=(100, 3)) / rng.integers(1, 11, size=(100, 3))
        lhs = (p * q).eval_many(pts)
        rhs = p.eval_many(pts) * q.eval_many(pts)
        assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12 * np.max(np.abs(rhs)))
