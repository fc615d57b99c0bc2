import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glc.discretization import (Coefficients, DiscretizationError, Grid, PotentialField,
                                Trajectory, apply_G, chi_omega, from_binary, integrate,
                                norms, potential_norm_r, spatial_operator, to_binary, to_csv)
from glc.weights import DomainSpec, WeightSpec, build_psi, eval_weights

UNIT = DomainSpec.interval(T=1.0)
SQUARE = DomainSpec(2, ((0, 1), (0, 1)), 1.0, ((0.3, 0.7), (0.3, 0.7)), ((0.4, 0.6), (0.4, 0.6)))


def sine(grid, k=1):
    x = grid.full_points()[..., 0]
    out = np.sin(k * np.pi * x)
    out[[0, -1]] = 0.0
    return out


def variable_2d():
    def func(t, x):
        x = np.asarray(x)
        a11 = 1.5 + 0.5 * np.sin(np.pi * x[..., 0]) * x[..., 1]
        a22 = 1.0 + x[..., 0] * x[..., 1]
        a12 = 0.3 * np.cos(x[..., 0] + x[..., 1])
        out = np.empty(x.shape[:-1] + (2, 2))
        out[..., 0, 0], out[..., 1, 1] = a11, a22
        out[..., 0, 1] = out[..., 1, 0] = a12
        return out
    return Coefficients(func, 2, False, "variable")


def test_grid_spacings():
    g = Grid(UNIT, 199, 400)
    assert g.dx == pytest.approx(1 / 200) and g.dt == pytest.approx(1 / 400)
    g2 = Grid(SQUARE, 9, 10, 19)
    assert g2.spacings == pytest.approx((0.1, 0.05))
    assert g2.full_points().shape == (11, 21, 2)
    with pytest.raises(DiscretizationError):
        Grid(UNIT, 0, 10)


def test_trajectory_boundary():
    g = Grid(UNIT, 9, 4)
    vals = np.ones((5, 11), dtype=complex)
    with pytest.raises(DiscretizationError, match="vanish"):
        Trajectory(g, vals)
    tr = Trajectory.from_interior(g, np.ones((5, 9)))
    assert np.all(tr.values[:, [0, -1]] == 0)


def test_laplacian_of_sine():
    g = Grid(UNIT, 199, 10)
    L = spatial_operator(g, Coefficients.identity(1))
    z = g.restrict(sine(g))
    err = np.max(np.abs(L @ z + np.pi ** 2 * z))
    assert err <= 1e-3


def test_G_of_zero_and_time_derivative():
    g = Grid(UNIT, 199, 100)
    tr = Trajectory.zeros(g)
    assert np.all(apply_G(tr, 3, 1.0, Coefficients.identity(1)) == 0)
    s = sine(g)
    vals = g.times[:, None] * s[None, :]
    tr = Trajectory(g, vals.astype(complex))
    G = apply_G(tr, 10, 3.0, Coefficients.identity(1))
    tmid = g.times[10] + 0.5 * g.dt
    expect = (1 + 3j) * g.restrict(s) - np.pi ** 2 * tmid * g.restrict(s)
    assert np.max(np.abs(G - expect)) <= 1e-3


def test_operator_symmetric_and_negative(rng):
    for grid, coeffs in ((Grid(UNIT, 30, 4), Coefficients(lambda t, x: (1 + x[..., 0] ** 2)[..., None, None] * np.eye(1), 1)),
                         (Grid(SQUARE, 12, 4, 15), variable_2d())):
        L = spatial_operator(grid, coeffs)
        assert abs(L - L.T).max() == 0
        z, w = rng.standard_normal((2, grid.size))
        lhs, rhs = (L @ z) @ w, z @ (L @ w)
        assert abs(lhs - rhs) <= 1e-12 * abs(lhs)
        assert np.max(np.linalg.eigvalsh(L.toarray())) < 0


def test_nonsymmetric_coefficients_rejected():
    bad = Coefficients(lambda t, x: np.broadcast_to(np.array([[1.0, 0.2], [0.1, 1.0]]),
                                                    np.shape(x)[:-1] + (2, 2)), 2)
    with pytest.raises(DiscretizationError, match="non-symmetric"):
        spatial_operator(Grid(SQUARE, 5, 2), bad)


def test_second_order_variable_2d():
    # manufactured: z = sin(pi x) sin(pi y) with the variable coefficients above
    errs = []
    for n in (15, 31):
        g = Grid(SQUARE, n, 2)
        a = variable_2d()
        L = spatial_operator(g, a)
        X = g.full_points()
        z = np.sin(np.pi * X[..., 0]) * np.sin(np.pi * X[..., 1])
        lz = L @ g.restrict(z)
        # high-accuracy reference by differentiating the flux with small centered steps
        h = 1e-4
        P = g.interior_points()

        def flux(p, j):
            zx = np.pi * np.cos(np.pi * p[:, 0]) * np.sin(np.pi * p[:, 1])
            zy = np.pi * np.sin(np.pi * p[:, 0]) * np.cos(np.pi * p[:, 1])
            A = a(0.0, p)
            return A[:, j, 0] * zx + A[:, j, 1] * zy
        e = np.eye(2)
        ref = sum((flux(P + h * e[j], j) - flux(P - h * e[j], j)) / (2 * h) for j in range(2))
        errs.append(np.max(np.abs(lz - ref)))
    assert 3.0 < errs[0] / errs[1] < 5.0


def test_integrals():
    g = Grid(UNIT, 99, 50)
    ones = np.ones((g.nt + 1,) + g.full_shape)
    assert integrate(g, ones) == pytest.approx(1.0, abs=1e-12)
    tt = np.broadcast_to(g.times[:, None], ones.shape)
    assert integrate(g, tt) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(DiscretizationError, match="NaN"):
        integrate(g, np.full(ones.shape, np.nan))


def _theta_sq_integral(nx, nt):
    g = Grid(UNIT, nx, nt)
    spec = WeightSpec(1.0, 2.0, build_psi(UNIT), 1.0, validate=False)
    t = g.times[1:-1]
    x = g.full_points()[..., 0]
    lw = np.full((g.nt + 1,) + g.full_shape, -np.inf)
    lw[1:-1] = 2 * eval_weights(spec, t[:, None], x[None, :]).ell
    return integrate(g, np.ones_like(lw), lw)


def test_weighted_integral_refinement():
    coarse = _theta_sq_integral(99, 100)
    fine = _theta_sq_integral(999, 1000)
    assert np.isfinite(coarse) and coarse > 0
    assert abs(coarse - fine) / fine <= 1e-4


def test_quadrature_second_order():
    vals = []
    for n in (20, 40, 80):
        g = Grid(UNIT, n - 1, n)
        X = g.full_points()[..., 0]
        f = np.exp(-g.times[:, None]) * np.sin(np.pi * X)[None, :] ** 2 * (1 + X)
        vals.append(integrate(g, f))
    r = (vals[0] - vals[1]) / (vals[1] - vals[2])
    assert 3.5 < r < 4.5


def test_norms():
    g = Grid(UNIT, 199, 10)
    s = np.broadcast_to(sine(g), (g.nt + 1,) + g.full_shape).astype(complex)
    tr = Trajectory(g, s)
    assert norms(tr, kind="L2_Omega_at_t", level=3) == pytest.approx(np.sqrt(0.5), abs=1e-4)
    z = Trajectory.zeros(g)
    for kind in ("L2_Omega_at_t", "L2_Q", "L2_omega_Q"):
        assert np.all(norms(z, kind=kind, level=0) == 0)
    full = DomainSpec(1, ((0, 1),), 1.0, ((0, 1),), ((0.4, 0.6),))
    gf = Grid(full, 49, 10)
    trf = Trajectory(gf, np.broadcast_to(sine(gf), (11, 51)).astype(complex))
    assert norms(trf, kind="L2_omega_Q") == norms(trf, kind="L2_Q")
    with pytest.raises(DiscretizationError):
        norms(trf, kind="Linf")


def test_potential_norm():
    g = Grid(UNIT, 99, 10)
    assert potential_norm_r(PotentialField.zero(g)) == 0
    assert potential_norm_r(PotentialField.constant(g, 2.5)) == pytest.approx(2.5, abs=0.03)
    vals = np.zeros((g.nt + 1,) + g.full_shape, dtype=complex)
    vals[: g.nt // 2] = 3.0
    q = PotentialField(g, vals)
    assert q.r == pytest.approx(3.0, abs=0.04)
    g2 = Grid(SQUARE, 19, 4)
    assert potential_norm_r(PotentialField.constant(g2, 2.0)) == pytest.approx(2.0, abs=0.05)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 40), st.integers(0, 2 ** 32 - 1))
def test_chi_is_projection(n, seed):
    g = Grid(UNIT, n, 2)
    v = np.random.default_rng(seed).standard_normal((3, g.size)) + 0j
    once = chi_omega(g, v)
    assert np.array_equal(chi_omega(g, once), once)
    assert np.all(once[:, ~g.omega_mask()] == 0)


def test_binary_round_trip(rng):
    for g in (Grid(UNIT, 7, 3), Grid(SQUARE, 4, 2, 5)):
        tr = Trajectory.from_interior(g, rng.standard_normal((g.nt + 1, g.size))
                                      + 1j * rng.standard_normal((g.nt + 1, g.size)))
        data = to_binary(tr)
        back = from_binary(data, g.domain)
        assert back.grid == g
        assert np.array_equal(back.values, tr.values)
        assert data[:4] == b"GLCF"
    with pytest.raises(DiscretizationError):
        from_binary(b"XXXX" + data[4:], g.domain)


def test_csv_export():
    g = Grid(UNIT, 3, 1)
    tr = Trajectory.from_interior(g, np.ones((2, 3)) * (1 + 2j))
    lines = to_csv(tr).splitlines()
    assert lines[0] == "t,x,re,im"
    assert len(lines) == 1 + 2 * 5
    assert lines[2] == "0,0.25,1,2"
