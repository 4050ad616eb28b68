from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toriqp.dynamics import flow_batch, omega0
from toriqp.ertbp import lagrange_points
from toriqp.newton import invariance_errors
from toriqp.seed import (
    GOLDEN,
    SeedError,
    classify_floquet,
    continued_fraction,
    linear_torus_seed,
    noble_from,
    nobilize,
    orbit_from_state,
    vertical_lyapunov,
    vertical_mode,
)


def trailing_ones(x):
    """Ones at the end of the expansion of x, ignoring the last two (rounding-limited) terms."""
    cf = continued_fraction(x, 60)[:-2]
    n = 0
    while n < len(cf) and cf[-1 - n] == 1:
        n += 1
    return n


def is_noble(x):
    """x is the noble number grown from one of its own expansion prefixes."""
    cf = continued_fraction(x, 60)
    return any(abs(noble_from(cf[:j]) - x) <= 2 * np.spacing(x) for j in range(1, len(cf) + 1))


def exact_cf(q: Fraction):
    out = []
    while True:
        a = q.numerator // q.denominator
        out.append(a)
        q -= a
        if q == 0:
            return out
        q = 1 / q


class TestContinuedFractions:
    @pytest.mark.parametrize("x", [Fraction(714, 10000), Fraction(355, 113), Fraction(3, 7), Fraction(1, 1)])
    def test_rationals(self, x):
        assert continued_fraction(float(x)) == exact_cf(x)

    def test_golden(self):
        assert continued_fraction(GOLDEN - 1, 20) == [0] + [1] * 19
        assert trailing_ones(GOLDEN - 1) >= 30

    def test_noble_value(self):
        assert noble_from([0]) == pytest.approx(GOLDEN - 1, abs=2e-16)
        assert noble_from([0, 13]) == pytest.approx(1 / (13 + 1 / GOLDEN), abs=2e-16)


class TestNobilize:
    def test_noble_predicate(self):
        assert is_noble(GOLDEN - 1) and is_noble(nobilize(0.5, 1e-6))
        assert not is_noble(0.3) and not is_noble(0.0714)

    def test_golden_is_fixed(self):
        assert nobilize(0.6180339887) == pytest.approx((np.sqrt(5) - 1) / 2, abs=1e-15)

    def test_half(self):
        nu = nobilize(0.5, tol=0.2)
        assert 0.3 < nu < 0.7
        assert trailing_ones(nu) >= 15

    def test_default_tolerance_window(self):
        nu = nobilize(0.0714, tol=1.6e-4)
        assert abs(nu - 0.0714) <= 1.6e-4
        assert trailing_ones(nu) >= 15

    def test_errors(self):
        with pytest.raises(ValueError):
            nobilize(1.2)
        with pytest.raises(ValueError):
            nobilize(0.3, tol=0.0)
        with pytest.raises(ValueError):
            nobilize(0.3, tol=1e-14, max_depth=2)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.01, 0.99), st.floats(1e-6, 1e-2))
    def test_within_tolerance_and_noble(self, rho, tol):
        nu = nobilize(rho, tol)
        assert abs(nu - rho) <= tol
        # a huge partial quotient leaves few ones resolvable in double precision
        assert is_noble(nu)


class TestFloquet:
    def test_missing_unit_pair(self):
        with pytest.raises(SeedError, match="unit-circle"):
            classify_floquet(np.diag([3.0, 1 / 3, 2.0, 0.5, 1.0, 1.0]))

    def test_no_unstable(self):
        with pytest.raises(SeedError):
            classify_floquet(np.eye(6))

    def test_ordering(self):
        c, s = np.cos(0.4), np.sin(0.4)
        A = np.zeros((6, 6))
        A[0, 0], A[1, 1] = 5.0, 0.2
        A[2:4, 2:4] = [[c, -s], [s, c]]
        A[4:, 4:] = [[1.0, 1e-3], [0.0, 1.0]]
        vals, _ = classify_floquet(A)
        assert vals[0] == pytest.approx(5.0) and vals[1] == pytest.approx(0.2)
        assert np.angle(vals[2]) == pytest.approx(0.4)
        assert vals[3] == pytest.approx(np.conj(vals[2]))


class TestVerticalLyapunov:
    def test_small_amplitude_period(self, ertbp):
        L1 = lagrange_points(ertbp.mu)[0]
        ev = np.linalg.eigvals(ertbp.DX(L1[None], np.zeros((1, 1)), 0.0)[0])
        freqs = np.sort(np.abs(ev.imag[ev.imag > 1e-8]))
        po = vertical_lyapunov(ertbp, vz=1e-4)
        # the vertical frequency is the one closest to the period found
        wv = freqs[np.argmin(np.abs(freqs - 2 * np.pi / po.T_po))]
        assert po.T_po == pytest.approx(2 * np.pi / wv, rel=1e-5)
        assert vertical_mode(ertbp.mu)[1] == pytest.approx(wv, rel=1e-10)

    def test_orbit_properties(self, ertbp, vertical_orbit):
        po = vertical_orbit
        zT = flow_batch(ertbp, po.z0[None], np.zeros((1, 1)), po.T_po, 0.0).z[0]
        assert np.max(np.abs(zT - po.z0)) <= 1e-11
        ev = np.linalg.eigvals(po.monodromy)
        lu = ev[np.argmax(ev.real)]
        assert abs(lu.imag) < 1e-8 and lu.real > 1
        assert po.lam_u == pytest.approx(lu.real, rel=1e-10)
        assert abs(po.eigvals[0] * po.eigvals[1] - 1) <= 1e-8
        Om = omega0(3)
        assert np.max(np.abs(po.monodromy.T @ Om @ po.monodromy - Om)) < 1e-9 * po.lam_u**2
        assert po.rho == pytest.approx(nobilize(0.0723), abs=1e-10)

    def test_selector_validation(self, ertbp):
        with pytest.raises(ValueError):
            vertical_lyapunov(ertbp)
        with pytest.raises(ValueError):
            vertical_lyapunov(ertbp, vz=0.01, rho=0.07)

    def test_orbit_from_state_rejects_open_orbit(self, ertbp, vertical_orbit):
        with pytest.raises(SeedError, match="closing"):
            orbit_from_state(ertbp, vertical_orbit.z0, vertical_orbit.T_po * 1.01)


class TestLinearSeed:
    def test_zero_amplitude_is_exact(self, ertbp, vertical_orbit):
        sol = linear_torus_seed(vertical_orbit, s=0.0, N1=16, N2=8, m=4, model=ertbp)
        assert invariance_errors(sol, ertbp).err_K < 1e-11

    def test_quadratic_error_in_amplitude(self, ertbp, vertical_orbit):
        errs = [invariance_errors(linear_torus_seed(vertical_orbit, s=s, N1=16, N2=8, m=4, model=ertbp), ertbp).err_K for s in (2e-4, 1e-4)]
        assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.1)

    def test_structure(self, ertbp, vertical_orbit):
        po = vertical_orbit
        sol = linear_torus_seed(po, s=1e-3, N1=16, N2=8, m=2, model=ertbp)
        assert sol.lam == po.lam_u and sol.T == po.T_po and sol.m == 2
        assert sol.rot.omega[0] == po.rho
        assert sol.rot.alpha[0] == pytest.approx(po.T_po / (2 * np.pi))
        K0 = sol.K[0].grid
        assert np.max(np.abs(K0 - K0[:, :, :1])) == 0.0  # constant in phi
        assert np.max(np.abs(K0.mean(axis=(1, 2)) - po.z0)) < 1e-15
        assert np.linalg.norm(sol.W[0].grid[:, 0, 0]) == pytest.approx(1.0)

    def test_refinement_is_fast(self, e0_refined):
        assert e0_refined.n_it <= 5
        assert e0_refined.report.err_K < 1e-9 and e0_refined.report.err_W < 1e-5
