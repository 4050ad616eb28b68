import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toriqp.cohomology import (
    AverageError,
    ResonanceError,
    RotationData,
    diophantine_margin,
    solve_cyclic_nonsmall,
    solve_cyclic_small,
    solve_nonsmall,
    solve_small,
)
from toriqp.fourier import GridSpec, TorusMap, average, evaluate, shift

GOLD = (np.sqrt(5) - 1) / 2
SPEC = GridSpec(1, 1, 32, 16)


def smooth(spec, c=2, seed=0, decay=0.6, zero_mean=False):
    rng = np.random.default_rng(seed)
    kk, jj = spec.wavenumbers()
    coef = (rng.standard_normal((c,) + spec.shape) + 1j * rng.standard_normal((c,) + spec.shape))
    coef *= decay ** (np.abs(kk) + np.abs(jj))
    grid = np.fft.ifft2(coef * spec.size, axes=(1, 2)).real
    f = TorusMap(spec, coef=TorusMap(spec, grid=grid).coef)
    if zero_mean:
        f = f - average(f)
    return TorusMap(spec, coef=f.coef)


def composed(xi, rot):
    """xi(theta + omega, phi + alpha) at the grid nodes by direct series evaluation."""
    th, ph = xi.spec.nodes()
    a, b = rot.angles()
    return evaluate(xi, th + a, ph + b)


def rot_golden(T=3.0):
    return RotationData([GOLD], [np.sqrt(2) - 1], T)


class TestRotationData:
    def test_alpha_hat(self):
        r = RotationData([0.1], [0.5], 2.0)
        assert r.alpha_hat[0] == 0.25 and r.d == 2 and r.ell == 1

    def test_rejects_bad_time(self):
        with pytest.raises(ValueError):
            RotationData([0.1], [0.5], 0.0)

    def test_scaled(self):
        r = RotationData([0.1], [0.5], 2.0).scaled(0.25)
        assert r.omega[0] == 0.025 and r.alpha[0] == 0.125 and r.T == 0.5


class TestNonSmall:
    def test_constant(self):
        eta = TorusMap.constant(SPEC, [1.7])
        xi = solve_nonsmall(eta, 2.0, 1.0, rot_golden())
        assert np.max(np.abs(xi.grid - 1.7)) < 1e-15

    def test_zero(self):
        assert solve_nonsmall(TorusMap.zeros(SPEC, 2), 3.0, 1.0, rot_golden()).sup() == 0

    def test_cosine_two_coefficients(self):
        s = GridSpec(1, 0, 16, 1)
        eta = TorusMap.from_function(s, lambda th, ph: np.cos(2 * np.pi * th))
        rot = RotationData([GOLD], [], 1.0)
        xi = solve_nonsmall(eta, 3.0, 1.0, rot)
        c = 0.5 / (3 - np.exp(2j * np.pi * GOLD))
        th = np.arange(16) / 16
        want = 2 * np.real(c * np.exp(2j * np.pi * th))
        assert np.max(np.abs(xi.grid[0, :, 0] - want)) < 1e-15
        resid = 3 * xi.grid - composed(xi, rot) - eta.grid
        assert np.max(np.abs(resid)) < 1e-14

    def test_equal_moduli_rejected(self):
        with pytest.raises(ValueError):
            solve_nonsmall(TorusMap.zeros(SPEC, 1), 1.0, 1.0, rot_golden())
        with pytest.raises(ValueError):
            solve_nonsmall(TorusMap.zeros(SPEC, 1), 2.0, -2.0, rot_golden())

    @pytest.mark.parametrize("lam,mu", [(0.5, 1.0), (2.0, 1.0), (1e3, 1.0), (1e-3, 1.0), (1.0, 40.0), (1 / 40, 40.0)])
    def test_round_trip(self, lam, mu):
        rot = rot_golden()
        xi = smooth(SPEC, seed=1)
        eta = TorusMap(SPEC, grid=lam * xi.grid - mu * composed(xi, rot))
        got = solve_nonsmall(eta, lam, mu, rot)
        assert np.max(np.abs(got.grid - xi.grid)) < 1e-12

    def test_residual_near_degenerate(self):
        rot = rot_golden()
        eta = smooth(SPEC, seed=2)
        for delta in (1e-2, 1e-4, 1e-6):
            xi = solve_nonsmall(eta, 1.0 + delta, 1.0, rot)
            resid = (1 + delta) * xi.grid - composed(xi, rot) - eta.grid
            assert np.max(np.abs(resid)) <= 1e-12 * (1 + eta.sup()) / delta


class TestSmall:
    def test_free_average(self):
        xi = solve_small(TorusMap.zeros(SPEC, 1), rot_golden(), free_average=5.0)
        assert np.max(np.abs(xi.grid - 5.0)) < 1e-15

    def test_round_trip(self):
        rot = rot_golden()
        xi0 = smooth(SPEC, seed=3, zero_mean=True)
        eta = TorusMap(SPEC, grid=xi0.grid - composed(xi0, rot))
        got = solve_small(eta, rot)
        assert np.max(np.abs(got.grid - xi0.grid)) < 1e-12

    def test_cosine_coefficient(self):
        s = GridSpec(1, 0, 16, 1)
        rot = RotationData([GOLD], [], 1.0)
        eta = TorusMap.from_function(s, lambda th, ph: np.cos(2 * np.pi * th))
        xi = solve_small(eta, rot)
        assert abs(xi.coef[0, 1, 0] - 0.5 / (1 - np.exp(2j * np.pi * GOLD))) < 1e-15
        resid = xi.grid - composed(xi, rot) - eta.grid
        assert np.max(np.abs(resid)) < 1e-14

    def test_nonzero_average_rejected(self):
        with pytest.raises(AverageError):
            solve_small(TorusMap.constant(SPEC, [1e-6]), rot_golden())
        solve_small(TorusMap.constant(SPEC, [1e-6]), rot_golden(), avg_tol=1e-5)

    def test_resonance_rejected(self):
        rot = RotationData([0.25], [], 1.0)
        eta = TorusMap.from_function(GridSpec(1, 0, 16, 1), lambda th, ph: np.cos(2 * np.pi * 4 * th))
        with pytest.raises(ResonanceError, match="k=4"):
            solve_small(eta, rot)


class TestCyclic:
    @pytest.mark.parametrize("m", [1, 2, 4])
    @pytest.mark.parametrize("lam,mu", [(3.0, 1.0), (1.0, 3.0), (0.5, 2.0)])
    def test_nonsmall_round_trip(self, m, lam, mu):
        rot_m = rot_golden().scaled(1.0 / m)
        xs = [smooth(SPEC, c=1, seed=10 + i) for i in range(m)]
        etas = [TorusMap(SPEC, grid=lam * xs[i].grid - mu * composed(xs[(i + 1) % m], rot_m)) for i in range(m)]
        got = solve_cyclic_nonsmall(etas, lam, mu, rot_m)
        for g, x in zip(got, xs):
            assert np.max(np.abs(g.grid - x.grid)) < 1e-11

    @pytest.mark.parametrize("m", [1, 3, 4])
    def test_small_round_trip(self, m):
        rot_m = rot_golden().scaled(1.0 / m)
        xs = [smooth(SPEC, c=1, seed=20 + i) for i in range(m)]
        xs[0] = xs[0] - average(xs[0])
        etas = [TorusMap(SPEC, grid=xs[i].grid - composed(xs[(i + 1) % m], rot_m)) for i in range(m)]
        got = solve_cyclic_small(etas, rot_m)
        for g, x in zip(got, xs):
            assert np.max(np.abs(g.grid - x.grid)) < 1e-11


class TestProperties:
    @settings(max_examples=30, deadline=None)
    @given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 10_000), st.floats(1.1, 50))
    def test_linearity(self, a, b, seed, lam):
        rot = rot_golden()
        e1, e2 = smooth(SPEC, seed=seed), smooth(SPEC, seed=seed + 1)
        lhs = solve_nonsmall(a * e1 + b * e2, lam, 1.0, rot)
        rhs = a * solve_nonsmall(e1, lam, 1.0, rot) + b * solve_nonsmall(e2, lam, 1.0, rot)
        assert np.max(np.abs(lhs.grid - rhs.grid)) < 1e-13 * (1 + abs(a) + abs(b)) * 10
        e1, e2 = e1 - average(e1), e2 - average(e2)
        lhs = solve_small(a * e1 + b * e2, rot, free_average=0.0)
        rhs = a * solve_small(e1, rot) + b * solve_small(e2, rot)
        assert np.max(np.abs(lhs.grid - rhs.grid)) < 1e-12 * (1 + abs(a) + abs(b))

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 10_000))
    def test_shift_equivariance(self, sa, sb, seed):
        rot = rot_golden()
        eta = smooth(SPEC, seed=seed)
        lhs = solve_nonsmall(shift(eta, sa, sb), 2.5, 1.0, rot)
        rhs = shift(solve_nonsmall(eta, 2.5, 1.0, rot), sa, sb)
        assert np.max(np.abs(lhs.grid - rhs.grid)) < 1e-12
        eta = eta - average(eta)
        lhs = solve_small(shift(eta, sa, sb), rot)
        rhs = shift(solve_small(eta, rot), sa, sb)
        assert np.max(np.abs(lhs.grid - rhs.grid)) < 1e-12


class TestDiophantine:
    def test_resonant_half(self):
        assert diophantine_margin(RotationData([0.5], [], 1.0), 2) == 0.0

    def test_constructed_resonance(self):
        assert diophantine_margin(RotationData([0.3], [0.6], 1.0), 3) < 1e-15

    def test_golden_brute_force(self):
        rot = RotationData([GOLD], [], 1.0)
        best = np.inf
        for k in range(-50, 51):
            if k == 0:
                continue
            for n in range(-60, 61):
                best = min(best, abs(k * GOLD - n) * abs(k))
        assert diophantine_margin(rot, 50, tau=1.0) == pytest.approx(best, rel=1e-12)
        assert best > 0.3

    def test_two_frequencies_brute_force(self):
        rot = RotationData([GOLD], [np.sqrt(2) - 1], 1.0)
        best = np.inf
        for k, j in itertools.product(range(-8, 9), repeat=2):
            o = abs(k) + abs(j)
            if 0 < o <= 8:
                x = k * GOLD + j * (np.sqrt(2) - 1)
                best = min(best, min(abs(x - n) for n in range(-20, 21)) * o**2)
        assert diophantine_margin(rot, 8) == pytest.approx(best, rel=1e-12)

    def test_bad_order(self):
        with pytest.raises(ValueError):
            diophantine_margin(rot_golden(), 0)
