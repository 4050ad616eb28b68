import numpy as np
import pytest
from conftest import central_jacobian, near_l1
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from toriqp.dynamics import (
    FlowRequest,
    IntegrationError,
    compiled_available,
    flow,
    flow_batch,
    omega0,
    primitive_and_moments,
)
from toriqp.ertbp import ErtbpModel
from toriqp.oscillators import OscillatorSaddle

E = 0.03
PHI0 = 0.21


def ivp_state(model, z0, phi0, t, eps):
    def rhs(s, z):
        return model.X(z[None], np.array([[phi0 + model.alpha_hat[0] * s]]), eps)[0]

    return solve_ivp(rhs, (0, t), z0, method="DOP853", rtol=1e-13, atol=1e-14).y[:, -1]


@pytest.fixture(params=["ertbp", "oscillators"])
def model_state(request):
    if request.param == "ertbp":
        m = ErtbpModel()
        return m, near_l1(m, seed=1, size=1e-3), 1.3
    m = OscillatorSaddle()
    return m, np.array([0.4, 0.5, 0.01, -0.2, 0.1, 0.02]), 2.0


def test_zero_time_is_identity(model_state):
    m, z0, _ = model_state
    rng = np.random.default_rng(0)
    r = flow(FlowRequest(z0, [PHI0], 0.0, E, {"state", "D_z", "D_phi", "d_eps", "second_directional"}, u0=rng.standard_normal(6), w_eps=rng.standard_normal(6)), m)
    assert np.array_equal(r.z_t, z0)
    assert np.array_equal(r.M, np.eye(6))
    assert not r.P_phi.any() and not r.P_eps.any() and not r.V.any()


def test_state_against_independent_integrator(model_state):
    m, z0, t = model_state
    got = flow_batch(m, z0[None], [[PHI0]], t, E, backend="python").z[0]
    ref = ivp_state(m, z0, PHI0, t, E)
    assert np.max(np.abs(got - ref)) < 1e-10


def test_variationals_against_finite_differences(model_state):
    m, z0, t = model_state
    r = flow_batch(m, z0[None], [[PHI0]], t, E, M=True, phi=True, deps=True)
    fz = lambda z: flow_batch(m, z[None], [[PHI0]], t, E).z[0]
    Mfd = central_jacobian(fz, z0, 1e-6)
    assert np.max(np.abs(r.M[0] - Mfd)) < 1e-6 * np.max(np.abs(Mfd))
    fe = lambda e: flow_batch(m, z0[None], [[PHI0]], t, e[0]).z[0]
    Pe = central_jacobian(fe, np.array([E]), 1e-4)[:, 0]
    assert np.max(np.abs(r.P_eps[0] - Pe)) < 1e-6 * np.max(np.abs(Pe))
    fp = lambda p: flow_batch(m, z0[None], [p], t, E).z[0]
    Pp = central_jacobian(fp, np.array([PHI0]), 1e-4)
    assert np.max(np.abs(r.P_phi[0] - Pp)) < 1e-6 * np.max(np.abs(Pp))


def test_second_variation_against_finite_differences(model_state):
    m, z0, t = model_state
    rng = np.random.default_rng(2)
    u0, wK = rng.standard_normal(6), rng.standard_normal(6) * 1e-2
    r = flow_batch(m, z0[None], [[PHI0]], t, E, M=True, u0=u0, wK=wK)

    def Mu(s):
        return flow_batch(m, (z0 + s[0] * wK)[None], [[PHI0]], t, E + s[0], M=True).M[0] @ u0

    fd = central_jacobian(Mu, np.array([0.0]), 1e-5)[:, 0]
    assert np.max(np.abs(r.V[0] - fd)) < 1e-6 * np.max(np.abs(fd))
    assert np.allclose(r.u[0], r.M[0] @ u0, rtol=1e-12, atol=1e-14)


def test_symplectic_monodromy(model_state):
    m, z0, t = model_state
    M = flow_batch(m, z0[None], [[PHI0]], t, E, M=True).M[0]
    Om = omega0(3)
    assert np.max(np.abs(M.T @ Om @ M - Om)) < 1e-9 * max(1.0, np.max(np.abs(M)) ** 2)


def test_group_property(model_state):
    m, z0, t = model_state
    direct = flow_batch(m, z0[None], [[PHI0]], t, E).z[0]
    half = flow_batch(m, z0[None], [[PHI0]], 0.4 * t, E).z[0]
    rest = flow_batch(m, half[None], [[PHI0 + m.alpha_hat[0] * 0.4 * t]], 0.6 * t, E).z[0]
    assert np.max(np.abs(direct - rest)) < 1e-11


def test_transport_of_the_vector_field(model_state):
    m, z0, t = model_state
    r = flow_batch(m, z0[None], [[PHI0]], t, E, M=True, phi=True)
    lhs = r.M[0] @ m.X(z0[None], np.array([[PHI0]]), E)[0] + r.P_phi[0] @ m.alpha_hat
    rhs = m.X(r.z, np.array([[PHI0 + m.alpha_hat[0] * t]]), E)[0]
    assert np.max(np.abs(lhs - rhs)) < 1e-9 * max(1.0, np.max(np.abs(rhs)))


def test_backward_time(model_state):
    m, z0, t = model_state
    fwd = flow_batch(m, z0[None], [[PHI0]], t, E).z[0]
    back = flow_batch(m, fwd[None], [[PHI0 + m.alpha_hat[0] * t]], -t, E).z[0]
    assert np.max(np.abs(back - z0)) < 1e-10


def test_batches_are_independent():
    m = ErtbpModel()
    Z = np.stack([near_l1(m, seed=s) for s in range(4)])
    ph = np.array([[0.0], [0.1], [0.2], [0.3]])
    t = np.array([0.5, 1.0, 1.5, 2.0])
    batch = flow_batch(m, Z, ph, t, E, M=True)
    for i in range(4):
        one = flow_batch(m, Z[i : i + 1], ph[i : i + 1], t[i], E, M=True)
        assert np.max(np.abs(one.z[0] - batch.z[i])) < 1e-13
        assert np.max(np.abs(one.M[0] - batch.M[i])) < 1e-10 * np.max(np.abs(one.M[0]))


@pytest.mark.skipif(not compiled_available(), reason="compiled kernels not built")
@pytest.mark.parametrize("kw", [{}, {"M": True}, {"M": True, "deps": True, "phi": True}, {"M": True, "u0": np.ones(6), "wK": np.full(6, 0.01)}])
def test_compiled_matches_python(kw):
    m = ErtbpModel()
    Z = np.stack([near_l1(m, seed=s) for s in range(3)])
    ph = np.array([[0.0], [0.4], [0.8]])
    a = flow_batch(m, Z, ph, 2.0, E, backend="python", **kw)
    b = flow_batch(m, Z, ph, 2.0, E, backend="compiled", **kw)
    for key in ("z", "M", "P_phi", "P_eps", "V"):
        x, y = getattr(a, key), getattr(b, key)
        if x is None:
            assert y is None
            continue
        assert np.max(np.abs(x - y)) < 1e-10 * max(1.0, np.max(np.abs(x)))
    assert np.array_equal(a.stats.steps, b.stats.steps)


def test_python_backend_forced(monkeypatch):
    m = ErtbpModel()
    monkeypatch.setenv("TORIQP_BACKEND", "python")
    z = near_l1(m)
    r = flow_batch(m, z[None], [[0.0]], 0.5, 0.0)
    assert r.z.shape == (1, 6)


def test_request_validation():
    with pytest.raises(ValueError):
        FlowRequest(np.zeros(6), [0.0], np.inf, 0.0)
    with pytest.raises(ValueError, match="D_z"):
        FlowRequest(np.zeros(6), [0.0], 1.0, 0.0, {"second_directional"}, u0=np.zeros(6))
    m = ErtbpModel()
    with pytest.raises(ValueError):
        flow_batch(m, near_l1(m)[None], [[0.0]], 1e9, 0.0)


def test_non_finite_state_is_reported():
    m = OscillatorSaddle(nu=400.0)
    with pytest.raises(IntegrationError):
        flow_batch(m, np.array([[0.1, 0.1, 1.0, 0.0, 0.0, 1.0]]), [[0.0]], 5.0, 0.0)


class TestQuadratures:
    def test_zero_time(self):
        m = ErtbpModel()
        p, me, mp = primitive_and_moments(near_l1(m), [0.1], 0.0, E, m)
        assert p == 0.0 and me == 0.0 and not mp.any()

    @pytest.mark.parametrize("which", ["ertbp", "oscillators"])
    def test_primitive_identity(self, which):
        m = ErtbpModel() if which == "ertbp" else OscillatorSaddle()
        z0 = near_l1(m, seed=3) if which == "ertbp" else np.array([0.4, 0.5, 0.01, -0.2, 0.1, 0.02])
        t = 1.0
        r = flow_batch(m, z0[None], [[PHI0]], t, E, M=True)
        rhs = m.a(r.z)[0] @ r.M[0] - m.a(z0[None])[0]
        lhs = central_jacobian(lambda z: primitive_and_moments(z, [PHI0], t, E, m)[0], z0, 1e-5)
        assert np.max(np.abs(lhs - rhs)) < 1e-7 * max(1.0, np.max(np.abs(rhs)))

    def test_moment_map_generator(self):
        m = ErtbpModel()
        z0 = near_l1(m, seed=4)
        t = 1.0
        r = flow_batch(m, z0[None], [[PHI0]], t, E, M=True, deps=True)
        Om = omega0(3)
        lhs = r.M[0].T @ Om @ r.P_eps[0]
        grad = central_jacobian(lambda z: primitive_and_moments(z, [PHI0], t, E, m)[1], z0, 1e-5)
        assert np.max(np.abs(lhs - grad)) < 1e-7 * max(1.0, np.max(np.abs(grad)))

    def test_quadrature_against_independent_integral(self):
        m = OscillatorSaddle()
        z0 = np.array([0.4, 0.5, 0.01, -0.2, 0.1, 0.02])
        t = 1.5
        _, me, mp = primitive_and_moments(z0, [PHI0], t, E, m)

        def rhs(s, y):
            z = y[:6]
            ph = np.array([[PHI0 + m.alpha_hat[0] * s]])
            return np.r_[m.X(z[None], ph, E)[0], m.dH_deps(z[None], ph, E)[0], m.dH_dphi(z[None], ph, E)[0]]

        y = solve_ivp(rhs, (0, t), np.r_[z0, 0.0, 0.0], method="DOP853", rtol=1e-13, atol=1e-14).y[:, -1]
        assert me == pytest.approx(y[6], abs=1e-11)
        assert mp[0] == pytest.approx(y[7], abs=1e-11)

    def test_autonomous_phase_moment_is_zero(self):
        m = ErtbpModel()
        z0 = near_l1(m, seed=5)
        vals = [primitive_and_moments(z0, [ph], 1.0, 0.0, m)[2][0] for ph in (0.0, 0.3, 0.7)]
        assert np.allclose(vals, 0.0, atol=0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 2.0), st.floats(0.0, 0.05), st.floats(0, 1))
def test_symplecticity_property(seed, t, e, phi0):
    m = ErtbpModel()
    z0 = near_l1(m, seed=seed, size=5e-4)
    M = flow_batch(m, z0[None], [[phi0]], t, e, M=True).M[0]
    Om = omega0(3)
    assert np.max(np.abs(M.T @ Om @ M - Om)) < 1e-9 * max(1.0, np.max(np.abs(M)) ** 2)
