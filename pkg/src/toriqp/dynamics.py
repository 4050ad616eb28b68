"""Flows of quasi-periodic Hamiltonian systems and their variational equations.

The phase space is R^{2n} with coordinates z = (x, p) and the external phase
phi in T^ell advances as phi0 + alpha_hat * t.  All variational quantities are
integrated in one augmented state so they share a single step-size sequence.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate._ivp import dop853_coefficients as _dop

RTOL = 1e-13
ATOL = 1e-13
MAX_STEPS = 200_000
MAX_TIME = 1e4


class IntegrationError(RuntimeError):
    """Raised when a trajectory cannot be integrated to the requested time."""


# --- standard symplectic structure ---------------------------------------------


def omega0(n: int) -> np.ndarray:
    I = np.eye(n)
    Z = np.zeros((n, n))
    return np.block([[Z, -I], [I, Z]])


def j0(n: int) -> np.ndarray:
    return omega0(n)


class HamiltonianModel:
    """Base class for models; subclasses provide batched evaluators.

    Shapes: ``z`` is (B, 2n), ``phi`` is (B, ell) and ``eps`` a float.
    The symplectic data defaults to the standard constant forms.
    """

    name = "model"
    n: int = 1
    alpha_hat: np.ndarray = np.zeros(0)

    @property
    def dim(self) -> int:
        return 2 * self.n

    @property
    def ell(self) -> int:
        return len(self.alpha_hat)

    def params(self) -> dict:
        return {}

    def is_autonomous(self, eps: float) -> bool:
        return self.ell == 0

    # evaluators to override
    def H(self, z, phi, eps):
        raise NotImplementedError

    def dH_dz(self, z, phi, eps):
        raise NotImplementedError

    def dH_dphi(self, z, phi, eps):
        raise NotImplementedError

    def dH_deps(self, z, phi, eps):
        raise NotImplementedError

    def X(self, z, phi, eps):
        return self.dH_dz(z, phi, eps) @ np.linalg.inv(omega0(self.n)).T

    def DX(self, z, phi, eps):
        raise NotImplementedError

    def DphiX(self, z, phi, eps):
        raise NotImplementedError

    def depsX(self, z, phi, eps):
        raise NotImplementedError

    def D2X(self, z, phi, eps, u, w):
        raise NotImplementedError

    def depsDX(self, z, phi, eps):
        raise NotImplementedError

    def evaluate(self, z, phi, eps, need):
        """Evaluate several quantities at once; models may share work here."""
        out = {"X": self.X(z, phi, eps)}
        if "DX" in need:
            out["DX"] = self.DX(z, phi, eps)
        if "DphiX" in need:
            out["DphiX"] = self.DphiX(z, phi, eps)
        if "depsX" in need:
            out["depsX"] = self.depsX(z, phi, eps)
        if "depsDX" in need:
            out["depsDX"] = self.depsDX(z, phi, eps)
        if "H" in need:
            out["H"] = self.H(z, phi, eps)
            out["dH_deps"] = self.dH_deps(z, phi, eps)
            out["dH_dphi"] = self.dH_dphi(z, phi, eps)
        return out

    # symplectic structure (standard)
    def Omega(self, z):
        return np.broadcast_to(omega0(self.n), (len(z), self.dim, self.dim))

    def a(self, z):
        n = self.n
        return 0.5 * np.concatenate([z[:, n:], -z[:, :n]], axis=1)

    def J(self, z):
        return np.broadcast_to(j0(self.n), (len(z), self.dim, self.dim))

    def G(self, z):
        return np.broadcast_to(np.eye(self.dim), (len(z), self.dim, self.dim))


# --- augmented state layout ----------------------------------------------------


class Layout:
    """Offsets of the pieces of the augmented state vector."""

    def __init__(self, n, ell, M=False, phi=False, eps=False, second=False, quad=False):
        d = 2 * n
        self.n, self.ell, self.d = n, ell, d
        self.flags = dict(M=M, phi=phi and ell > 0, eps=eps, second=second, quad=quad)
        off = d
        self.sl = {"z": slice(0, d)}
        for key, size in (("M", d * d), ("phi", d * ell), ("eps", d), ("u", d), ("w", d), ("V", d), ("quad", 2 + ell)):
            flag = {"u": "second", "w": "second", "V": "second"}.get(key, key)
            if self.flags[flag]:
                self.sl[key] = slice(off, off + size)
                off += size
        self.size = off

    @property
    def needs_jacobian(self):
        f = self.flags
        return f["M"] or f["phi"] or f["eps"] or f["second"]

    def initial(self, z0, u0=None, wK=None):
        B = len(z0)
        Y = np.zeros((B, self.size))
        Y[:, self.sl["z"]] = z0
        if "M" in self.sl:
            Y[:, self.sl["M"]] = np.eye(self.d).ravel()
        if "u" in self.sl:
            Y[:, self.sl["u"]] = u0
            Y[:, self.sl["w"]] = wK
        return Y


def augmented_rhs(model: HamiltonianModel, lay: Layout, eps: float):
    """Build f(t, Y, phi0) for the generic (numpy) integration path."""
    d, ell = lay.d, lay.ell
    need = set()
    if lay.needs_jacobian:
        need.add("DX")
    if lay.flags["phi"]:
        need.add("DphiX")
    if lay.flags["eps"] or lay.flags["second"]:
        need.add("depsX")
    if lay.flags["second"]:
        need.add("depsDX")
    if lay.flags["quad"]:
        need.add("H")
    ah = np.asarray(model.alpha_hat, dtype=float)

    def f(t, Y, phi0):
        B = len(Y)
        z = Y[:, lay.sl["z"]]
        phi = phi0 + t[:, None] * ah[None, :] if ell else np.zeros((B, 0))
        ev = model.evaluate(z, phi, eps, need)
        dY = np.empty_like(Y)
        dY[:, lay.sl["z"]] = ev["X"]
        A = ev.get("DX")
        if "M" in lay.sl:
            M = Y[:, lay.sl["M"]].reshape(B, d, d)
            dY[:, lay.sl["M"]] = np.matmul(A, M).reshape(B, -1)
        if "phi" in lay.sl:
            P = Y[:, lay.sl["phi"]].reshape(B, d, ell)
            dY[:, lay.sl["phi"]] = (np.matmul(A, P) + ev["DphiX"]).reshape(B, -1)
        if "eps" in lay.sl:
            Pe = Y[:, lay.sl["eps"]]
            dY[:, lay.sl["eps"]] = np.einsum("bij,bj->bi", A, Pe) + ev["depsX"]
        if "u" in lay.sl:
            u = Y[:, lay.sl["u"]]
            w = Y[:, lay.sl["w"]]
            V = Y[:, lay.sl["V"]]
            dY[:, lay.sl["u"]] = np.einsum("bij,bj->bi", A, u)
            dY[:, lay.sl["w"]] = np.einsum("bij,bj->bi", A, w) + ev["depsX"]
            dY[:, lay.sl["V"]] = (
                np.einsum("bij,bj->bi", A, V)
                + model.D2X(z, phi, eps, u, w)
                + np.einsum("bij,bj->bi", ev["depsDX"], u)
            )
        if "quad" in lay.sl:
            q = np.empty((B, 2 + ell))
            q[:, 0] = np.einsum("bi,bi->b", model.a(z), ev["X"]) - ev["H"]
            q[:, 1] = ev["dH_deps"]
            q[:, 2:] = ev["dH_dphi"]
            dY[:, lay.sl["quad"]] = q
        return dY

    return f


# --- batched DOP853 ----------------------------------------------------------------

_NS = _dop.N_STAGES
_A = np.ascontiguousarray(_dop.A[:_NS, :_NS])
_B = np.ascontiguousarray(_dop.B)
_C = np.ascontiguousarray(_dop.C[:_NS])
_E3 = np.ascontiguousarray(_dop.E3)
_E5 = np.ascontiguousarray(_dop.E5)
SAFETY, MIN_FACTOR, MAX_FACTOR = 0.9, 0.2, 10.0
ERR_EXP = -1.0 / 8.0


def _rms(x):
    return np.sqrt(np.mean(x * x, axis=1))


def _initial_step(f, t0, y0, f0, direction, rtol, atol, aux):
    scale = atol + np.abs(y0) * rtol
    d0 = _rms(y0 / scale)
    d1 = _rms(f0 / scale)
    h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.maximum(d1, 1e-300))
    y1 = y0 + (h0 * direction)[:, None] * f0
    f1 = f(t0 + h0 * direction, y1, aux)
    d2 = _rms((f1 - f0) / scale) / h0
    dm = np.maximum(d1, d2)
    h1 = np.where(dm <= 1e-15, np.maximum(1e-6, h0 * 1e-3), (0.01 / np.maximum(dm, 1e-300)) ** (1.0 / 8.0))
    return np.minimum(100 * h0, h1)


@dataclass
class BatchStats:
    steps: np.ndarray
    rejected: np.ndarray
    rtol: float
    atol: float


def dop853_batch(f, y0, t_end, aux, rtol=RTOL, atol=ATOL, max_steps=MAX_STEPS, event=None):
    """Integrate B independent trajectories from t=0 to t_end (scalar or (B,)).

    ``f(t, Y, aux)`` evaluates the right-hand side for the active rows, where
    ``aux`` is sliced alongside ``Y``.  Each trajectory has its own adaptive
    step.  With ``event=i`` a trajectory stops at the end of the first step in
    which component ``i`` crosses zero upwards; the start of that step is
    returned in ``crossing`` for later refinement.
    """
    y = np.array(y0, dtype=float)
    B, D = y.shape
    t_end = np.broadcast_to(np.asarray(t_end, dtype=float), (B,)).copy()
    t = np.zeros(B)
    steps = np.zeros(B, dtype=int)
    rej = np.zeros(B, dtype=int)
    direction = np.where(t_end >= 0, 1.0, -1.0)
    done = t_end == 0
    crossed = np.zeros(B, dtype=bool)
    cross_t = np.full(B, np.nan)
    cross_y = np.full((B, D), np.nan)
    idx = np.where(~done)[0]
    if idx.size == 0:
        return y, BatchStats(steps, rej, rtol, atol), (crossed, cross_t, cross_y)
    fcur = np.zeros((B, D))
    fcur[idx] = f(t[idx], y[idx], aux[idx])
    h = np.zeros(B)
    h[idx] = _initial_step(f, t[idx], y[idx], fcur[idx], direction[idx], rtol, atol, aux[idx])
    K = np.empty((_NS + 1, B, D))
    while idx.size:
        yi, ti, fi, ai = y[idx], t[idx], fcur[idx], aux[idx]
        remaining = np.abs(t_end[idx] - ti)
        hi = np.minimum(h[idx], remaining)
        hs = hi * direction[idx]
        Ki = K[:, : idx.size]
        Ki[0] = fi
        for s in range(1, _NS):
            dy = np.tensordot(_A[s, :s], Ki[:s], axes=(0, 0)) * hs[:, None]
            Ki[s] = f(ti + _C[s] * hs, yi + dy, ai)
        ynew = yi + np.tensordot(_B, Ki[:_NS], axes=(0, 0)) * hs[:, None]
        if not np.all(np.isfinite(ynew)):
            bad = idx[~np.all(np.isfinite(ynew), axis=1)][0]
            raise IntegrationError(f"non-finite state in trajectory {bad} at t={t[bad]:.6g}")
        fnew = f(ti + hs, ynew, ai)
        Ki[_NS] = fnew
        scale = atol + np.maximum(np.abs(yi), np.abs(ynew)) * rtol
        e5 = np.tensordot(_E5, Ki, axes=(0, 0)) / scale
        e3 = np.tensordot(_E3, Ki, axes=(0, 0)) / scale
        n5 = np.sum(e5 * e5, axis=1)
        n3 = np.sum(e3 * e3, axis=1)
        denom = n5 + 0.01 * n3
        err = np.where(denom > 0, hi * n5 / np.sqrt(np.where(denom > 0, denom, 1.0) * D), 0.0)
        ok = err < 1.0
        fac = np.where(
            err == 0,
            MAX_FACTOR,
            np.clip(SAFETY * np.where(err > 0, err, 1.0) ** ERR_EXP, MIN_FACTOR, MAX_FACTOR),
        )
        fac = np.where(ok, fac, np.minimum(fac, 1.0))
        acc = idx[ok]
        rej[idx[~ok]] += 1
        if event is not None and acc.size:
            up = (yi[ok, event] <= 0) & (ynew[ok, event] > 0) & (steps[acc] > 0)
            hit = acc[up]
            crossed[hit] = True
            cross_t[hit] = ti[ok][up]
            cross_y[hit] = yi[ok][up]
        y[acc] = ynew[ok]
        t[acc] = ti[ok] + hs[ok]
        fcur[acc] = fnew[ok]
        steps[acc] += 1
        h[idx] = hi * fac
        if np.any(h[idx] < 1e-14 * np.maximum(1.0, np.abs(t_end[idx]))):
            bad = idx[h[idx] < 1e-14 * np.maximum(1.0, np.abs(t_end[idx]))][0]
            raise IntegrationError(f"step size underflow in trajectory {bad} at t={t[bad]:.6g}")
        fin = np.zeros(B, dtype=bool)
        fin[acc] = np.abs(t_end[acc] - t[acc]) <= 1e-15 * np.maximum(1.0, np.abs(t_end[acc]))
        fin |= crossed
        t[fin & ~crossed] = t_end[fin & ~crossed]
        done |= fin
        if np.any(steps[idx] + rej[idx] > max_steps):
            bad = idx[steps[idx] + rej[idx] > max_steps][0]
            raise IntegrationError(f"step budget exceeded in trajectory {bad} at t={t[bad]:.6g}")
        idx = idx[~done[idx]]
    return y, BatchStats(steps, rej, rtol, atol), (crossed, cross_t, cross_y)


# --- backend selection ---------------------------------------------------------------

try:  # compiled kernel for the bundled ERTBP model
    from . import _kernels  # type: ignore
except ImportError:  # pragma: no cover - exercised when the extension is not built
    _kernels = None


def compiled_available() -> bool:
    return _kernels is not None


def backend_for(model, lay: Layout, backend: str | None = None) -> str:
    choice = backend or os.environ.get("TORIQP_BACKEND", "auto")
    if choice == "python":
        return "python"
    fast = _kernels is not None and getattr(model, "kernel_id", None) == "ertbp" and not lay.flags["quad"]
    if choice == "compiled" and not fast:
        raise RuntimeError("compiled backend unavailable for this model/request")
    return "compiled" if fast else "python"


_THREADS = [0]


def set_threads(n: int):
    _THREADS[0] = max(0, int(n))


# --- public flow API -------------------------------------------------------------------


@dataclass
class BatchFlow:
    z: np.ndarray
    M: np.ndarray | None = None
    P_phi: np.ndarray | None = None
    P_eps: np.ndarray | None = None
    V: np.ndarray | None = None
    u: np.ndarray | None = None
    w: np.ndarray | None = None
    quad: np.ndarray | None = None
    stats: BatchStats | None = None
    crossing: tuple | None = None


def flow_batch(
    model: HamiltonianModel,
    z0,
    phi0,
    t,
    eps: float,
    M=False,
    phi=False,
    deps=False,
    u0=None,
    wK=None,
    quad=False,
    rtol=RTOL,
    atol=ATOL,
    event=None,
    backend=None,
) -> BatchFlow:
    """Flow many initial conditions; returns arrays with a leading batch axis."""
    z0 = np.atleast_2d(np.asarray(z0, dtype=float))
    B = len(z0)
    ell = model.ell
    phi0 = np.broadcast_to(np.asarray(phi0, dtype=float).reshape(-1, ell) if ell else np.zeros((1, 0)), (B, ell))
    phi0 = np.ascontiguousarray(phi0)
    t_arr = np.broadcast_to(np.asarray(t, dtype=float), (B,))
    if np.any(~np.isfinite(t_arr)) or np.any(np.abs(t_arr) > MAX_TIME):
        raise ValueError("integration time must be finite and below the configured maximum")
    second = u0 is not None
    lay = Layout(model.n, ell, M=M, phi=phi, eps=deps, second=second, quad=quad)
    if second:
        u0 = np.broadcast_to(np.asarray(u0, dtype=float), (B, lay.d))
        wK = np.zeros((B, lay.d)) if wK is None else np.broadcast_to(np.asarray(wK, dtype=float), (B, lay.d))
    Y0 = lay.initial(z0, u0, wK)
    which = backend_for(model, lay, backend)
    if which == "compiled":
        Y, stats, crossing = _kernels_integrate(model, lay, Y0, phi0, t_arr, eps, rtol, atol, event)
    else:
        f = augmented_rhs(model, lay, eps)
        Y, stats, crossing = dop853_batch(f, Y0, t_arr, phi0, rtol, atol, event=event)
    d = lay.d
    out = BatchFlow(z=Y[:, lay.sl["z"]].copy(), stats=stats, crossing=crossing)
    if "M" in lay.sl:
        out.M = Y[:, lay.sl["M"]].reshape(B, d, d)
    if "phi" in lay.sl:
        out.P_phi = Y[:, lay.sl["phi"]].reshape(B, d, ell)
    elif phi:
        out.P_phi = np.zeros((B, d, 0))
    if "eps" in lay.sl:
        out.P_eps = Y[:, lay.sl["eps"]].copy()
    if second:
        out.u = Y[:, lay.sl["u"]].copy()
        out.w = Y[:, lay.sl["w"]].copy()
        out.V = Y[:, lay.sl["V"]].copy()
    if quad:
        out.quad = Y[:, lay.sl["quad"]].copy()
    return out


def _kernels_integrate(model, lay, Y0, phi0, t_arr, eps, rtol, atol, event):
    B = len(Y0)
    flags = np.array([lay.flags["M"], lay.flags["phi"], lay.flags["eps"], lay.flags["second"]], dtype=np.int64)
    Y = np.ascontiguousarray(Y0.copy())
    steps = np.zeros(B, dtype=np.int64)
    rej = np.zeros(B, dtype=np.int64)
    status = np.zeros(B, dtype=np.int64)
    cross_t = np.full(B, np.nan)
    cross_y = np.full_like(Y, np.nan)
    ev = -1 if event is None else int(event)
    _kernels.integrate_ertbp(
        Y,
        np.ascontiguousarray(phi0[:, 0]),
        np.ascontiguousarray(t_arr, dtype=float),
        float(model.mu),
        float(eps),
        float(model.alpha_hat[0]),
        flags,
        float(rtol),
        float(atol),
        int(MAX_STEPS),
        ev,
        steps,
        rej,
        status,
        cross_t,
        cross_y,
        _A,
        _B,
        _C,
        _E3,
        _E5,
        int(_THREADS[0]),
    )
    if np.any(status < 0):
        i = int(np.where(status < 0)[0][0])
        reason = {-1: "non-finite state", -2: "step size underflow", -3: "step budget exceeded"}.get(int(status[i]), "failure")
        raise IntegrationError(f"{reason} in trajectory {i}")
    crossed = status == 2
    return Y, BatchStats(steps.astype(int), rej.astype(int), rtol, atol), (crossed, cross_t, cross_y)


@dataclass
class FlowRequest:
    z0: np.ndarray
    phi0: np.ndarray
    t: float
    epsilon: float
    want: set = field(default_factory=lambda: {"state"})
    u0: np.ndarray | None = None
    w_eps: np.ndarray | None = None

    def __post_init__(self):
        if not np.isfinite(self.t):
            raise ValueError("integration time must be finite")
        if "second_directional" in self.want:
            if "D_z" not in self.want:
                raise ValueError("second_directional requires D_z")
            if self.u0 is None:
                raise ValueError("second_directional requires an initial direction u0")


@dataclass
class FlowResult:
    z_t: np.ndarray
    M: np.ndarray | None
    P_phi: np.ndarray | None
    P_eps: np.ndarray | None
    V: np.ndarray | None
    steps: int
    rejected: int
    tol: float


def flow(req: FlowRequest, model: HamiltonianModel, backend=None) -> FlowResult:
    w = req.want
    second = "second_directional" in w
    r = flow_batch(
        model,
        np.asarray(req.z0, dtype=float)[None],
        np.atleast_1d(np.asarray(req.phi0, dtype=float))[None] if model.ell else None,
        req.t,
        req.epsilon,
        M="D_z" in w,
        phi="D_phi" in w,
        deps="d_eps" in w,
        u0=req.u0 if second else None,
        wK=req.w_eps if second else None,
        backend=backend,
    )
    return FlowResult(
        z_t=r.z[0],
        M=None if r.M is None else r.M[0].copy(),
        P_phi=None if r.P_phi is None else r.P_phi[0].copy(),
        P_eps=None if r.P_eps is None else r.P_eps[0].copy(),
        V=None if r.V is None else r.V[0].copy(),
        steps=int(r.stats.steps[0]),
        rejected=int(r.stats.rejected[0]),
        tol=r.stats.rtol,
    )


def primitive_and_moments(z0, phi0, t, epsilon, model: HamiltonianModel):
    """Return (p_t, integral of dH/deps, integral of dH/dphi) along the orbit of z0."""
    z0 = np.atleast_2d(np.asarray(z0, dtype=float))
    ell = model.ell
    ph = np.zeros((len(z0), ell)) if phi0 is None else np.asarray(phi0, dtype=float).reshape(-1, ell)
    r = flow_batch(model, z0, ph, t, epsilon, quad=True, backend="python")
    q = r.quad
    if len(z0) == 1:
        return float(q[0, 0]), float(q[0, 1]), q[0, 2:].copy()
    return q[:, 0], q[:, 1], q[:, 2:]
