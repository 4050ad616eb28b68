"""Seeds at e = 0: vertical Lyapunov orbits, Floquet data, noble numbers, linear tori."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .cohomology import RotationData
from .dynamics import flow_batch
from .ertbp import ErtbpModel, lagrange_points
from .fourier import GridSpec, TorusMap
from .solution import TorusSolution

GOLDEN = (1 + 5**0.5) / 2
PO_TOL = 1e-11


class SeedError(RuntimeError):
    pass


@dataclass
class PeriodicOrbit:
    z0: np.ndarray
    T_po: float
    monodromy: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    lam_u: float
    v_u: np.ndarray
    rho: float
    v_c: np.ndarray
    h: float
    mu: float
    vz: float

    def floquet(self):
        """Eigen-pairs sorted as unstable, stable, unit pair, trivial pair."""
        return list(zip(self.eigvals, self.eigvecs.T))


def _flow(model, z, t, M=False):
    r = flow_batch(model, np.atleast_2d(z), np.zeros((1, model.ell)), t, 0.0, M=M)
    return r.z[0], (None if r.M is None else r.M[0])


def classify_floquet(Mon: np.ndarray):
    vals, vecs = np.linalg.eig(Mon)
    mods = np.abs(vals)
    iu = int(np.argmax(np.where(np.abs(vals.imag) < 1e-8, vals.real, -np.inf)))
    if not (abs(vals[iu].imag) < 1e-8 and vals[iu].real > 1 + 1e-6):
        raise SeedError("no real unstable multiplier")
    rest = [i for i in range(len(vals)) if i != iu]
    js = min(rest, key=lambda i: abs(vals[i] - 1 / vals[iu].real))
    rest.remove(js)
    # the unit pair is the one farthest from 1; the trivial pair may split slightly
    rest.sort(key=lambda i: -abs(vals[i] - 1))
    cpx = rest[:2]
    if not all(abs(vals[i].imag) > 1e-7 and abs(mods[i] - 1) < 1e-5 for i in cpx):
        raise SeedError(f"missing unit-circle pair among multipliers {vals}")
    ic = cpx[0] if vals[cpx[0]].imag > 0 else cpx[1]
    ic2 = cpx[1] if ic == cpx[0] else cpx[0]
    triv = [i for i in rest if i not in cpx]
    order = [iu, js, ic, ic2] + triv
    return vals[order], vecs[:, order]


def _normalise_complex(v):
    v = v / np.linalg.norm(v)
    k = int(np.argmax(np.abs(v) > 1e-8 * np.abs(v).max()))
    v = v * np.exp(-1j * np.angle(v[k]))
    return v


def orbit_from_state(model, z0, T, vz=float("nan")) -> PeriodicOrbit:
    """Periodic orbit data (monodromy, Floquet pairs, energy) from a closing state."""
    zT, Mon = _flow(model, z0, T, M=True)
    res = np.max(np.abs(zT - z0))
    if res > PO_TOL:
        raise SeedError(f"periodic orbit closing error {res:.2e} exceeds {PO_TOL:g}")
    vals, vecs = classify_floquet(Mon)
    vu = np.real(vecs[:, 0])
    vu = vu / np.linalg.norm(vu)
    k = int(np.argmax(np.abs(vu) > 1e-8))
    vu = vu * np.sign(vu[k])
    rho = float(np.angle(vals[2]) / (2 * np.pi))
    vc = _normalise_complex(vecs[:, 2])
    h = float(model.H(z0[None], np.zeros((1, model.ell)), 0.0)[0])
    return PeriodicOrbit(z0, T, Mon, vals, vecs, float(vals[0].real), vu, rho, vc, h, model.mu, vz)


def vertical_mode(mu: float):
    """Frequencies (planar, vertical) and the unstable exponent at L1."""
    model = ErtbpModel(mu)
    L1 = lagrange_points(mu)[0]
    A = model.DX(L1[None], np.zeros((1, 1)), 0.0)[0]
    ev = np.linalg.eigvals(A)
    im = np.sort(np.abs(ev.imag[np.abs(ev.imag) > 1e-10]))[::2]
    lam0 = float(np.max(ev.real))
    Azz = A[np.ix_([2, 5], [2, 5])]
    wv = float(np.sqrt(-np.linalg.det(Azz) if np.linalg.det(Azz) < 0 else np.linalg.det(Azz)))
    wp = float(im[np.argmax(np.abs(im - wv))]) if im.size > 1 else float(im[0])
    return wp, wv, lam0


def _shoot(model, x0, vy, vz, thalf, max_iter=25, tol=1e-13):
    """Symmetric half-period shooting: start on the x-axis, return to it with p1 = 0."""
    hist = []
    for _ in range(max_iter):
        z0 = np.array([x0, 0.0, 0.0, 0.0, vy + x0, vz])
        zt, M = _flow(model, z0, thalf, M=True)
        F = np.array([zt[1], zt[2], zt[3]])
        hist.append(float(np.max(np.abs(F))))
        if hist[-1] < tol:
            return x0, vy, thalf
        X = model.X(zt[None], np.zeros((1, model.ell)), 0.0)[0]
        dz_dx0 = M[:, 0] + M[:, 4]
        dz_dvy = M[:, 4]
        rows = [1, 2, 3]
        Jm = np.column_stack([dz_dx0[rows], dz_dvy[rows], X[rows]])
        dx = np.linalg.solve(Jm, -F)
        x0, vy, thalf = x0 + dx[0], vy + dx[1], thalf + dx[2]
    raise SeedError(f"vertical Lyapunov shooting diverged; residual history {hist}")


def _family(model, v_target, dv0=2e-3):
    """Follow the vertical family from the linear mode up to initial speed v_target."""
    L1 = lagrange_points(model.mu)[0]
    _, wv, _ = vertical_mode(model.mu)
    v = min(1e-4, v_target)
    cur = _shoot(model, L1[0], 0.0, v, np.pi / wv)
    prev = None
    dv = dv0
    while v < v_target:
        step = min(dv, v_target - v)
        guess = cur if prev is None else tuple(c + (c - p) * step / (v - prev[0]) for c, p in zip(cur, prev[1]))
        try:
            nxt = _shoot(model, guess[0], guess[1], v + step, guess[2], max_iter=8)
        except (SeedError, RuntimeError, np.linalg.LinAlgError):
            dv /= 2
            if dv < 1e-7:
                raise SeedError(f"vertical family continuation stalled at vz={v:.6g}")
            continue
        prev = (v, cur)
        v, cur = v + step, nxt
        dv = min(dv * 1.5, 2e-2)
    return cur


def vertical_lyapunov(model: ErtbpModel, vz: float | None = None, rho: float | None = None):
    """Vertical Lyapunov orbit around L1, selected by initial vertical speed or by rotation.

    The family is followed from the linear vertical mode in the initial
    vertical speed.  With ``rho`` the family is then searched by secant
    iteration for the orbit whose unit-circle multiplier is exp(2 pi i rho).
    """
    if (vz is None) == (rho is None):
        raise ValueError("give exactly one of vz or rho")

    def orbit(v, guess):
        x, y, t = _shoot(model, guess[0], guess[1], v, guess[2])
        z0 = np.array([x, 0, 0, 0, y + x, v])
        return orbit_from_state(model, z0, 2 * t, v), (x, y, t)

    if vz is not None:
        return orbit(vz, _family(model, vz))[0]
    if not 0 < rho < 0.5:
        raise ValueError("rho must lie in (0, 1/2)")
    v = 1e-4
    po, g = orbit(v, _family(model, v))
    if po.rho > rho:
        raise SeedError(f"rho target {rho} below the family start {po.rho:.6f}")
    lo = (v, po.rho, g)
    dv = 2e-3
    while True:
        v_new = lo[0] + dv
        try:
            po_new, g_new = orbit(v_new, lo[2])
        except (SeedError, RuntimeError, np.linalg.LinAlgError):
            dv /= 2
            if dv < 1e-7:
                raise SeedError(f"cannot reach rho={rho} along the vertical family")
            continue
        if po_new.rho >= rho:
            hi = (v_new, po_new.rho, g_new)
            break
        lo = (v_new, po_new.rho, g_new)
        dv = min(dv * 1.5, 2e-2)
    a, b = lo, hi
    for _ in range(60):
        v = a[0] + (rho - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
        po, g = orbit(v, a[2] if abs(v - a[0]) < abs(v - b[0]) else b[2])
        if abs(po.rho - rho) < 1e-13:
            return po
        if po.rho < rho:
            a = (v, po.rho, g)
        else:
            b = (v, po.rho, g)
    if abs(po.rho - rho) < 1e-10:
        return po
    raise SeedError(f"secant search for rho={rho} stalled at {po.rho}")


# --- continued fractions ----------------------------------------------------------


def continued_fraction(x: float, depth: int = 30) -> list[int]:
    """Partial quotients [a0; a1, a2, ...] of x.

    Works on the exact binary value of x and stops once a convergent reproduces x
    to a few ulps, so rationals come out in their short form.
    """
    q = Fraction(x)
    out = []
    p0, p1, q0, q1 = 0, 1, 1, 0
    tol = 4 * np.spacing(abs(float(x))) if x else 0.0
    for _ in range(depth):
        a = q.numerator // q.denominator
        out.append(a)
        p0, p1 = p1, a * p1 + p0
        q0, q1 = q1, a * q1 + q0
        q -= a
        if q == 0 or abs(p1 / q1 - x) <= tol:
            break
        q = 1 / q
    else:
        return out
    if len(out) > 1 and out[-1] == 1:
        # canonical short form [..., a, 1] -> [..., a + 1]
        out.pop()
        out[-1] += 1
    return out


def noble_from(prefix: list[int]) -> float:
    """Value of [a0; a1, ..., ak, 1, 1, 1, ...]."""
    x = GOLDEN
    for a in reversed(prefix[1:]):
        x = a + 1.0 / x
    return prefix[0] + 1.0 / x


def nobilize(rho: float, tol: float = 1.6e-4, max_depth: int = 25) -> float:
    """Simplest noble number within tol of rho (shallowest truncation depth)."""
    if not 0 < rho < 1:
        raise ValueError("rho must lie in (0, 1)")
    if tol <= 0:
        raise ValueError("tol must be positive")
    cf = continued_fraction(rho, max_depth + 1)
    for k in range(1, len(cf) + 1):
        nu = noble_from(cf[:k])
        if abs(nu - rho) <= tol:
            return nu
    if len(cf) <= max_depth:
        # rho is (numerically) rational: nobles [cf, n, 1, 1, ...] close in on it as n grows
        dist = lambda n: abs(noble_from(cf + [n]) - rho)
        hi = 1
        while dist(hi) > tol and hi < 2**52:
            hi *= 2
        if dist(hi) <= tol:
            lo = hi // 2
            while hi - lo > 1:
                mid = (lo + hi) // 2
                lo, hi = (lo, mid) if dist(mid) <= tol else (mid, hi)
            return noble_from(cf + [hi])
    raise ValueError(f"no noble number within {tol:g} of {rho} up to depth {max_depth}")


# --- linear torus ---------------------------------------------------------------------


def linear_torus_seed(
    po: PeriodicOrbit,
    s: float = 1e-3,
    omega: float | None = None,
    N1: int = 64,
    N2: int = 16,
    m: int = 1,
    model: ErtbpModel | None = None,
) -> TorusSolution:
    """Linear torus z(t_i) + s Re(exp(2 pi i theta) v_c(t_i)) at every segment start t_i = i T/m.

    The centre eigenvector is carried along the orbit by the variational flow, so each
    segment only inherits its own quadratic error instead of the amplified closing error.
    """
    model = model or ErtbpModel(po.mu)
    omega = po.rho if omega is None else omega
    spec = GridSpec(1, 1 if model.ell else 0, N1, N2 if model.ell else 1)
    th, _ = spec.nodes()
    e = np.exp(2j * np.pi * th)
    alpha = po.T_po * model.alpha_hat
    rot = RotationData([omega], alpha, po.T_po)
    Ks, Ws = [], []
    for i in range(m):
        if i == 0:
            z, M = po.z0, np.eye(len(po.z0))
        else:
            z, M = _flow(model, po.z0, po.T_po * i / m, M=True)
        vc = (M @ po.v_c) * np.exp(-2j * np.pi * po.rho * i / m)
        vu = (M @ po.v_u) * abs(po.lam_u) ** (-i / m)
        K = z[:, None, None] + s * np.real(e[None] * vc[:, None, None])
        W = np.broadcast_to(vu[:, None, None], (len(z),) + spec.shape)
        Ks.append(TorusMap(spec, coef=TorusMap(spec, grid=K).coef))
        Ws.append(TorusMap(spec, coef=TorusMap(spec, grid=W).coef))
    return TorusSolution(
        epsilon=0.0,
        K=Ks,
        W=Ws,
        lam=po.lam_u,
        rot=rot,
        model=model.name,
        model_params=model.params(),
        h_label=po.h,
    )
