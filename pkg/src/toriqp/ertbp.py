"""Elliptic restricted three-body problem in the rotating-pulsating frame.

The larger primary (mass 1-mu) sits at (mu, 0, 0) and the smaller one at
(mu-1, 0, 0).  The eccentricity plays the role of the continuation parameter
and the external phase is the true anomaly divided by 2 pi.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import HamiltonianModel

MU_SUN_EARTH = 3.040357143e-6
E_EARTH = 0.01671123
COLLISION_RADIUS = 1e-8


@dataclass(frozen=True)
class ErtbpParams:
    mu: float
    e: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.mu <= 0.5:
            raise ValueError(f"mass parameter must lie in (0, 1/2], got {self.mu}")
        if not 0.0 <= self.e < 1.0:
            raise ValueError(f"eccentricity must lie in [0, 1), got {self.e}")


class ErtbpModel(HamiltonianModel):
    name = "ertbp"
    kernel_id = "ertbp"
    n = 3

    def __init__(self, mu: float = MU_SUN_EARTH):
        ErtbpParams(mu)
        self.mu = float(mu)
        self.alpha_hat = np.array([1.0 / (2.0 * np.pi)])

    def params(self):
        return {"mu": self.mu}

    def is_autonomous(self, eps):
        return eps == 0.0

    # --- pieces ---------------------------------------------------------------
    def _geometry(self, x):
        mu = self.mu
        d1 = x.copy()
        d1[:, 0] -= mu
        d2 = x.copy()
        d2[:, 0] -= mu - 1.0
        r1 = np.sqrt(np.einsum("bi,bi->b", d1, d1))
        r2 = np.sqrt(np.einsum("bi,bi->b", d2, d2))
        if np.any(r1 < COLLISION_RADIUS) or np.any(r2 < COLLISION_RADIUS):
            i = int(np.argmin(np.minimum(r1, r2)))
            raise ValueError(f"state {x[i]} is within {COLLISION_RADIUS:g} of a primary")
        return d1, d2, r1, r2

    @staticmethod
    def _factor(phi, e):
        c = np.cos(2 * np.pi * phi[:, 0])
        s = np.sin(2 * np.pi * phi[:, 0])
        den = 1.0 + e * c
        g = 1.0 / den
        dg_de = -c / den**2
        dg_dphi = 2 * np.pi * e * s / den**2
        return g, dg_de, dg_dphi

    def _potential(self, x, d1, d2, r1, r2):
        m1, m2 = 1.0 - self.mu, self.mu
        return 0.5 * np.einsum("bi,bi->b", x, x) + m1 / r1 + m2 / r2

    def _grad(self, x, d1, d2, r1, r2):
        m1, m2 = 1.0 - self.mu, self.mu
        return x - (m1 / r1**3)[:, None] * d1 - (m2 / r2**3)[:, None] * d2

    def _hess(self, d1, d2, r1, r2):
        m1, m2 = 1.0 - self.mu, self.mu
        I = np.eye(3)
        h = np.broadcast_to(I, (len(d1), 3, 3)).copy()
        for m, d, r in ((m1, d1, r1), (m2, d2, r2)):
            h -= (m / r**3)[:, None, None] * I
            h += (3 * m / r**5)[:, None, None] * np.einsum("bi,bj->bij", d, d)
        return h

    def _third(self, d1, d2, r1, r2, u, w):
        out = np.zeros_like(u)
        for m, d, r in ((1.0 - self.mu, d1, r1), (self.mu, d2, r2)):
            du = np.einsum("bi,bi->b", d, u)
            dw = np.einsum("bi,bi->b", d, w)
            uw = np.einsum("bi,bi->b", u, w)
            out += (3 * m / r**5)[:, None] * (u * dw[:, None] + w * du[:, None] + d * uw[:, None])
            out -= (15 * m / r**7 * du * dw)[:, None] * d
        return out

    @staticmethod
    def _kinetic(z):
        x, p = z[:, :3], z[:, 3:]
        return np.stack([p[:, 0] + x[:, 1], p[:, 1] - x[:, 0], p[:, 2]], axis=1)

    # --- evaluators -------------------------------------------------------------
    def H(self, z, phi, eps):
        x = z[:, :3]
        geo = self._geometry(x)
        g, _, _ = self._factor(phi, eps)
        v = self._kinetic(z)
        return 0.5 * (np.einsum("bi,bi->b", v, v) + x[:, 2] ** 2) - g * self._potential(x, *geo)

    def dH_dz(self, z, phi, eps):
        x = z[:, :3]
        geo = self._geometry(x)
        g, _, _ = self._factor(phi, eps)
        v = self._kinetic(z)
        dx = np.stack([-v[:, 1], v[:, 0], x[:, 2]], axis=1) - g[:, None] * self._grad(x, *geo)
        return np.concatenate([dx, v], axis=1)

    def dH_dphi(self, z, phi, eps):
        x = z[:, :3]
        geo = self._geometry(x)
        _, _, dgp = self._factor(phi, eps)
        return (-dgp * self._potential(x, *geo))[:, None]

    def dH_deps(self, z, phi, eps):
        x = z[:, :3]
        geo = self._geometry(x)
        _, dge, _ = self._factor(phi, eps)
        return -dge * self._potential(x, *geo)

    def X(self, z, phi, eps):
        return self.evaluate(z, phi, eps, ())["X"]

    def DX(self, z, phi, eps):
        return self.evaluate(z, phi, eps, ("DX",))["DX"]

    def DphiX(self, z, phi, eps):
        return self.evaluate(z, phi, eps, ("DphiX",))["DphiX"]

    def depsX(self, z, phi, eps):
        return self.evaluate(z, phi, eps, ("depsX",))["depsX"]

    def depsDX(self, z, phi, eps):
        return self.evaluate(z, phi, eps, ("depsDX",))["depsDX"]

    def D2X(self, z, phi, eps, u, w):
        x = z[:, :3]
        d1, d2, r1, r2 = self._geometry(x)
        g, _, _ = self._factor(phi, eps)
        out = np.zeros_like(u)
        out[:, 3:] = g[:, None] * self._third(d1, d2, r1, r2, u[:, :3], w[:, :3])
        return out

    def evaluate(self, z, phi, eps, need):
        x = z[:, :3]
        B = len(z)
        geo = self._geometry(x)
        g, dge, dgp = self._factor(phi, eps)
        v = self._kinetic(z)
        grad = self._grad(x, *geo)
        X = np.empty((B, 6))
        X[:, :3] = v
        X[:, 3] = v[:, 1] + g * grad[:, 0]
        X[:, 4] = -v[:, 0] + g * grad[:, 1]
        X[:, 5] = -x[:, 2] + g * grad[:, 2]
        out = {"X": X}
        hess = None
        if "DX" in need or "depsDX" in need:
            hess = self._hess(*geo)
        if "DX" in need:
            A = np.zeros((B, 6, 6))
            A[:, 0, 1] = 1.0
            A[:, 1, 0] = -1.0
            A[:, 0, 3] = A[:, 1, 4] = A[:, 2, 5] = 1.0
            A[:, 3:, :3] = g[:, None, None] * hess
            A[:, 3, 0] -= 1.0
            A[:, 4, 1] -= 1.0
            A[:, 5, 2] -= 1.0
            A[:, 3, 4] = 1.0
            A[:, 4, 3] = -1.0
            out["DX"] = A
        if "DphiX" in need:
            P = np.zeros((B, 6, 1))
            P[:, 3:, 0] = dgp[:, None] * grad
            out["DphiX"] = P
        if "depsX" in need:
            E = np.zeros((B, 6))
            E[:, 3:] = dge[:, None] * grad
            out["depsX"] = E
        if "depsDX" in need:
            D = np.zeros((B, 6, 6))
            D[:, 3:, :3] = dge[:, None, None] * hess
            out["depsDX"] = D
        if "H" in need:
            pot = self._potential(x, *geo)
            out["H"] = 0.5 * (np.einsum("bi,bi->b", v, v) + x[:, 2] ** 2) - g * pot
            out["dH_deps"] = -dge * pot
            out["dH_dphi"] = (-dgp * pot)[:, None]
        return out


def _collinear_root(mu: float, lo: float, hi: float) -> float:
    """Safeguarded Newton for the x-axis equilibrium condition on (lo, hi)."""

    def f(x):
        d1, d2 = x - mu, x - mu + 1.0
        return x - (1 - mu) * d1 / abs(d1) ** 3 - mu * d2 / abs(d2) ** 3

    def df(x):
        d1, d2 = x - mu, x - mu + 1.0
        return 1 + 2 * (1 - mu) / abs(d1) ** 3 + 2 * mu / abs(d2) ** 3

    a, b = lo, hi
    fa = f(a)
    x = 0.5 * (a + b)
    for _ in range(200):
        fx = f(x)
        if fx == 0.0:
            return x
        if np.sign(fx) == np.sign(fa):
            a, fa = x, fx
        else:
            b = x
        xn = x - fx / df(x)
        if not (min(a, b) < xn < max(a, b)):
            xn = 0.5 * (a + b)
        if abs(xn - x) <= 1e-15 * max(1.0, abs(x)):
            return xn
        x = xn
    return x


def lagrange_points(mu: float) -> np.ndarray:
    """Equilibrium states L1..L5 (rows) as phase points (x, p)."""
    ErtbpParams(mu)
    # bracket ends stay clear of the singularities; Hill-radius scale sets the margin
    tiny = 1e-9 * min(1.0, mu ** (1 / 3))
    x1 = _collinear_root(mu, mu - 1 + tiny, mu - tiny)
    x2 = _collinear_root(mu, mu - 3.0, mu - 1 - tiny)
    x3 = _collinear_root(mu, mu + tiny, mu + 3.0)
    pos = np.array(
        [
            [x1, 0, 0],
            [x2, 0, 0],
            [x3, 0, 0],
            [mu - 0.5, np.sqrt(3) / 2, 0],
            [mu - 0.5, -np.sqrt(3) / 2, 0],
        ]
    )
    mom = np.stack([-pos[:, 1], pos[:, 0], np.zeros(5)], axis=1)
    return np.concatenate([pos, mom], axis=1)


def vector_field_and_derivatives(z, phi, params: ErtbpParams) -> dict:
    """All evaluator outputs at a single point, keyed by name."""
    m = ErtbpModel(params.mu)
    z = np.atleast_2d(np.asarray(z, dtype=float))
    ph = np.atleast_2d(np.asarray(phi, dtype=float)).reshape(-1, 1)
    ev = m.evaluate(z, ph, params.e, ("DX", "DphiX", "depsX", "depsDX", "H"))
    ev["dH_dz"] = m.dH_dz(z, ph, params.e)
    return {k: v[0] for k, v in ev.items()}
