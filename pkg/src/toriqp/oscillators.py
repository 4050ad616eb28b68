"""Two nonlinear oscillators plus a saddle, with a small periodic forcing.

    H = a.I + (1/2) I.B.I + nu*x3*p3 + eps*kappa*cos(2 pi phi)*f(x)
    I_i = (x_i^2 + p_i^2)/2,   f = x2 + x1*x3 + x1^2*x2/2

At eps = 0 every pair of actions gives an explicit partially hyperbolic torus
with multiplier exp(nu*T), which makes the model a convenient oracle.
"""

from __future__ import annotations

import numpy as np

from .dynamics import HamiltonianModel


class OscillatorSaddle(HamiltonianModel):
    name = "oscillators"
    n = 3

    def __init__(self, a=(0.6, 1.0), B=((0.2, 0.05), (0.05, 0.1)), nu=0.4, kappa=1.0, alpha_hat=0.23):
        self.freq0 = np.asarray(a, dtype=float)
        self.Bm = np.asarray(B, dtype=float)
        self.nu = float(nu)
        self.kappa = float(kappa)
        self.alpha_hat = np.array([float(alpha_hat)])

    def params(self):
        return {
            "a": self.freq0.tolist(),
            "B": self.Bm.tolist(),
            "nu": self.nu,
            "kappa": self.kappa,
            "alpha_hat": float(self.alpha_hat[0]),
        }

    def is_autonomous(self, eps):
        return eps == 0.0 or self.kappa == 0.0

    # --- helpers ---------------------------------------------------------------
    def _freq(self, z):
        I = 0.5 * np.stack([z[:, 0] ** 2 + z[:, 3] ** 2, z[:, 1] ** 2 + z[:, 4] ** 2], axis=1)
        return I, self.freq0 + I @ self.Bm.T

    def _dfreq(self, z):
        # gradient of Omega_i with respect to z, shape (B, 2, 6)
        g = np.zeros((len(z), 2, 6))
        for i in range(2):
            g[:, i, 0] = self.Bm[i, 0] * z[:, 0]
            g[:, i, 3] = self.Bm[i, 0] * z[:, 3]
            g[:, i, 1] = self.Bm[i, 1] * z[:, 1]
            g[:, i, 4] = self.Bm[i, 1] * z[:, 4]
        return g

    @staticmethod
    def _f(x):
        return x[:, 1] + x[:, 0] * x[:, 2] + 0.5 * x[:, 0] ** 2 * x[:, 1]

    @staticmethod
    def _gradf(x):
        return np.stack([x[:, 2] + x[:, 0] * x[:, 1], 1.0 + 0.5 * x[:, 0] ** 2, x[:, 0]], axis=1)

    @staticmethod
    def _hessf(x):
        h = np.zeros((len(x), 3, 3))
        h[:, 0, 0] = x[:, 1]
        h[:, 0, 1] = h[:, 1, 0] = x[:, 0]
        h[:, 0, 2] = h[:, 2, 0] = 1.0
        return h

    def _forcing(self, phi, eps):
        c = np.cos(2 * np.pi * phi[:, 0])
        s = np.sin(2 * np.pi * phi[:, 0])
        return self.kappa * eps * c, self.kappa * c, -2 * np.pi * self.kappa * eps * s

    # --- evaluators --------------------------------------------------------------
    def H(self, z, phi, eps):
        I, _ = self._freq(z)
        q, _, _ = self._forcing(phi, eps)
        h0 = I @ self.freq0 + 0.5 * np.einsum("bi,ij,bj->b", I, self.Bm, I) + self.nu * z[:, 2] * z[:, 5]
        return h0 + q * self._f(z[:, :3])

    def dH_dz(self, z, phi, eps):
        _, Om = self._freq(z)
        q, _, _ = self._forcing(phi, eps)
        g = np.zeros_like(z)
        g[:, 0] = Om[:, 0] * z[:, 0]
        g[:, 1] = Om[:, 1] * z[:, 1]
        g[:, 2] = self.nu * z[:, 5]
        g[:, 3] = Om[:, 0] * z[:, 3]
        g[:, 4] = Om[:, 1] * z[:, 4]
        g[:, 5] = self.nu * z[:, 2]
        g[:, :3] += q[:, None] * self._gradf(z[:, :3])
        return g

    def dH_dphi(self, z, phi, eps):
        _, _, qp = self._forcing(phi, eps)
        return (qp * self._f(z[:, :3]))[:, None]

    def dH_deps(self, z, phi, eps):
        _, qe, _ = self._forcing(phi, eps)
        return qe * self._f(z[:, :3])

    def X(self, z, phi, eps):
        g = self.dH_dz(z, phi, eps)
        return np.concatenate([g[:, 3:], -g[:, :3]], axis=1)

    def DX(self, z, phi, eps):
        _, Om = self._freq(z)
        dOm = self._dfreq(z)
        q, _, _ = self._forcing(phi, eps)
        A = np.zeros((len(z), 6, 6))
        for i in range(2):
            A[:, i, 3 + i] += Om[:, i]
            A[:, i] += z[:, 3 + i, None] * dOm[:, i]
            A[:, 3 + i, i] -= Om[:, i]
            A[:, 3 + i] -= z[:, i, None] * dOm[:, i]
        A[:, 2, 2] = self.nu
        A[:, 5, 5] = -self.nu
        A[:, 3:, :3] -= q[:, None, None] * self._hessf(z[:, :3])
        return A

    def DphiX(self, z, phi, eps):
        _, _, qp = self._forcing(phi, eps)
        out = np.zeros((len(z), 6, 1))
        out[:, 3:, 0] = -qp[:, None] * self._gradf(z[:, :3])
        return out

    def depsX(self, z, phi, eps):
        _, qe, _ = self._forcing(phi, eps)
        out = np.zeros((len(z), 6))
        out[:, 3:] = -qe[:, None] * self._gradf(z[:, :3])
        return out

    def depsDX(self, z, phi, eps):
        _, qe, _ = self._forcing(phi, eps)
        out = np.zeros((len(z), 6, 6))
        out[:, 3:, :3] = -qe[:, None, None] * self._hessf(z[:, :3])
        return out

    def D2X(self, z, phi, eps, u, w):
        dOm = self._dfreq(z)
        q, _, _ = self._forcing(phi, eps)
        out = np.zeros_like(u)
        for i in range(2):
            d2 = self.Bm[i, 0] * (u[:, 0] * w[:, 0] + u[:, 3] * w[:, 3]) + self.Bm[i, 1] * (
                u[:, 1] * w[:, 1] + u[:, 4] * w[:, 4]
            )
            du = np.einsum("bj,bj->b", dOm[:, i], u)
            dw = np.einsum("bj,bj->b", dOm[:, i], w)
            out[:, i] = z[:, 3 + i] * d2 + du * w[:, 3 + i] + dw * u[:, 3 + i]
            out[:, 3 + i] = -(z[:, i] * d2 + du * w[:, i] + dw * u[:, i])
        third = np.stack([u[:, 0] * w[:, 1] + u[:, 1] * w[:, 0], u[:, 0] * w[:, 0], np.zeros(len(u))], axis=1)
        out[:, 3:] -= q[:, None] * third
        return out

    # --- exact objects at eps = 0 -------------------------------------------------
    def frequencies(self, I1, I2):
        return self.freq0 + self.Bm @ np.array([I1, I2])

    def actions_for(self, T, omega):
        """Actions whose torus has flying time T and rotation omega (unreduced)."""
        Om2 = 2 * np.pi / T
        Om1 = omega * Om2
        return np.linalg.solve(self.Bm, np.array([Om1, Om2]) - self.freq0)

    def exact_torus(self, I1, I2):
        """(T, omega, lambda, K(theta), W) of the eps = 0 torus with actions I."""
        Om = self.frequencies(I1, I2)
        T = 2 * np.pi / Om[1]
        omega = Om[0] / Om[1]
        r1, r2 = np.sqrt(2 * I1), np.sqrt(2 * I2)

        def K(theta):
            theta = np.asarray(theta, dtype=float)
            out = np.zeros((6,) + theta.shape)
            out[0] = r1 * np.cos(2 * np.pi * theta)
            out[3] = -r1 * np.sin(2 * np.pi * theta)
            out[1] = r2
            return out

        W = np.zeros(6)
        W[2] = 1.0
        return T, omega, float(np.exp(self.nu * T)), K, W
