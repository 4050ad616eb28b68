"""Cohomological equations  lam*xi - mu*xi(theta+omega, phi+alpha) = eta  on the torus."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .fourier import TorusMap, average, shift

AVG_TOL = 1e-9
DIVISOR_FLOOR = 1e-12


class ResonanceError(ValueError):
    """A small divisor fell below the floor on an active Fourier mode."""


class AverageError(ValueError):
    """The right-hand side of a small-divisor equation has a nonzero average."""


@dataclass
class RotationData:
    omega: np.ndarray
    alpha: np.ndarray
    T: float
    gamma: float | None = None
    tau: float | None = None
    alpha_hat: np.ndarray = field(init=False)

    def __post_init__(self):
        self.omega = np.atleast_1d(np.asarray(self.omega, dtype=float))
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        if not (np.isfinite(self.T) and self.T > 0):
            raise ValueError(f"flying time must be positive, got {self.T}")
        self.alpha_hat = self.alpha / self.T

    @property
    def d(self) -> int:
        return self.omega.size + 1

    @property
    def ell(self) -> int:
        return self.alpha.size

    def scaled(self, frac: float) -> "RotationData":
        """Rotation by a fraction of the full shift, flying time scaled alike."""
        return RotationData(self.omega * frac, self.alpha * frac, self.T * frac, self.gamma, self.tau)

    def angles(self):
        a = float(self.omega[0]) if self.omega.size else 0.0
        b = float(self.alpha[0]) if self.alpha.size else 0.0
        return a, b


def _rotation_phase(eta: TorusMap, rot: RotationData) -> np.ndarray:
    a, b = rot.angles()
    kk, jj = eta.spec.wavenumbers()
    return np.exp(2j * np.pi * (kk * a + jj * b))


def solve_nonsmall(eta: TorusMap, lam: float, mu: float, rot: RotationData) -> TorusMap:
    if abs(abs(lam) - abs(mu)) <= 1e-14 * max(abs(lam), abs(mu), 1.0):
        raise ValueError(f"|lambda| = |mu| ({lam}, {mu}): use the small-divisor solver")
    div = lam - mu * _rotation_phase(eta, rot)
    return TorusMap(eta.spec, coef=eta.coef / div)


def solve_small(eta: TorusMap, rot: RotationData, free_average=0.0, avg_tol: float = AVG_TOL) -> TorusMap:
    avg = average(eta)
    if np.any(np.abs(avg) > avg_tol):
        raise AverageError(f"right-hand side average {avg} exceeds tolerance {avg_tol:g}")
    spec = eta.spec
    div = 1.0 - _rotation_phase(eta, rot)
    active = ~spec.nyquist_mask()
    active[0, 0] = False
    if np.any(np.abs(div[active]) < DIVISOR_FLOOR):
        kk, jj = spec.wavenumbers()
        i = np.argwhere(active & (np.abs(div) < DIVISOR_FLOOR))[0]
        raise ResonanceError(
            f"near-resonant divisor {abs(div[tuple(i)]):.3e} at mode (k={kk[tuple(i)]}, j={jj[tuple(i)]})"
        )
    div[~active] = 1.0
    coef = eta.coef / div
    coef[:, 0, 0] = np.broadcast_to(np.asarray(free_average, dtype=float), (eta.c,))
    return TorusMap(spec, coef=coef)


def diophantine_margin(rot: RotationData, K_max: int, tau: float | None = None) -> float:
    if K_max < 1:
        raise ValueError("K_max must be >= 1")
    freqs = np.concatenate([rot.omega, rot.alpha])
    if tau is None:
        tau = rot.tau if rot.tau is not None else rot.d + rot.ell - 1
    best = np.inf
    rng = range(-K_max, K_max + 1)
    for kv in itertools.product(rng, repeat=freqs.size):
        order = sum(abs(x) for x in kv)
        if order == 0 or order > K_max:
            continue
        x = float(np.dot(kv, freqs))
        best = min(best, abs(x - round(x)) * order**tau)
    return float(best)


# --- cyclic systems from multiple shooting ------------------------------------------
#
#   lam * x_i - mu * x_{i+1}(theta + omega/m, phi + alpha/m) = eta_i,   x_m = x_0
#
# ``rot_m`` carries the per-segment shift (omega/m, alpha/m); the full shift is m times it.


def _full(rot_m: RotationData, m: int) -> RotationData:
    return rot_m.scaled(m)


def solve_cyclic_nonsmall(etas, lam: float, mu: float, rot_m: RotationData):
    """Solve the cyclic non-small system; returns the list x_0..x_{m-1}."""
    m = len(etas)
    if m == 1:
        return [solve_nonsmall(etas[0], lam, mu, rot_m)]
    a, b = rot_m.angles()
    # aggregated equation  lam^m x_0 - mu^m x_0(R) = sum lam^(m-1-i) mu^i eta_i(R_m^i)
    rhs = etas[0] * lam ** (m - 1)
    for i in range(1, m):
        rhs = rhs + shift(etas[i], i * a, i * b) * (lam ** (m - 1 - i) * mu**i)
    xs = [None] * m
    xs[0] = solve_nonsmall(rhs, lam**m, mu**m, _full(rot_m, m))
    if abs(lam) > abs(mu):
        nxt = xs[0]
        for i in range(m - 1, 0, -1):
            xs[i] = (etas[i] + shift(nxt, a, b) * mu) * (1.0 / lam)
            nxt = xs[i]
    else:
        for i in range(m - 1):
            xs[i + 1] = shift((xs[i] * lam - etas[i]) * (1.0 / mu), -a, -b)
    return xs


def cyclic_small_rhs(etas, rot_m: RotationData) -> TorusMap:
    """Right-hand side of the aggregated small-divisor equation for x_0."""
    a, b = rot_m.angles()
    rhs = etas[0]
    for i in range(1, len(etas)):
        rhs = rhs + shift(etas[i], i * a, i * b)
    return rhs


def solve_cyclic_small(etas, rot_m: RotationData, free_average=0.0, avg_tol: float = AVG_TOL):
    """Solve x_i - x_{i+1}(R_m) = eta_i cyclically; <x_0> = free_average.

    Only the sum of the averages of eta_i must vanish.
    """
    m = len(etas)
    if m == 1:
        return [solve_small(etas[0], rot_m, free_average, avg_tol)]
    a, b = rot_m.angles()
    xs = [None] * m
    xs[0] = solve_small(cyclic_small_rhs(etas, rot_m), _full(rot_m, m), free_average, avg_tol)
    for i in range(m - 1):
        xs[i + 1] = shift(xs[i] - etas[i], -a, -b)
    return xs
