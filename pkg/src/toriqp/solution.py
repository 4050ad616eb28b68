"""State of one computed torus: generating tori and bundles per shooting segment."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .cohomology import RotationData
from .dynamics import flow_batch
from .fourier import GridSpec, TorusMap, band_limited, resample, shift

LAMBDA_ROOT_BOUND = 50.0


@dataclass
class TorusSolution:
    epsilon: float
    K: list
    W: list
    lam: float
    rot: RotationData
    model: str = "ertbp"
    model_params: dict = field(default_factory=dict)
    h_label: float = float("nan")

    def __post_init__(self):
        if len(self.K) != len(self.W) or not self.K:
            raise ValueError("need the same positive number of K and W segments")
        spec = self.K[0].spec
        for f in list(self.K) + list(self.W):
            if f.spec != spec:
                raise ValueError("all segments must share one grid")
        if self.lam == 0 or not np.isfinite(self.lam):
            raise ValueError(f"invalid multiplier {self.lam}")
        if self.m > 1 and self.lam < 0:
            raise ValueError("negative multipliers are not supported with multiple shooting")
        if abs(self.lam_m) > LAMBDA_ROOT_BOUND:
            raise ValueError(f"|lambda|^(1/m) = {abs(self.lam_m):.3g} exceeds {LAMBDA_ROOT_BOUND}; use more segments")

    @property
    def m(self) -> int:
        return len(self.K)

    @property
    def spec(self) -> GridSpec:
        return self.K[0].spec

    @property
    def T(self) -> float:
        return self.rot.T

    @property
    def lam_m(self) -> float:
        return math.copysign(abs(self.lam) ** (1.0 / self.m), self.lam)

    @property
    def chi(self) -> float:
        return math.log(abs(self.lam)) / self.T

    @property
    def n(self) -> int:
        return self.K[0].c // 2

    def with_(self, **kw) -> "TorusSolution":
        return replace(self, **kw)

    def resampled(self, N1: int, N2: int) -> "TorusSolution":
        return self.with_(K=[resample(k, N1, N2) for k in self.K], W=[resample(w, N1, N2) for w in self.W])


def node_phases(spec: GridSpec, offset: float = 0.0) -> np.ndarray:
    """External phase at every grid node, shape (N1*N2, 1) or (N1*N2, 0)."""
    if not spec.d_phi:
        return np.zeros((spec.size, 0))
    _, ph = spec.nodes()
    return (ph.reshape(-1) + offset)[:, None]


def flow_map(model, K: TorusMap, t: float, eps: float, phase_offset: float = 0.0, **kw):
    """Flow every grid node of K for time t; node phases are phi_j + phase_offset."""
    ph = node_phases(K.spec, phase_offset)
    if model.ell and not K.spec.d_phi:
        ph = np.full((K.spec.size, model.ell), phase_offset)
    return flow_batch(model, K.nodal(), ph, t, eps, **kw)


def advance_segment(model, K: TorusMap, W: TorusMap, lam: float, rot: RotationData, eps: float, frac: float):
    """Torus and bundle a fraction ``frac`` of the flying time later.

    Khat(theta, phi) = flow_{frac T}(K(theta - frac omega, phi - frac alpha)),
    What = lam^(-frac) * D flow_{frac T} W(theta - frac omega, phi - frac alpha).
    """
    if frac == 0:
        return band_limited(K), band_limited(W)
    a, b = rot.angles()
    Ks = shift(K, -frac * a, -frac * b)
    Ws = shift(W, -frac * a, -frac * b)
    r = flow_map(model, Ks, frac * rot.T, eps, phase_offset=-frac * b, M=True)
    spec = K.spec
    Wn = np.einsum("bij,bj->bi", r.M, Ws.nodal()) * abs(lam) ** (-frac)
    return band_limited(TorusMap.from_nodal(spec, r.z)), band_limited(TorusMap.from_nodal(spec, Wn))


def split_segments(sol: TorusSolution, m: int, model) -> TorusSolution:
    """Re-express a single-shooting solution with m segments."""
    if sol.m != 1:
        raise ValueError("split_segments expects a single-segment solution")
    Ks, Ws = [], []
    for i in range(m):
        k, w = advance_segment(model, sol.K[0], sol.W[0], sol.lam, sol.rot, sol.epsilon, i / m)
        Ks.append(k)
        Ws.append(w)
    return sol.with_(K=Ks, W=Ws)
