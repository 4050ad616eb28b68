"""Tangents with respect to the external parameter and adaptive continuation in it."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .cohomology import AverageError
from .dynamics import IntegrationError
from .fourier import TorusMap, band_limited, lowpass, tail_norms
from .frame import FrameError, build_frame, reduced_rhs
from .newton import (
    NewtonError,
    RefineError,
    _apply_frames,
    refine,
    solve_bundle_system,
    solve_torus_system,
)
from .solution import TorusSolution, flow_map

TANGENT_ETA3_TOL = 1e-8


class ContinuationError(RuntimeError):
    """Continuation stopped early; ``last`` is the last accepted solution."""

    def __init__(self, msg, reason, last, records):
        super().__init__(msg)
        self.reason = reason
        self.last = last
        self.records = records


@dataclass
class ContinuationConfig:
    eps_K: float = 1e-9
    eps_W: float = 1e-5
    eps_t: float = 1e-9
    r_t: float = 0.2
    r_f: float = 1 / 3
    n_max: int = 6
    n_eps: int = 3
    n_des: int = 4
    n_t: int = 2
    max_grid: int = 1024
    d_eps0: float = 1e-3
    target: float = 0.0

    def __post_init__(self):
        for name in ("eps_K", "eps_W", "eps_t", "r_t", "n_max", "n_des", "max_grid", "d_eps0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("n_eps", "n_t"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.25 <= self.r_f < 0.5:
            raise ValueError(f"r_f must lie in [1/4, 1/2), got {self.r_f}")
        if not 0 < self.r_t < 0.5:
            raise ValueError(f"r_t must lie in (0, 1/2), got {self.r_t}")


@dataclass
class Tangent:
    dK: list
    dW: list
    dlam_m: float
    dlam: float
    eta3_avg: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _lam_derivative(sol, dlam_m):
    m = sol.m
    return dlam_m if m == 1 else m * sol.lam_m ** (m - 1) * dlam_m


def _solve_tangent(sol, model, frames, E_K, second):
    """Shared block solves; ``second(dK_nodes)`` returns E^{dW} per segment."""
    m = sol.m
    etas = [reduced_rhs(frames[i], E_K[i], model) for i in range(m)]
    xis, _, info = solve_torus_system(sol, frames, etas, eta3_tol=TANGENT_ETA3_TOL, quadratic=False)
    dK_nodes = _apply_frames(frames, xis)
    E_W = second(dK_nodes)
    etas_w = [reduced_rhs(frames[i], E_W[i], model) for i in range(m)]
    xw, dlam_m = solve_bundle_system(sol, frames, etas_w)
    dW_nodes = _apply_frames(frames, xw)
    spec = sol.spec
    return Tangent(
        dK=[band_limited(TorusMap.from_nodal(spec, d)) for d in dK_nodes],
        dW=[band_limited(TorusMap.from_nodal(spec, d)) for d in dW_nodes],
        dlam_m=dlam_m,
        dlam=_lam_derivative(sol, dlam_m),
        eta3_avg=info["eta3_avg"],
    )


def tangent_eps(sol: TorusSolution, model) -> Tangent:
    """Derivatives of (K, W, lambda) with respect to the external parameter."""
    m, T, eps = sol.m, sol.T, sol.epsilon
    flows = [flow_map(model, k, T / m, eps, M=True, deps=True) for k in sol.K]
    frames = build_frame(sol, model, [f.M for f in flows])

    def second(dK_nodes):
        out = []
        for i in range(m):
            r = flow_map(model, sol.K[i], T / m, eps, u0=sol.W[i].nodal(), wK=dK_nodes[i])
            out.append(r.V)
        return out

    return _solve_tangent(sol, model, frames, [f.P_eps for f in flows], second)


def tangent_T(sol: TorusSolution, model) -> Tangent:
    """Derivatives of (K, W, lambda) with respect to the flying time at fixed omega (autonomous only)."""
    if model.ell and not model.is_autonomous(sol.epsilon):
        raise ValueError("the flying-time tangent needs an autonomous system")
    m, T, eps = sol.m, sol.T, sol.epsilon
    flows = [flow_map(model, k, T / m, eps, M=True) for k in sol.K]
    frames = build_frame(sol, model, [f.M for f in flows])
    phi_end = np.zeros((sol.spec.size, model.ell))
    X_end = [model.X(f.z, phi_end, eps) / m for f in flows]

    def second(dK_nodes):
        out = []
        for i in range(m):
            W = sol.W[i].nodal()
            # the epsilon terms of the second variation cancel in the difference
            r1 = flow_map(model, sol.K[i], T / m, eps, u0=W, wK=dK_nodes[i])
            r0 = flow_map(model, sol.K[i], T / m, eps, u0=W, wK=np.zeros_like(W))
            DX = model.DX(flows[i].z, phi_end, eps)
            MW = np.einsum("bij,bj->bi", flows[i].M, W)
            out.append(r1.V - r0.V + np.einsum("bij,bj->bi", DX, MW) / m)
        return out

    return _solve_tangent(sol, model, frames, X_end, second)


# --- step control -----------------------------------------------------------------------


def _mean_sq(maps):
    return sum(float(np.mean(np.sum(f.grid**2, axis=0))) for f in maps)


def solution_norm(sol: TorusSolution) -> float:
    """(eps^2 + lambda_m^2 + <|K|^2> + <|W|^2>)^(1/2), segments summed."""
    return math.sqrt(sol.epsilon**2 + sol.lam_m**2 + _mean_sq(sol.K) + _mean_sq(sol.W))


def tangent_norm(tan: Tangent) -> float:
    return math.sqrt(1.0 + tan.dlam_m**2 + _mean_sq(tan.dK) + _mean_sq(tan.dW))


def predict(sol: TorusSolution, tan: Tangent, h: float) -> TorusSolution:
    """First-order predictor along the unit tangent; h is the step in the solution norm."""
    s = h / tangent_norm(tan)
    lam_m = sol.lam_m + s * tan.dlam_m
    if sol.m > 1 and lam_m <= 0:
        raise NewtonError("predicted per-segment multiplier is not positive")
    lam = lam_m if sol.m == 1 else math.copysign(lam_m**sol.m, sol.lam)
    return sol.with_(
        epsilon=sol.epsilon + s,
        K=[k + s * d for k, d in zip(sol.K, tan.dK)],
        W=[w + s * d for w, d in zip(sol.W, tan.dW)],
        lam=lam,
    )


def _grid_tails(sol: TorusSolution, r_t: float):
    t_th = max(float(np.max(tail_norms(k, r_t)[0])) for k in sol.K)
    t_ph = max(float(np.max(tail_norms(k, r_t)[1])) for k in sol.K)
    return t_th, t_ph


def doubled_grid(sol: TorusSolution, cfg: ContinuationConfig):
    """New (N1, N2) after a failed step, or None when no tail exceeds eps_t."""
    t_th, t_ph = _grid_tails(sol, cfg.r_t)
    N1, N2 = sol.spec.N1, sol.spec.N2
    big_th, big_ph = t_th > cfg.eps_t, t_ph > cfg.eps_t
    if big_th and big_ph:
        return 2 * N1, 2 * N2
    if big_th and t_th > t_ph:
        return 2 * N1, N2
    if big_ph and t_ph > t_th:
        return N1, 2 * N2
    return None


@dataclass
class StepRecord:
    step: int
    eps: float
    d_eps: float
    n_it: int
    err_K: float
    err_W: float
    N1: int
    N2: int
    lam: float
    seconds: float

    FIELDS = ("step", "eps", "d_eps", "n_it", "err_K", "err_W", "N1", "N2", "lam", "seconds")


class RunLog:
    """CSV writer for accepted continuation steps."""

    def __init__(self, stream):
        self._w = csv.DictWriter(stream, fieldnames=StepRecord.FIELDS)
        self._w.writeheader()
        self._stream = stream

    def __call__(self, rec: StepRecord, sol=None):
        self._w.writerow({k: v for k, v in asdict(rec).items() if k in StepRecord.FIELDS})
        self._stream.flush()


@dataclass
class ContinuationResult:
    sol: TorusSolution
    records: list


def _filter(sol, r_f):
    return sol.with_(K=[lowpass(k, r_f) for k in sol.K], W=[lowpass(w, r_f) for w in sol.W])


def continue_to(sol: TorusSolution, model, cfg: ContinuationConfig, on_step=None, tangent=tangent_eps) -> ContinuationResult:
    """Predictor-corrector continuation in the external parameter up to ``cfg.target``.

    ``on_step(record, sol)`` is called after every accepted step.
    """
    records: list[StepRecord] = []
    target = float(cfg.target)
    if sol.epsilon == target:
        return ContinuationResult(sol, records)
    direction = 1.0 if target > sol.epsilon else -1.0
    h = cfg.d_eps0
    step = 0
    t0 = time.perf_counter()

    def fail(msg, reason):
        raise ContinuationError(msg, reason, sol, records)

    while direction * (target - sol.epsilon) > 0:
        doublings = 0
        while True:
            try:
                tan = tangent(sol, model)
            except (AverageError, FrameError, NewtonError, IntegrationError, ValueError) as exc:
                fail(f"tangent failed at eps={sol.epsilon:.8g}: {exc}", "tangent_failure")
            if direction < 0:
                tan = Tangent([-d for d in tan.dK], [-d for d in tan.dW], -tan.dlam_m, -tan.dlam, tan.eta3_avg)
            accepted = None
            last_exc = None
            for _ in range(cfg.n_eps + 1):
                remaining = abs(target - sol.epsilon) * tangent_norm(tan)
                h_try = min(h, remaining)
                try:
                    guess = predict(sol, tan, h_try)
                    if h_try == remaining:
                        guess = guess.with_(epsilon=target)
                    res = refine(guess, model, eps_K=cfg.eps_K, eps_W=cfg.eps_W, n_max=cfg.n_max, r_f=cfg.r_f)
                    accepted = (res, h_try)
                    break
                except (RefineError, NewtonError, ValueError) as exc:
                    last_exc = exc
                    h = h_try / 2
            if accepted is not None:
                break
            if doublings >= cfg.n_t:
                fail(f"step failed after {cfg.n_eps} halvings and {doublings} grid doublings: {last_exc}", "exhausted")
            grid = doubled_grid(sol, cfg)
            if grid is None:
                fail(f"step failed and no tail exceeds {cfg.eps_t:g}: {last_exc}", "step_halving_floor")
            if max(grid) > cfg.max_grid:
                fail(f"grid {grid} would exceed {cfg.max_grid}", "grid_ceiling")
            sol = sol.resampled(*grid)
            doublings += 1
        res, h_used = accepted
        sol = _filter(res.sol, cfg.r_f)
        step += 1
        rec = StepRecord(
            step,
            sol.epsilon,
            h_used,
            res.n_it,
            res.report.err_K,
            res.report.err_W,
            sol.spec.N1,
            sol.spec.N2,
            sol.lam,
            time.perf_counter() - t0,
        )
        records.append(rec)
        if on_step is not None:
            on_step(rec, sol)
        h = cfg.n_des / max(res.n_it, 1) * h_used
    return ContinuationResult(sol, records)


__all__ = [
    "ContinuationConfig",
    "ContinuationError",
    "ContinuationResult",
    "RunLog",
    "StepRecord",
    "Tangent",
    "continue_to",
    "doubled_grid",
    "predict",
    "solution_norm",
    "tangent_T",
    "tangent_eps",
    "tangent_norm",
]
