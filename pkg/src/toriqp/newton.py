"""Invariance errors and Newton steps for generating tori and their rank-1 bundles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cohomology import (
    AverageError,
    RotationData,
    cyclic_small_rhs,
    solve_cyclic_nonsmall,
    solve_cyclic_small,
)
from .dynamics import IntegrationError
from .fourier import TorusMap, average, band_limited, lowpass, shift
from .frame import FrameData, FrameError, build_frame, reduced_rhs, split_blocks, torsion_average
from .solution import TorusSolution, flow_map

FRAME_VALIDITY = 1e-3
COND_MAX = 1e12
LAMBDA_UNIT_GAP = 1e-6
ETA3_QUADRATIC = 1e2


class NewtonError(RuntimeError):
    """A Newton step could not be carried out."""


class RefineError(RuntimeError):
    def __init__(self, msg, history, sol=None, reason="refine_diverged"):
        super().__init__(msg)
        self.history = history
        self.sol = sol
        self.reason = reason


@dataclass
class ErrorReport:
    E_K: list
    E_W: list
    err_K: float
    err_W: float
    flows: list = field(default=None, repr=False)


def segment_flows(sol: TorusSolution, model, **kw):
    """Flow every node of every segment for T/m; extra keywords go to the integrator."""
    t = sol.T / sol.m
    out = []
    for i, K in enumerate(sol.K):
        try:
            out.append(flow_map(model, K, t, sol.epsilon, M=True, **kw))
        except IntegrationError as exc:
            raise IntegrationError(f"segment {i}: {exc}") from exc
    return out


def invariance_errors(sol: TorusSolution, model, flows=None) -> ErrorReport:
    if flows is None:
        flows = segment_flows(sol, model)
    m = sol.m
    a, b = sol.rot.scaled(1.0 / m).angles()
    lam_m = sol.lam_m
    EK, EW = [], []
    for i in range(m):
        j = (i + 1) % m
        f = flows[i]
        EK.append(f.z - shift(sol.K[j], a, b).nodal())
        MW = np.einsum("bij,bj->bi", f.M, sol.W[i].nodal())
        EW.append(MW - lam_m * shift(sol.W[j], a, b).nodal())
    err_K = max(float(np.max(np.abs(e))) for e in EK)
    err_W = max(float(np.max(np.abs(e))) for e in EW)
    return ErrorReport(EK, EW, err_K, err_W, flows)


def _maps(spec, arrays):
    return [TorusMap.from_nodal(spec, x) for x in arrays]


def _apply_frames(frames, xis):
    return [np.einsum("bij,bj->bi", f.P, x) for f, x in zip(frames, xis)]


# --- block solvers ----------------------------------------------------------------------


def solve_torus_system(sol, frames: list[FrameData], etas, eta3_tol=1e-7, free_T=False, quadratic=True):
    """Solve the triangular system of a torus correction (or K-tangent).

    Returns (xi per segment as nodal arrays, delta T, info).  With ``quadratic`` the
    third-block average may also be of the order of |eta|^2, as for a Newton residual;
    tangents need it to vanish outright.
    """
    spec, n, m = sol.spec, sol.n, sol.m
    k = n - 1
    rot_m = sol.rot.scaled(1.0 / m)
    lam_m = sol.lam_m
    blocks = [split_blocks(e, n) for e in etas]
    e1 = _maps(spec, [b[0] for b in blocks])
    e2 = _maps(spec, [b[1] for b in blocks])
    e3 = _maps(spec, [b[2] for b in blocks])
    e4 = _maps(spec, [b[3] for b in blocks])
    size = max(float(np.max(np.abs(e))) for e in etas)
    scale = 1.0 + size

    xi2 = solve_cyclic_nonsmall(e2, lam_m, 1.0, rot_m)
    xi4 = solve_cyclic_nonsmall(e4, 1.0 / lam_m, 1.0, rot_m)

    avg3 = average(cyclic_small_rhs(e3, rot_m))
    # the average is only quadratically small in the error
    tol3 = eta3_tol * scale + (ETA3_QUADRATIC * size**2 if quadratic else 0.0)
    if np.any(np.abs(avg3) > tol3):
        raise AverageError(f"average of the third block {avg3} exceeds {tol3:.3g}")
    e3 = [e - TorusMap.constant(spec, avg3 / m) for e in e3]
    xi3t = solve_cyclic_small(e3, rot_m, 0.0, avg_tol=np.inf)

    S1 = [f.S1 for f in frames]
    r1 = [e1[i].nodal() - np.einsum("bij,bj->bi", S1[i], xi3t[i].nodal()) for i in range(m)]
    rhs = sum(r.mean(axis=0) for r in r1)
    A = torsion_average(frames)
    dT = 0.0
    e_hat = np.zeros(k)
    e_hat[k - 1] = 1.0
    if free_T:
        # the action-like component of the constant stays fixed, T absorbs the rest
        Msys = np.column_stack([A[:, 1:], e_hat])
    else:
        Msys = A
    cond = np.linalg.cond(Msys)
    if not np.isfinite(cond) or cond > COND_MAX:
        raise NewtonError(f"averaged torsion is singular (condition {cond:.3e})")
    sol_c = np.linalg.solve(Msys, rhs)
    if free_T:
        c = np.r_[0.0, sol_c[:-1]]
        dT = float(sol_c[-1])
    else:
        c = sol_c
    e1c = [
        TorusMap.from_nodal(spec, r1[i] - S1[i] @ c - e_hat * (dT / m)) for i in range(m)
    ]
    xi1 = solve_cyclic_small(e1c, rot_m, 0.0, avg_tol=1e-9 * scale)
    xis = [
        np.concatenate([xi1[i].nodal(), xi2[i].nodal(), xi3t[i].nodal() + c, xi4[i].nodal()], axis=1)
        for i in range(m)
    ]
    return xis, dT, {"eta3_avg": avg3, "xi3_avg": c}


def solve_bundle_system(sol, frames: list[FrameData], etas):
    """Solve the triangular system of a bundle correction (or W-tangent).

    Returns (xi per segment as nodal arrays, change of the per-segment multiplier).
    """
    spec, n, m = sol.spec, sol.n, sol.m
    rot_m = sol.rot.scaled(1.0 / m)
    lam_m = sol.lam_m
    if abs(abs(lam_m) - 1.0) < LAMBDA_UNIT_GAP:
        raise NewtonError(f"multiplier {sol.lam} is too close to the unit circle")
    blocks = [split_blocks(e, n) for e in etas]
    e1 = [b[0] for b in blocks]
    e2 = _maps(spec, [b[1] for b in blocks])
    e3 = _maps(spec, [b[2] for b in blocks])
    e4 = _maps(spec, [b[3] for b in blocks])
    size = max(float(np.max(np.abs(e))) for e in etas)
    scale = 1.0 + size

    xi3 = solve_cyclic_nonsmall(e3, 1.0, lam_m, rot_m)
    xi4 = solve_cyclic_nonsmall(e4, 1.0 / lam_m, lam_m, rot_m)
    r1 = [
        TorusMap.from_nodal(spec, e1[i] - np.einsum("bij,bj->bi", frames[i].S1, xi3[i].nodal()))
        for i in range(m)
    ]
    xi1 = solve_cyclic_nonsmall(r1, 1.0, lam_m, rot_m)
    dlam_m = -sum(float(average(e)[0]) for e in e2) / m
    e2s = [(e + TorusMap.constant(spec, [dlam_m])) * (1.0 / lam_m) for e in e2]
    xi2 = solve_cyclic_small(e2s, rot_m, 0.0, avg_tol=1e-9 * scale)
    xis = [
        np.concatenate([xi1[i].nodal(), xi2[i].nodal(), xi3[i].nodal(), xi4[i].nodal()], axis=1)
        for i in range(m)
    ]
    return xis, dlam_m


def _lam_from_root(lam_m: float, m: int, sign: float) -> float:
    if m == 1:
        return lam_m
    if lam_m <= 0:
        raise NewtonError(f"per-segment multiplier became non-positive ({lam_m})")
    return math.copysign(lam_m**m, sign)


# --- Newton steps ---------------------------------------------------------------------


def _check_validity(rep: ErrorReport):
    # the bundle error has no natural scale (|W| is free), so only E^K is gated
    err = rep.err_K
    if not np.isfinite(err) or err > FRAME_VALIDITY:
        raise FrameError(f"invariance error {err:.3e} above the frame validity threshold {FRAME_VALIDITY:g}")


def newton_torus_step(sol, model, frames, report: ErrorReport, eta3_tol=1e-7, free_T=False):
    """One correction of every K_i; returns (new solution, info)."""
    _check_validity(report)
    etas = [reduced_rhs(frames[i], report.E_K[i], model) for i in range(sol.m)]
    xis, dT, info = solve_torus_system(sol, frames, etas, eta3_tol=eta3_tol, free_T=free_T)
    dK = _apply_frames(frames, xis)
    K = [band_limited(sol.K[i] + TorusMap.from_nodal(sol.spec, dK[i])) for i in range(sol.m)]
    rot = sol.rot
    if free_T and dT != 0.0:
        if model.ell and not model.is_autonomous(sol.epsilon):
            raise NewtonError("the flying time can only be freed for autonomous systems")
        T = rot.T + dT
        rot = RotationData(rot.omega, model.alpha_hat * T, T, rot.gamma, rot.tau)
    info["dT"] = dT
    info["step"] = max(float(np.max(np.abs(d))) for d in dK)
    return sol.with_(K=K, rot=rot), info


def newton_bundle_step(sol, model, frames, report: ErrorReport):
    """One correction of every W_i and of the multiplier; returns (new solution, info)."""
    _check_validity(report)
    etas = [reduced_rhs(frames[i], report.E_W[i], model) for i in range(sol.m)]
    xis, dlam_m = solve_bundle_system(sol, frames, etas)
    dW = _apply_frames(frames, xis)
    W = [band_limited(sol.W[i] + TorusMap.from_nodal(sol.spec, dW[i])) for i in range(sol.m)]
    lam = _lam_from_root(sol.lam_m + dlam_m, sol.m, sol.lam)
    return sol.with_(W=W, lam=lam), {"dlam_m": dlam_m}


# --- iteration ---------------------------------------------------------------------------


@dataclass
class RefineResult:
    sol: TorusSolution
    n_it: int
    history: list
    report: ErrorReport


def _filtered(maps, r_f):
    return maps if r_f is None else [lowpass(f, r_f) for f in maps]


def refine(
    sol: TorusSolution,
    model,
    eps_K: float = 1e-9,
    eps_W: float = 1e-5,
    n_max: int = 10,
    free_T: bool = False,
    r_f: float | None = None,
    eta3_tol: float | None = None,
    log=None,
) -> RefineResult:
    """Alternate torus and bundle steps until both invariance errors are below tolerance."""
    if eps_K <= 0 or eps_W <= 0:
        raise ValueError("tolerances must be positive")
    eta3_tol = 1e2 * eps_K if eta3_tol is None else eta3_tol
    history = []
    try:
        rep = invariance_errors(sol, model)
    except (IntegrationError, ValueError) as exc:
        raise RefineError(f"initial evaluation failed: {exc}", history, sol, "integration_failure") from exc
    history.append((rep.err_K, rep.err_W))
    it = 0
    while not (rep.err_K < eps_K and rep.err_W < eps_W):
        if it >= n_max:
            raise RefineError(
                f"no convergence after {n_max} iterations; history {history}", history, sol, "max_iterations"
            )
        try:
            frames = build_frame(sol, model, [f.M for f in rep.flows])
            sol, info = newton_torus_step(sol, model, frames, rep, eta3_tol=eta3_tol, free_T=free_T)
            sol = sol.with_(K=_filtered(sol.K, r_f))
            rep = invariance_errors(sol, model)
            frames = build_frame(sol, model, [f.M for f in rep.flows])
            sol, binfo = newton_bundle_step(sol, model, frames, rep)
            sol = sol.with_(W=_filtered(sol.W, r_f))
            rep = invariance_errors(sol, model, rep.flows)
        except AverageError as exc:
            raise RefineError(str(exc), history, sol, "average_check") from exc
        except (FrameError, NewtonError) as exc:
            raise RefineError(str(exc), history, sol, "frame_or_torsion") from exc
        except IntegrationError as exc:
            raise RefineError(str(exc), history, sol, "integration_failure") from exc
        except ValueError as exc:
            reason = "near_resonance" if "resonant" in str(exc) else "invalid_state"
            raise RefineError(str(exc), history, sol, reason) from exc
        it += 1
        history.append((rep.err_K, rep.err_W))
        if log is not None:
            log(it, rep.err_K, rep.err_W, sol, info, binfo)
        if not (np.isfinite(rep.err_K) and np.isfinite(rep.err_W)):
            raise RefineError("non-finite invariance error", history, sol, "refine_diverged")
    return RefineResult(sol, it, history, rep)


__all__ = [
    "ErrorReport",
    "NewtonError",
    "RefineError",
    "RefineResult",
    "TorusSolution",
    "invariance_errors",
    "newton_bundle_step",
    "newton_torus_step",
    "refine",
    "segment_flows",
    "solve_bundle_system",
    "solve_torus_system",
]
