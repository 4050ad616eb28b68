"""Post-processing of converged tori: lifting, Poincare sections, resonances and validation."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .cohomology import cyclic_small_rhs
from .dynamics import IntegrationError, flow_batch, omega0, primitive_and_moments
from .fourier import GridSpec, TorusMap, average, derivative, shift
from .frame import build_frame, reduced_matrix, reduced_rhs, split_blocks, zgeo_field
from .newton import invariance_errors
from .solution import TorusSolution, advance_segment, flow_map, node_phases

SECTION_TOL = 1e-10
NORMAL_CLOSURE_TOL = 1e-6

# --- lifting ---------------------------------------------------------------------------


@dataclass
class LiftedTorus:
    theta_d: float
    K: TorusMap
    W: TorusMap


def lift_generated_torus(sol: TorusSolution, theta_d, model) -> list[LiftedTorus]:
    """Sample the full torus and its bundle at the given values of the flow angle.

    Khat(theta, theta_d, phi) = flow_{theta_d T}(K(theta - theta_d omega, phi - theta_d alpha)),
    What carries the normalisation exp(-theta_d T chi).
    """
    out = []
    for td in np.atleast_1d(np.asarray(theta_d, dtype=float)):
        k, w = advance_segment(model, sol.K[0], sol.W[0], sol.lam, sol.rot, sol.epsilon, float(td))
        out.append(LiftedTorus(float(td), k, w))
    return out


def lifted_points(lifts: list[LiftedTorus]) -> np.ndarray:
    """Rows (theta_d, theta, phi, z...) for every node of every lifted sample."""
    rows = []
    for L in lifts:
        th, ph = L.K.spec.nodes()
        z = L.K.nodal()
        rows.append(np.column_stack([np.full(len(z), L.theta_d), th.reshape(-1), ph.reshape(-1), z]))
    return np.vstack(rows)


# --- Poincare sections -----------------------------------------------------------------


@dataclass
class SectionResult:
    points: np.ndarray  # (P, 5): x1, x2, p1, p2, p3
    states: np.ndarray  # (P, 2n): full crossing states
    node: np.ndarray  # grid node index of each point
    times: np.ndarray  # flight time to the crossing
    skipped: int
    theta_d: float
    spec: GridSpec


def _refine_crossing(model, z, ph, eps, tol, max_iter=30):
    """Newton on the flight time until |x3| <= tol, starting from states just below the section."""
    tau = np.zeros(len(z))
    zc = z.copy()
    for _ in range(max_iter):
        X = model.X(zc, ph + model.alpha_hat * tau[:, None], eps)
        bad = np.abs(zc[:, 2]) > tol
        if not np.any(bad):
            return zc, tau
        tau[bad] -= zc[bad, 2] / X[bad, 2]
        zc[bad] = flow_batch(model, z[bad], ph[bad], tau[bad], eps).z
    if np.any(np.abs(zc[:, 2]) > tol):
        raise IntegrationError(f"crossing refinement stalled at |x3| = {np.max(np.abs(zc[:, 2])):.2e}")
    return zc, tau


def poincare_section(sol: TorusSolution, model, theta_d: float = 0.5, t_cap: float | None = None, tol=SECTION_TOL) -> SectionResult:
    """First upward crossing of x3 = 0 (with p3 > 0) from every node of the lifted torus.

    Crossings are bracketed by integrator steps and refined by Newton on the flight time.
    Nodes without a crossing before ``t_cap`` (default 2T) are skipped and counted.
    """
    lift = lift_generated_torus(sol, [theta_d], model)[0]
    spec = lift.K.spec
    Z = lift.K.nodal()
    ph = node_phases(spec) if model.ell and spec.d_phi else np.zeros((spec.size, model.ell))
    t_cap = 2.0 * sol.T if t_cap is None else float(t_cap)
    eps = sol.epsilon

    on = (np.abs(Z[:, 2]) <= tol) & (Z[:, 5] > 0)
    idx_on = np.where(on)[0]
    rest = np.where(~on)[0]
    pts, nodes, times = [Z[idx_on]], [idx_on], [np.zeros(len(idx_on))]
    skipped = 0
    if rest.size:
        r = flow_batch(model, Z[rest], ph[rest], t_cap, eps, event=2)
        crossed, ct, cy = r.crossing
        skipped = int(np.sum(~crossed))
        hit = np.where(crossed)[0]
        if hit.size:
            d = Z.shape[1]
            zs = cy[hit, :d]
            phs = ph[rest[hit]] + model.alpha_hat * ct[hit, None]
            zc, tau = _refine_crossing(model, zs, phs, eps, tol)
            keep = zc[:, 5] > 0
            skipped += int(np.sum(~keep))
            pts.append(zc[keep])
            nodes.append(rest[hit][keep])
            times.append((ct[hit] + tau)[keep])
    Zs = np.vstack(pts)
    order = np.argsort(np.concatenate(nodes), kind="stable")
    return SectionResult(
        points=Zs[order][:, [0, 1, 3, 4, 5]],
        states=Zs[order],
        node=np.concatenate(nodes)[order],
        times=np.concatenate(times)[order],
        skipped=skipped,
        theta_d=theta_d,
        spec=spec,
    )


# reflection (x1, x2, p1, p2, p3) -> (x1, -x2, -p1, p2, p3): time reversal combined with z -> -z
SECTION_REFLECTION = np.array([1.0, -1.0, -1.0, 1.0, 1.0])


class _ClosedCurve:
    """Trigonometric interpolant of uniformly sampled points on a closed curve."""

    def __init__(self, P, n_dense=4096):
        N = len(P)
        self.coef = np.fft.fft(P, axis=0) / N
        k = np.fft.fftfreq(N, 1.0 / N)
        k[N // 2] = 0.0
        self.k = k
        self.psi = np.arange(n_dense) / n_dense
        self.dense = self(self.psi)

    def __call__(self, psi, der=0):
        e = np.exp(2j * np.pi * np.outer(np.atleast_1d(psi), self.k)) * (2j * np.pi * self.k) ** der
        return (e @ self.coef).real

    def distance(self, q, newton=8):
        i = int(np.argmin(np.sum((self.dense - q) ** 2, axis=1)))
        s = self.psi[i]
        for _ in range(newton):
            c, c1, c2 = self(s)[0], self(s, 1)[0], self(s, 2)[0]
            h = c1 @ c1 + c2 @ (c - q)
            if h <= 0:
                break
            s -= (c1 @ (c - q)) / h
        return float(np.linalg.norm(self(s)[0] - q))


def section_symmetry_defect(sec: SectionResult, reflection=SECTION_REFLECTION) -> float:
    """Largest distance from a reflected section point to the section curve.

    Points of one phase column are ordered by the flow-invariant angle, so they
    sample a closed curve uniformly; the curve is fitted spectrally per column.
    """
    spec = sec.spec
    worst = 0.0
    for j in range(spec.N2):
        col = np.arange(spec.N1) * spec.N2 + j
        sel = np.isin(sec.node, col)
        if sel.sum() != spec.N1:
            raise ValueError("symmetry check needs every node of a phase column on the section")
        P = sec.points[sel][np.argsort(sec.node[sel])]
        curve = _ClosedCurve(P)
        for q in P * reflection:
            worst = max(worst, curve.distance(q))
    return worst


# --- resonances ------------------------------------------------------------------------


@dataclass(frozen=True)
class ResonanceHit:
    kappa: tuple
    order: int
    value: float
    rho: float
    T: float


def canonical_kappa(kappa) -> tuple:
    """Divide by the gcd and make the first non-zero entry positive."""
    k = [int(v) for v in kappa]
    g = math.gcd(*k)
    if g == 0:
        raise ValueError("kappa must be non-zero")
    k = [v // g for v in k]
    first = next(v for v in k if v)
    return tuple(-v for v in k) if first < 0 else tuple(k)


def primitive_kappas(p_max: int) -> np.ndarray:
    if p_max < 1:
        raise ValueError("p_max must be at least 1")
    out = set()
    rng = range(-p_max, p_max + 1)
    for k in itertools.product(rng, rng, rng):
        if 0 < sum(map(abs, k)) <= p_max:
            out.add(canonical_kappa(k))
    return np.array(sorted(out, key=lambda k: (sum(map(abs, k)), k)), dtype=int)


def resonance_value(kappa, rho, T):
    k1, k2, k3 = kappa
    return k1 * rho / T + k2 / T + k3 / (2 * np.pi)


def resonance_scan(rho, T, p_max: int = 10, eps_R: float = 1e-4) -> list[ResonanceHit]:
    """All gcd-reduced kappa with |kappa|_1 <= p_max and |R_kappa(rho, T)| < eps_R.

    ``rho`` and ``T`` may be scalars or equally shaped arrays of samples.
    """
    rho_a, T_a = np.broadcast_arrays(np.asarray(rho, dtype=float), np.asarray(T, dtype=float))
    ks = primitive_kappas(p_max)
    hits = []
    for r, t in zip(rho_a.reshape(-1), T_a.reshape(-1)):
        R = ks[:, 0] * r / t + ks[:, 1] / t + ks[:, 2] / (2 * np.pi)
        for i in np.where(np.abs(R) < eps_R)[0]:
            k = tuple(int(v) for v in ks[i])
            hits.append(ResonanceHit(k, int(np.abs(ks[i]).sum()), float(R[i]), float(r), float(t)))
    return hits


def scan_solutions(sols, p_max: int = 10, eps_R: float = 1e-4) -> list[ResonanceHit]:
    return resonance_scan([s.rot.omega[0] for s in sols], [s.T for s in sols], p_max, eps_R)


# --- validation ------------------------------------------------------------------------


@dataclass
class Check:
    name: str
    value: float
    tol: float
    passed: bool
    detail: dict = field(default_factory=dict)


@dataclass
class ValidationReport:
    checks: list
    err_K: float
    err_W: float
    chi: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def get(self, name) -> Check:
        return next(c for c in self.checks if c.name == name)

    def to_dict(self):
        return {"passed": self.passed, "err_K": self.err_K, "err_W": self.err_W, "chi": self.chi, "checks": [asdict(c) for c in self.checks]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=float)

    def to_text(self) -> str:
        lines = [f"err_K={self.err_K:.3e} err_W={self.err_W:.3e} chi={self.chi:.10g}"]
        for c in self.checks:
            lines.append(f"{'PASS' if c.passed else 'FAIL'} {c.name:<16} {c.value:.3e} (tol {c.tol:.1e})")
        return "\n".join(lines)


def _check(name, value, tol, **detail):
    value = float(value)
    return Check(name, value, float(tol), bool(np.isfinite(value) and value <= tol), detail)


def _col_sup(A):
    """Sup over nodes of every column norm, shape (B, rows, cols) -> (cols,)."""
    return np.max(np.linalg.norm(A, axis=1), axis=0)


def _gram_scaled(A, Om):
    """|A^T Omega A| entrywise over sup column norms, maximised over nodes."""
    G = np.einsum("bji,bjk,bkl->bil", A, Om, A)
    s = _col_sup(A)
    return np.max(np.abs(G), axis=0) / np.outer(s, s)


def check_isotropy(sol, model) -> Check:
    """Fibre tori and the generated torus pull the symplectic form back to zero."""
    worst, fib = 0.0, 0.0
    for K in sol.K:
        Kn = K.nodal()
        Om = model.Omega(Kn)
        DK = derivative(K, "theta").nodal()[:, :, None]
        Z = zgeo_field(K, model, sol.rot, sol.epsilon)[:, :, None]
        fib = max(fib, float(np.max(_gram_scaled(DK, Om))))
        A = np.concatenate([DK, Z], axis=2)
        worst = max(worst, float(np.max(_gram_scaled(A, Om))))
    return _check("isotropy", worst, 1e-8, fibre=fib)


def check_lagrangian(sol, model, frames) -> Check:
    names = ["DK", "X", "W"]
    entries = {}
    for f, K in zip(frames, sol.K):
        G = _gram_scaled(f.L, model.Omega(K.nodal()))
        for i in range(3):
            for j in range(i, 3):
                key = f"{names[i]}.{names[j]}"
                entries[key] = max(entries.get(key, 0.0), float(G[i, j]))
    return _check("lagrangian", max(entries.values()), 1e-7, **entries)


def check_symplectic(sol, model, frames) -> Check:
    worst = 0.0
    for f, K in zip(frames, sol.K):
        P = f.P
        n = P.shape[1] // 2
        R = np.einsum("bji,bjk,bkl->bil", P, model.Omega(K.nodal()), P) - omega0(n)
        s = _col_sup(P)
        worst = max(worst, float(np.max(np.max(np.abs(R), axis=0) / np.outer(s, s))))
    return _check("symplectic", worst, 1e-8)


def check_reducibility(sol, model, frames, flows, err_K, err_W) -> Check:
    """Block-triangular reduction of the transported frame.

    The Lagrangian columns obey M L - L_next Lambda = (D E_K, O(E_K), E_W), so their
    residual is held to the invariance errors.  The normal columns close only up to
    the spectral truncation of the torsion equations; that closure is measured
    relative to the size of the reduced matrix.
    """
    tangent, normal = 0.0, 0.0
    for f, fl in zip(frames, flows):
        n = f.L.shape[2]
        L_next = f.P_next[:, :, :n]
        R = np.einsum("bij,bjk->bik", fl.M, f.L) - L_next @ f.Lambda
        tangent = max(tangent, float(np.max(np.linalg.norm(R, axis=1))))
        target = reduced_matrix(f)
        A = np.linalg.solve(f.P_next, np.einsum("bij,bjk->bik", fl.M, f.P))
        normal = max(normal, float(np.max(np.abs(A - target)[:, :, n:]) / np.max(np.abs(target))))
    tol = 10 * (err_K + err_W)
    ok = tangent <= tol and normal <= NORMAL_CLOSURE_TOL
    return Check("reducibility", tangent, tol, bool(ok), {"normal_closure": normal, "normal_tol": NORMAL_CLOSURE_TOL})


def _stencil_gradient(fun, Z, PH, h):
    """Fourth-order central gradients of fun(z, phi) -> (values...) at every row of Z.

    All stencil points go to ``fun`` as one batch; returns shape (B, d, ...).
    """
    B, d = Z.shape
    offs = np.array([2.0, 1.0, -1.0, -2.0]) * h
    wts = np.array([-1.0, 8.0, -8.0, 1.0]) / (12 * h)
    pts = np.repeat(Z[:, None, None, :], d, axis=1).repeat(4, axis=2)
    idx = np.arange(d)
    pts[:, idx, :, idx] += offs
    phs = np.repeat(PH[:, None, None, :], d, axis=1).repeat(4, axis=2)
    vals = np.asarray(fun(pts.reshape(-1, d), phs.reshape(-1, PH.shape[1])))
    vals = vals.reshape((B, d, 4) + vals.shape[1:])
    return np.einsum("bdk...,k->bd...", vals, wts)


def _sample_nodes(sol, n_nodes, seed):
    rng = np.random.default_rng(seed)
    idx = rng.choice(sol.spec.size, size=min(n_nodes, sol.spec.size), replace=False)
    Z = sol.K[0].nodal()[idx]
    ph = node_phases(sol.spec)[idx] if sol.spec.d_phi else np.zeros((len(idx), 0))
    return Z, ph


def check_primitive(sol, model, n_nodes=16, seed=0, h=1e-5) -> Check:
    """D_z p_t = a(phi_t)^T D phi_t - a(z)^T, left side by finite differences."""
    t = sol.T / sol.m
    Z, PH = _sample_nodes(sol, n_nodes, seed)
    r = flow_batch(model, Z, PH, t, sol.epsilon, M=True)
    rhs = np.einsum("bi,bij->bj", model.a(r.z), r.M) - model.a(Z)
    lhs = _stencil_gradient(lambda w, p: primitive_and_moments(w, p, t, sol.epsilon, model)[0], Z, PH, h)
    scale = np.maximum(1.0, np.max(np.abs(rhs), axis=1))
    worst = float(np.max(np.max(np.abs(lhs - rhs), axis=1) / scale))
    return _check("primitive", worst, 1e-7, nodes=len(Z))


def check_moment_map(sol, model, n_nodes=4, seed=1, h=1e-5) -> Check:
    """Generators of the deformation against moment-map gradients.

    With Q(z) the integral of dH/deps along the orbit, M^T Omega d_eps phi_t = grad Q,
    and likewise for the phase with the integral of dH/dphi.
    """
    t = sol.T / sol.m
    eps = sol.epsilon
    Z, PH = _sample_nodes(sol, n_nodes, seed)
    r = flow_batch(model, Z, PH, t, eps, M=True, phi=bool(model.ell), deps=True)
    MtOm = np.einsum("bji,bjk->bik", r.M, model.Omega(r.z))

    def moments(w, p):
        _, me, mp = primitive_and_moments(w, p, t, eps, model)
        return np.column_stack([np.atleast_1d(me), np.reshape(mp, (len(w), -1))])

    grads = _stencil_gradient(moments, Z, PH, h)  # (B, d, 1 + ell)

    def rel(gen, grad):
        return float(np.max(np.max(np.abs(gen - grad), axis=1) / np.maximum(1.0, np.max(np.abs(gen), axis=1))))

    worst_e = rel(np.einsum("bij,bj->bi", MtOm, r.P_eps), grads[:, :, 0])
    worst_p = 0.0
    for c in range(model.ell):
        worst_p = max(worst_p, rel(np.einsum("bij,bj->bi", MtOm, r.P_phi[:, :, c]), grads[:, :, 1 + c]))
    # time generator: the vector field is Omega^-1 grad H at the end point
    ph_t = PH + model.alpha_hat * t
    X = model.X(r.z, ph_t, eps)
    g = model.dH_dz(r.z, ph_t, eps)
    worst_t = rel(np.einsum("bij,bj->bi", model.Omega(r.z), X), g) if len(g) else 0.0
    worst = max(worst_e, worst_p, worst_t)
    return _check("moment_map", worst, 1e-7, eps=worst_e, phi=worst_p, time=worst_t)


def _eta3_average(sol, model, E, frames):
    n, m = sol.n, sol.m
    etas = [reduced_rhs(frames[i], E[i], model) for i in range(m)]
    e3 = [TorusMap.from_nodal(sol.spec, split_blocks(e, n)[2]) for e in etas]
    return average(cyclic_small_rhs(e3, sol.rot.scaled(1.0 / m))), max(float(np.max(np.abs(e))) for e in etas)


def check_zero_average(sol, model) -> Check:
    """Third-block average of the parameter tangent right-hand side vanishes."""
    flows = [flow_map(model, k, sol.T / sol.m, sol.epsilon, M=True, deps=True) for k in sol.K]
    frames = build_frame(sol, model, [f.M for f in flows])
    avg, size = _eta3_average(sol, model, [f.P_eps for f in flows], frames)
    return _check("zero_average", float(np.max(np.abs(avg))), 1e-8, rhs_size=size)


def _smooth_field(spec, c, seed, k_max=3):
    rng = np.random.default_rng(seed)
    kk, jj = spec.wavenumbers()
    mask = (np.abs(kk) <= k_max) & (np.abs(jj) <= k_max)
    coef = (rng.standard_normal((c,) + spec.shape) + 1j * rng.standard_normal((c,) + spec.shape)) * mask
    g = np.fft.ifft2(coef, axes=(1, 2)).real
    return TorusMap(spec, grid=g / np.max(np.abs(g)))


def check_quadratic_average(sol, model, deltas=(1e-3, 1e-4, 1e-5), seed=2) -> Check:
    """The Newton third-block average of a perturbed torus scales like the perturbation squared.

    The perturbation is relative to the torus amplitude.
    """
    amp = max(float(np.max(np.abs(k.grid - average(k)[:, None, None]))) for k in sol.K)
    fields = [_smooth_field(sol.spec, k.c, seed + i) for i, k in enumerate(sol.K)]
    vals = []
    for d in deltas:
        pert = sol.with_(K=[k + (d * amp) * f for k, f in zip(sol.K, fields)])
        rep = invariance_errors(pert, model)
        frames = build_frame(pert, model, [f.M for f in rep.flows])
        avg, _ = _eta3_average(pert, model, rep.E_K, frames)
        vals.append(float(np.max(np.abs(avg))))
    x, y = np.log(np.asarray(deltas)), np.log(np.asarray(vals))
    slope = float(np.polyfit(x, y, 1)[0])
    return Check("quadratic_average", slope, 0.3, bool(abs(slope - 2.0) <= 0.3), {"deltas": list(deltas), "averages": vals})


def check_floquet(sol, model, flows) -> Check:
    """Multiplier from the transported bundle against lambda, and chi = log|lambda| / T."""
    m = sol.m
    a, b = sol.rot.scaled(1.0 / m).angles()
    est = 1.0
    for i in range(m):
        Wn = shift(sol.W[(i + 1) % m], a, b).nodal()
        MW = np.einsum("bij,bj->bi", flows[i].M, sol.W[i].nodal())
        est *= float(np.sum(MW * Wn) / np.sum(Wn * Wn))
    rel = abs(est - sol.lam) / abs(sol.lam)
    chi_gap = abs(math.exp(sol.chi * sol.T) - abs(sol.lam)) / abs(sol.lam)
    return _check("floquet", max(rel, chi_gap), 1e-6, lam_transport=est, chi=sol.chi)


def validate(sol: TorusSolution, model, n_nodes: int = 16, seed: int = 0) -> ValidationReport:
    """Run every geometric and dynamical consistency check on a converged torus."""
    rep = invariance_errors(sol, model)
    checks = []

    def guarded(name, fn, tol):
        try:
            checks.append(fn())
        except Exception as exc:  # a failed check must still yield a report
            checks.append(Check(name, float("nan"), tol, False, {"error": f"{type(exc).__name__}: {exc}"}))

    frames = None
    try:
        frames = build_frame(sol, model, [f.M for f in rep.flows])
    except Exception as exc:
        checks.append(Check("frame", float("nan"), 0.0, False, {"error": f"{type(exc).__name__}: {exc}"}))
    guarded("isotropy", lambda: check_isotropy(sol, model), 1e-8)
    if frames is not None:
        guarded("lagrangian", lambda: check_lagrangian(sol, model, frames), 1e-7)
        guarded("symplectic", lambda: check_symplectic(sol, model, frames), 1e-8)
        guarded(
            "reducibility",
            lambda: check_reducibility(sol, model, frames, rep.flows, rep.err_K, rep.err_W),
            10 * (rep.err_K + rep.err_W),
        )
    guarded("primitive", lambda: check_primitive(sol, model, n_nodes, seed), 1e-7)
    guarded("zero_average", lambda: check_zero_average(sol, model), 1e-8)
    guarded("quadratic_average", lambda: check_quadratic_average(sol, model), 0.3)
    guarded("moment_map", lambda: check_moment_map(sol, model), 1e-7)
    guarded("floquet", lambda: check_floquet(sol, model, rep.flows), 1e-6)
    return ValidationReport(checks, rep.err_K, rep.err_W, sol.chi)


__all__ = [
    "Check",
    "LiftedTorus",
    "ResonanceHit",
    "SECTION_REFLECTION",
    "SectionResult",
    "ValidationReport",
    "canonical_kappa",
    "lift_generated_torus",
    "lifted_points",
    "poincare_section",
    "primitive_kappas",
    "resonance_scan",
    "resonance_value",
    "scan_solutions",
    "section_symmetry_defect",
    "validate",
]
