"""Adapted symplectic frames along generating tori.

For each shooting segment the frame is P = (L | L B + N) with
L = (D_theta K, zgeo, W), N = J L (L^T G L)^(-1) and B solving two
non-small cohomological equations that kill the off-diagonal torsion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cohomology import solve_cyclic_nonsmall
from .dynamics import omega0
from .fourier import TorusMap, derivative, shift
from .solution import TorusSolution, node_phases

COND_MAX = 1e12


class FrameError(RuntimeError):
    pass


@dataclass
class FrameData:
    L: np.ndarray  # (B, 2n, n)
    N_hat: np.ndarray  # (B, 2n, n)
    P: np.ndarray  # (B, 2n, 2n)
    P_next: np.ndarray  # frame of the next segment at the shifted nodes
    K_next: np.ndarray  # next segment's torus at the shifted nodes
    S_hat: np.ndarray  # (B, n, n)
    B: np.ndarray  # (B, n, n)
    S1: np.ndarray  # (B, n-1, n-1)
    S1_avg: np.ndarray
    lam_m: float
    cond_max: float

    @property
    def Lambda(self) -> np.ndarray:
        n = self.L.shape[2]
        return np.diag(np.r_[np.ones(n - 1), self.lam_m])


def _phases(spec, model, offset):
    ph = node_phases(spec, offset)
    if model.ell and not spec.d_phi:
        ph = np.full((spec.size, model.ell), offset)
    return ph


def zgeo_field(K: TorusMap, model, rot, eps: float, phase_offset: float = 0.0) -> np.ndarray:
    """X_H(K, phi) - D_phi K alpha_hat at the nodes, shape (N1*N2, 2n)."""
    X = model.X(K.nodal(), _phases(K.spec, model, phase_offset), eps)
    if K.spec.d_phi and model.ell:
        X = X - derivative(K, "phi").nodal() * rot.alpha_hat[0]
    return X


def _subframe(K, DK, W, model, rot, eps, offset):
    cols = []
    if K.spec.d_theta:
        cols.append(DK.nodal())
    cols.append(zgeo_field(K, model, rot, eps, offset))
    cols.append(W.nodal())
    return np.stack(cols, axis=2)


def _normal(L, K_nodes, model):
    G = model.G(K_nodes)
    GK = np.einsum("bji,bjk,bkl->bil", L, G, L)
    cond = np.linalg.cond(GK)
    worst = float(np.max(cond))
    if not np.isfinite(worst) or worst > COND_MAX:
        i = int(np.nanargmax(np.where(np.isfinite(cond), cond, np.inf)))
        raise FrameError(f"frame metric singular at node {i}: condition {worst:.3e}")
    JL = np.einsum("bij,bjk->bik", model.J(K_nodes), L)
    N = np.linalg.solve(GK, np.swapaxes(JL, 1, 2))
    return np.swapaxes(N, 1, 2), worst


def _frame(L, N, B):
    return np.concatenate([L, np.einsum("bij,bjk->bik", L, B) + N], axis=2)


def build_frame(sol: TorusSolution, model, monodromies) -> list[FrameData]:
    """Frames for every segment; ``monodromies[i]`` is D_z flow_{T/m} at the nodes of K_i."""
    m = sol.m
    spec = sol.spec
    n = sol.n
    rot_m = sol.rot.scaled(1.0 / m)
    a, b = rot_m.angles()
    eps = sol.epsilon
    lam_m = sol.lam_m

    DK = [derivative(k, "theta") if spec.d_theta else None for k in sol.K]
    Ls, Ns, conds = [], [], []
    for i in range(m):
        L = _subframe(sol.K[i], DK[i], sol.W[i], model, sol.rot, eps, 0.0)
        N, c = _normal(L, sol.K[i].nodal(), model)
        Ls.append(L)
        Ns.append(N)
        conds.append(c)
    Lr, Nr, Kr = [], [], []
    for i in range(m):
        j = (i + 1) % m
        Ks = shift(sol.K[j], a, b)
        DKs = shift(DK[j], a, b) if spec.d_theta else None
        Ws = shift(sol.W[j], a, b)
        L = _subframe(Ks, DKs, Ws, model, sol.rot, eps, b)
        N, c = _normal(L, Ks.nodal(), model)
        Lr.append(L)
        Nr.append(N)
        Kr.append(Ks.nodal())
        conds.append(c)

    S_hat = [
        np.einsum("bji,bjk,bkl,blm->bim", Nr[i], model.Omega(Kr[i]), monodromies[i], Ns[i]) for i in range(m)
    ]
    k = n - 1
    S2 = [TorusMap.from_nodal(spec, -s[:, :k, k]) for s in S_hat]
    S4 = [TorusMap.from_nodal(spec, -s[:, k:, k]) for s in S_hat]
    B2 = solve_cyclic_nonsmall(S2, 1.0, 1.0 / lam_m, rot_m)
    B4 = solve_cyclic_nonsmall(S4, lam_m, 1.0 / lam_m, rot_m)

    def bmat(b2, b4):
        Bm = np.zeros((spec.size, n, n))
        Bm[:, :k, :k] = np.eye(k)
        Bm[:, :k, k] = b2.nodal()
        Bm[:, k, :k] = b2.nodal()
        Bm[:, k, k] = b4.nodal()[:, 0]
        return Bm

    Bs = [bmat(B2[i], B4[i]) for i in range(m)]
    Bnext = [bmat(shift(B2[(i + 1) % m], a, b), shift(B4[(i + 1) % m], a, b)) for i in range(m)]
    out = []
    for i in range(m):
        S1 = S_hat[i][:, :k, :k]
        out.append(
            FrameData(
                L=Ls[i],
                N_hat=Ns[i],
                P=_frame(Ls[i], Ns[i], Bs[i]),
                P_next=_frame(Lr[i], Nr[i], Bnext[i]),
                K_next=Kr[i],
                S_hat=S_hat[i],
                B=Bs[i],
                S1=S1,
                S1_avg=S1.mean(axis=0),
                lam_m=lam_m,
                cond_max=max(conds),
            )
        )
    return out


def approx_inverse(P: np.ndarray, K_nodes: np.ndarray, model) -> np.ndarray:
    """-Omega0 P^T Omega(K) at every node."""
    Om0 = omega0(P.shape[1] // 2)
    return -np.einsum("ij,bkj,bkl->bil", Om0, P, model.Omega(K_nodes))


def reduced_rhs(frame: FrameData, E: np.ndarray, model) -> np.ndarray:
    """eta = Omega0 P_next^T Omega(K_next) E, i.e. minus the approximate inverse applied to E."""
    return -np.einsum("bij,bj->bi", approx_inverse(frame.P_next, frame.K_next, model), E)


def torsion_average(frames: list[FrameData]) -> np.ndarray:
    return sum(f.S1_avg for f in frames)


def split_blocks(eta: np.ndarray, n: int):
    """Split nodal (B, 2n) into blocks of sizes n-1, 1, n-1, 1."""
    k = n - 1
    return eta[:, :k], eta[:, k : k + 1], eta[:, n : n + k], eta[:, n + k :]


def reduced_matrix(frame: FrameData) -> np.ndarray:
    """The target triangular form ((Lambda, S), (0, Lambda^-T)) at every node."""
    B, n, _ = frame.B.shape
    out = np.zeros((B, 2 * n, 2 * n))
    Lam = frame.Lambda
    out[:, :n, :n] = Lam
    out[:, n:, n:] = np.linalg.inv(Lam).T
    out[:, : n - 1, n : 2 * n - 1] = frame.S1
    return out


__all__ = [
    "FrameData",
    "FrameError",
    "zgeo_field",
    "build_frame",
    "approx_inverse",
    "reduced_rhs",
    "torsion_average",
    "split_blocks",
    "reduced_matrix",
]
