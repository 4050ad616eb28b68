"""Periodic maps on low-dimensional tori, sampled on a uniform grid.

A :class:`TorusMap` holds ``c`` real components on the torus
``T^{d_theta} x T^{d_phi}`` (each at most one-dimensional).  Values live on an
``N1 x N2`` grid with nodes ``theta_k = k/N1`` and ``phi_j = j/N2``; absent
axes have size one.  Spectral coefficients use numpy's FFT bin order and are
normalised so that ``f(theta, phi) = sum c_kj exp(2 pi i (k theta + j phi))``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

MAX_GRID = 1024


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GridSpec:
    d_theta: int
    d_phi: int
    N1: int
    N2: int

    def __post_init__(self):
        if self.d_theta not in (0, 1) or self.d_phi not in (0, 1):
            raise ValueError("only 0 or 1 angles per axis are supported")
        for d, N, name in ((self.d_theta, self.N1, "N1"), (self.d_phi, self.N2, "N2")):
            if d == 0 and N != 1:
                raise ValueError(f"{name} must be 1 for an absent axis, got {N}")
            if d == 1 and (N < 4 or not _is_pow2(N)):
                raise ValueError(f"{name} must be a power of two >= 4, got {N}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.N1, self.N2)

    @property
    def size(self) -> int:
        return self.N1 * self.N2

    def nodes(self):
        """Grid coordinates (theta, phi), each of shape (N1, N2)."""
        th = np.arange(self.N1) / self.N1
        ph = np.arange(self.N2) / self.N2
        return np.meshgrid(th, ph, indexing="ij")

    def wavenumbers(self):
        """Integer Fourier indices (k, j) in FFT order, each of shape (N1, N2)."""
        k = np.fft.fftfreq(self.N1, 1.0 / self.N1).round().astype(int)
        j = np.fft.fftfreq(self.N2, 1.0 / self.N2).round().astype(int)
        return np.meshgrid(k, j, indexing="ij")

    def nyquist_mask(self):
        kk, jj = self.wavenumbers()
        mask = np.zeros(self.shape, dtype=bool)
        if self.N1 > 1:
            mask |= kk == -self.N1 // 2
        if self.N2 > 1:
            mask |= jj == -self.N2 // 2
        return mask

    def with_sizes(self, N1: int | None = None, N2: int | None = None) -> "GridSpec":
        return GridSpec(self.d_theta, self.d_phi, N1 or self.N1, N2 or self.N2)


class TorusMap:
    """Immutable multi-component map with lazily synchronised grid/spectral data."""

    __slots__ = ("spec", "c", "_grid", "_coef", "_lock")

    def __init__(self, spec: GridSpec, grid=None, coef=None):
        if grid is None and coef is None:
            raise ValueError("need grid values or spectral coefficients")
        self.spec = spec
        self._lock = threading.Lock()
        self._grid = None
        self._coef = None
        if grid is not None:
            g = np.array(grid, dtype=float)
            if g.ndim == 2:
                g = g[None]
            if g.shape[1:] != spec.shape:
                raise ValueError(f"grid shape {g.shape[1:]} does not match {spec.shape}")
            if not np.all(np.isfinite(g)):
                bad = np.argwhere(~np.isfinite(g))[0]
                raise ValueError(f"non-finite grid value at component/node {tuple(bad)}")
            g.flags.writeable = False
            self._grid = g
        else:
            cf = np.array(coef, dtype=complex)
            if cf.ndim == 2:
                cf = cf[None]
            if cf.shape[1:] != spec.shape:
                raise ValueError(f"coefficient shape {cf.shape[1:]} does not match {spec.shape}")
            if not np.all(np.isfinite(cf)):
                raise ValueError("non-finite spectral coefficient")
            cf = cf.copy()
            cf[:, spec.nyquist_mask()] = 0.0
            cf.flags.writeable = False
            self._coef = cf
        self.c = (self._grid if self._grid is not None else self._coef).shape[0]

    @classmethod
    def from_function(cls, spec: GridSpec, fun) -> "TorusMap":
        th, ph = spec.nodes()
        return cls(spec, grid=np.asarray(fun(th, ph), dtype=float))

    @classmethod
    def zeros(cls, spec: GridSpec, c: int) -> "TorusMap":
        return cls(spec, grid=np.zeros((c,) + spec.shape))

    @classmethod
    def constant(cls, spec: GridSpec, values) -> "TorusMap":
        v = np.atleast_1d(np.asarray(values, dtype=float))
        return cls(spec, grid=np.broadcast_to(v[:, None, None], (v.size,) + spec.shape))

    @property
    def grid(self) -> np.ndarray:
        if self._grid is None:
            with self._lock:
                if self._grid is None:
                    n = self.spec.size
                    g = np.fft.ifft2(self._coef * n, axes=(1, 2)).real
                    g.flags.writeable = False
                    self._grid = g
        return self._grid

    @property
    def coef(self) -> np.ndarray:
        if self._coef is None:
            with self._lock:
                if self._coef is None:
                    cf = np.fft.fft2(self._grid, axes=(1, 2)) / self.spec.size
                    cf[:, self.spec.nyquist_mask()] = 0.0
                    cf.flags.writeable = False
                    self._coef = cf
        return self._coef

    def nodal(self) -> np.ndarray:
        """Grid values reshaped to (N1*N2, c), one row per node."""
        return self.grid.reshape(self.c, -1).T

    @classmethod
    def from_nodal(cls, spec: GridSpec, values) -> "TorusMap":
        v = np.asarray(values, dtype=float)
        return cls(spec, grid=v.T.reshape((v.shape[1],) + spec.shape))

    def component(self, idx) -> "TorusMap":
        idx = np.atleast_1d(idx)
        if self._grid is not None:
            return TorusMap(self.spec, grid=self._grid[idx])
        return TorusMap(self.spec, coef=self._coef[idx])

    def __add__(self, other):
        if isinstance(other, TorusMap):
            _same(self, other)
            return TorusMap(self.spec, grid=self.grid + other.grid)
        return TorusMap(self.spec, grid=self.grid + np.asarray(other)[..., None, None])

    def __sub__(self, other):
        if isinstance(other, TorusMap):
            _same(self, other)
            return TorusMap(self.spec, grid=self.grid - other.grid)
        return TorusMap(self.spec, grid=self.grid - np.asarray(other)[..., None, None])

    def __mul__(self, a):
        return TorusMap(self.spec, grid=self.grid * a)

    __rmul__ = __mul__

    def __neg__(self):
        return TorusMap(self.spec, grid=-self.grid)

    def sup(self) -> float:
        return float(np.max(np.abs(self.grid))) if self.grid.size else 0.0

    def __repr__(self):
        s = self.spec
        return f"TorusMap(c={self.c}, N1={s.N1}, N2={s.N2})"


def _same(f: TorusMap, g: TorusMap):
    if f.spec != g.spec:
        raise ValueError(f"grid mismatch: {f.spec} vs {g.spec}")


def band_limited(f: TorusMap) -> TorusMap:
    """Same map with the grid replaced by its Nyquist-free interpolant."""
    return TorusMap(f.spec, coef=f.coef)


def stack(maps) -> TorusMap:
    maps = list(maps)
    for m in maps[1:]:
        _same(maps[0], m)
    return TorusMap(maps[0].spec, grid=np.concatenate([m.grid for m in maps]))


def to_spectral(f: TorusMap) -> TorusMap:
    f.coef
    return f


def to_grid(f: TorusMap) -> TorusMap:
    f.grid
    return f


def _phase(spec: GridSpec, a: float, b: float) -> np.ndarray:
    kk, jj = spec.wavenumbers()
    return np.exp(2j * np.pi * (kk * a + jj * b))


def shift(f: TorusMap, a: float = 0.0, b: float = 0.0) -> TorusMap:
    """Return f(theta + a, phi + b)."""
    a = float(a) if f.spec.d_theta else 0.0
    b = float(b) if f.spec.d_phi else 0.0
    if a == 0.0 and b == 0.0:
        return f
    return TorusMap(f.spec, coef=f.coef * _phase(f.spec, a, b))


def derivative(f: TorusMap, axis: str) -> TorusMap:
    kk, jj = f.spec.wavenumbers()
    if axis == "theta":
        if not f.spec.d_theta:
            raise ValueError("no theta axis in this grid")
        fac = 2j * np.pi * kk
    elif axis == "phi":
        if not f.spec.d_phi:
            raise ValueError("no phi axis in this grid")
        fac = 2j * np.pi * jj
    else:
        raise ValueError(f"unknown axis {axis!r}")
    return TorusMap(f.spec, coef=f.coef * fac)


def average(f: TorusMap) -> np.ndarray:
    return f.coef[:, 0, 0].real.copy()


def tail_norms(f: TorusMap, r_t: float):
    """Per-component l1 mass of the spectrum beyond r_t of each axis.

    Returns two arrays ``(t_theta, t_phi)`` of length ``c``.
    """
    if not 0.0 < r_t < 0.5:
        raise ValueError(f"tail factor must lie in (0, 1/2), got {r_t}")
    spec = f.spec
    kt = int(np.floor(r_t * spec.N1))
    jt = int(np.floor(r_t * spec.N2))
    kk, jj = spec.wavenumbers()
    ak, aj = np.abs(kk), np.abs(jj)
    mag = np.abs(f.coef)
    if spec.d_theta:
        m_th = (ak > kt) & ((aj < jt) if spec.d_phi else True)
        t_th = mag[:, m_th].sum(axis=1)
    else:
        t_th = np.zeros(f.c)
    if spec.d_phi:
        m_ph = (aj > jt) & ((ak < kt) if spec.d_theta else True)
        t_ph = mag[:, m_ph].sum(axis=1)
    else:
        t_ph = np.zeros(f.c)
    return t_th, t_ph


def lowpass(f: TorusMap, r_f: float) -> TorusMap:
    if not 0.25 <= r_f < 0.5:
        raise ValueError(f"filter factor must lie in [1/4, 1/2), got {r_f}")
    kk, jj = f.spec.wavenumbers()
    keep = (np.abs(kk) <= r_f * f.spec.N1) & (np.abs(jj) <= r_f * f.spec.N2)
    return TorusMap(f.spec, coef=np.where(keep, f.coef, 0.0))


def resample(f: TorusMap, N1: int, N2: int, max_size: int = MAX_GRID) -> TorusMap:
    """Zero-pad or truncate the spectrum onto an N1 x N2 grid."""
    if max(N1, N2) > max_size:
        raise ValueError(f"grid {N1}x{N2} exceeds the maximum size {max_size}")
    new = f.spec.with_sizes(N1, N2)
    old = f.spec
    out = np.zeros((f.c, N1, N2), dtype=complex)
    k_old = np.fft.fftfreq(old.N1, 1.0 / old.N1).round().astype(int)
    j_old = np.fft.fftfreq(old.N2, 1.0 / old.N2).round().astype(int)
    keep_k = np.abs(k_old) < min(old.N1, N1) / 2 if old.N1 > 1 else np.array([True])
    keep_j = np.abs(j_old) < min(old.N2, N2) / 2 if old.N2 > 1 else np.array([True])
    ik = np.where(keep_k)[0]
    ij = np.where(keep_j)[0]
    out[np.ix_(np.arange(f.c), k_old[ik] % N1, j_old[ij] % N2)] = f.coef[np.ix_(np.arange(f.c), ik, ij)]
    return TorusMap(new, coef=out)


def refine_grid(f: TorusMap, axis: str, factor: int = 2, max_size: int = MAX_GRID) -> TorusMap:
    if factor != 2:
        raise ValueError("only doubling is supported")
    s = f.spec
    if axis == "theta":
        if not s.d_theta:
            raise ValueError("no theta axis in this grid")
        return resample(f, 2 * s.N1, s.N2, max_size)
    if axis == "phi":
        if not s.d_phi:
            raise ValueError("no phi axis in this grid")
        return resample(f, s.N1, 2 * s.N2, max_size)
    raise ValueError(f"unknown axis {axis!r}")


def evaluate(f: TorusMap, theta, phi) -> np.ndarray:
    """Evaluate the trigonometric interpolant at arbitrary points.

    ``theta`` and ``phi`` broadcast together; result has shape (c, *points).
    """
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    th, ph = np.broadcast_arrays(theta, phi)
    kk, jj = f.spec.wavenumbers()
    ex = np.exp(2j * np.pi * (np.multiply.outer(th, kk) + np.multiply.outer(ph, jj)))
    return np.einsum("ckj,...kj->c...", f.coef, ex).real
