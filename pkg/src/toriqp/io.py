"""TorusFileV1: a magic line, a one-line JSON header and a little-endian float64 payload."""

from __future__ import annotations

import json
import zlib

import numpy as np

from .cohomology import RotationData
from .ertbp import ErtbpModel
from .fourier import GridSpec, TorusMap
from .oscillators import OscillatorSaddle
from .solution import TorusSolution

MAGIC = b"TORIQP 1\n"
_DTYPE = np.dtype("<f8")


class TorusFileError(ValueError):
    """Unreadable torus file; ``offset`` is the byte position of the problem."""

    def __init__(self, msg, offset):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


def make_model(name: str, params: dict):
    if name == "ertbp":
        return ErtbpModel(params.get("mu", ErtbpModel().mu))
    if name == "oscillators":
        return OscillatorSaddle(**params)
    raise ValueError(f"unknown model {name!r}")


def model_of(sol: TorusSolution):
    return make_model(sol.model, sol.model_params)


def _payload(sol: TorusSolution) -> bytes:
    parts = []
    for k, w in zip(sol.K, sol.W):
        parts.append(np.ascontiguousarray(k.grid, dtype=_DTYPE).tobytes())
        parts.append(np.ascontiguousarray(w.grid, dtype=_DTYPE).tobytes())
    return b"".join(parts)


def header_of(sol: TorusSolution, payload: bytes) -> dict:
    spec = sol.spec
    h = {
        "model": sol.model,
        "mu": sol.model_params.get("mu"),
        "e": sol.epsilon,
        "T": sol.T,
        "omega": sol.rot.omega.tolist(),
        "alpha": sol.rot.alpha.tolist(),
        "lambda": sol.lam,
        "m": sol.m,
        "n": sol.n,
        "d_theta": spec.d_theta,
        "d_phi": spec.d_phi,
        "N1": spec.N1,
        "N2": spec.N2,
        "h_label": None if sol.h_label != sol.h_label else sol.h_label,
        "checksum": zlib.crc32(payload) & 0xFFFFFFFF,
    }
    if sol.model != "ertbp":
        h["params"] = sol.model_params
    return h


def dumps(sol: TorusSolution) -> bytes:
    payload = _payload(sol)
    head = json.dumps(header_of(sol, payload), separators=(",", ":"), allow_nan=False)
    return MAGIC + head.encode() + b"\n" + payload


def save(sol: TorusSolution, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(sol))


def read_header(data: bytes):
    """Return (header dict, payload offset)."""
    if not data.startswith(MAGIC):
        raise TorusFileError("magic line mismatch", 0)
    end = data.find(b"\n", len(MAGIC))
    if end < 0:
        raise TorusFileError("unterminated header line", len(MAGIC))
    try:
        head = json.loads(data[len(MAGIC) : end])
    except json.JSONDecodeError as exc:
        raise TorusFileError(f"malformed header: {exc.msg}", len(MAGIC) + exc.pos) from exc
    missing = [k for k in ("model", "e", "T", "omega", "alpha", "lambda", "m", "n", "d_theta", "d_phi", "N1", "N2", "checksum") if k not in head]
    if missing:
        raise TorusFileError(f"header lacks {missing}", len(MAGIC))
    return head, end + 1


def loads(data: bytes) -> TorusSolution:
    head, off = read_header(data)
    m, n, N1, N2 = (int(head[k]) for k in ("m", "n", "N1", "N2"))
    comp = 2 * n * N1 * N2
    expected = m * 2 * comp * _DTYPE.itemsize
    payload = data[off:]
    if len(payload) < expected:
        raise TorusFileError(f"truncated payload: {len(payload)} of {expected} bytes", off + len(payload))
    if len(payload) > expected:
        raise TorusFileError(f"{len(payload) - expected} trailing bytes after payload", off + expected)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    if crc != int(head["checksum"]):
        raise TorusFileError(f"checksum mismatch: header {head['checksum']}, payload {crc}", off)
    spec = GridSpec(int(head["d_theta"]), int(head["d_phi"]), N1, N2)
    vals = np.frombuffer(payload, dtype=_DTYPE).astype(float).reshape(m, 2, 2 * n, N1, N2)
    K = [TorusMap(spec, grid=vals[i, 0]) for i in range(m)]
    W = [TorusMap(spec, grid=vals[i, 1]) for i in range(m)]
    params = head.get("params") or ({"mu": head["mu"]} if head.get("mu") is not None else {})
    h = head.get("h_label")
    return TorusSolution(
        epsilon=float(head["e"]),
        K=K,
        W=W,
        lam=float(head["lambda"]),
        rot=RotationData(head["omega"], head["alpha"], float(head["T"])),
        model=head["model"],
        model_params=params,
        h_label=float("nan") if h is None else float(h),
    )


def load(path) -> TorusSolution:
    with open(path, "rb") as fh:
        return loads(fh.read())


def info(path) -> dict:
    """Header fields without decoding the payload."""
    with open(path, "rb") as fh:
        data = fh.read()
    return read_header(data)[0]


__all__ = ["MAGIC", "TorusFileError", "dumps", "info", "load", "loads", "make_model", "model_of", "read_header", "save"]
