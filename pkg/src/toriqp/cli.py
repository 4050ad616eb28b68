"""Command-line front end.

Exit codes: 0 success, 1 numerical failure (one JSON line with the reason on
stderr), 2 usage or input error.  Settings resolve as flags, then a config file
of ``key = value`` lines, then ``TORIQP_*`` environment variables, then defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time

import numpy as np

from . import io
from .analysis import lift_generated_torus, lifted_points, poincare_section, resonance_scan, validate
from .continuation import ContinuationConfig, ContinuationError, RunLog, continue_to
from .dynamics import IntegrationError, set_threads
from .ertbp import MU_SUN_EARTH, ErtbpModel
from .frame import FrameError
from .newton import NewtonError, RefineError, refine
from .seed import SeedError, linear_torus_seed, nobilize, orbit_from_state, vertical_lyapunov


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    def __init__(self, reason, message):
        super().__init__(message)
        self.reason = reason


# --- configuration ---------------------------------------------------------------------

DEFAULTS = {
    "mu": MU_SUN_EARTH,
    "eps_k": 1e-9,
    "eps_w": 1e-5,
    "eps_t": 1e-9,
    "r_t": 0.2,
    "r_f": 1 / 3,
    "n_max": 6,
    "n_eps": 3,
    "n_des": 4,
    "n_t": 2,
    "max_grid": 1024,
    "de0": 1e-3,
    "target_e": 0.0,
    "s": 1e-3,
    "n1": 64,
    "n2": 16,
    "m": 4,
    "pmax": 10,
    "eps_r": 1e-4,
    "theta_d": 0.5,
    "threads": 0,
}
_TYPES = {k: type(v) for k, v in DEFAULTS.items()}


def read_config_file(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            k, v = (p.strip() for p in line.split("=", 1))
            out[k.lower().replace("-", "_")] = v
    return out


def _coerce(key, value):
    kind = _TYPES.get(key, str)
    try:
        return kind(float(value)) if kind is int else kind(value)
    except ValueError as exc:
        raise UsageError(f"invalid value {value!r} for {key}") from exc


def resolve(flags: dict, config_path=None, env=None) -> dict:
    """Merge settings: flags > config file > TORIQP_ environment > defaults."""
    env = os.environ if env is None else env
    out = dict(DEFAULTS)
    for k in DEFAULTS:
        v = env.get("TORIQP_" + k.upper())
        if v is not None:
            out[k] = _coerce(k, v)
    if config_path:
        for k, v in read_config_file(config_path).items():
            if k not in DEFAULTS:
                raise UsageError(f"unknown config key {k!r}")
            out[k] = _coerce(k, v)
    for k, v in flags.items():
        if v is not None:
            out[k] = v
    return out


# --- helpers ---------------------------------------------------------------------------


def _load(path):
    try:
        return io.load(path)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc
    except io.TorusFileError as exc:
        raise UsageError(str(exc)) from exc


def _emit(obj):
    print(json.dumps(obj, default=float))


def _write_csv(path, header, rows):
    fh = sys.stdout if path in (None, "-") else open(path, "w", newline="")
    try:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    finally:
        if fh is not sys.stdout:
            fh.close()


# --- subcommands -----------------------------------------------------------------------


def cmd_seed_po(a, cfg):
    model = ErtbpModel(cfg["mu"])
    if (a.vz is None) == (a.rho is None):
        raise UsageError("give exactly one of --vz or --rho")
    rho = None if a.rho is None else (nobilize(a.rho) if a.nobilize else a.rho)
    po = vertical_lyapunov(model, vz=a.vz, rho=rho)
    data = {
        "mu": model.mu,
        "z0": po.z0.tolist(),
        "T": po.T_po,
        "lambda": po.lam_u,
        "rho": po.rho,
        "h": po.h,
        "vz": po.vz,
    }
    with open(a.output, "w") as fh:
        json.dump(data, fh, indent=2)
    _emit({k: data[k] for k in ("T", "lambda", "rho", "h")})


def cmd_seed_torus(a, cfg):
    try:
        with open(a.orbit) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read orbit file {a.orbit}: {exc}") from exc
    model = ErtbpModel(data.get("mu", cfg["mu"]))
    po = orbit_from_state(model, np.asarray(data["z0"]), float(data["T"]), float(data.get("vz", math.nan)))
    omega = a.omega
    if omega is None and a.nobilize:
        omega = nobilize(po.rho)
    sol = linear_torus_seed(po, s=cfg["s"], omega=omega, N1=cfg["n1"], N2=cfg["n2"], m=cfg["m"], model=model)
    io.save(sol, a.output)
    _emit({"omega": float(sol.rot.omega[0]), "T": sol.T, "lambda": sol.lam, "m": sol.m})


def cmd_refine(a, cfg):
    sol = _load(a.input)
    model = io.model_of(sol)
    res = refine(
        sol,
        model,
        eps_K=cfg["eps_k"],
        eps_W=cfg["eps_w"],
        n_max=cfg["n_max"],
        free_T=a.free_T,
        r_f=cfg["r_f"] if cfg["r_f"] > 0 else None,
    )
    io.save(res.sol, a.output or a.input)
    _emit({"iterations": res.n_it, "err_K": res.report.err_K, "err_W": res.report.err_W, "T": res.sol.T, "lambda": res.sol.lam})


def cmd_continue(a, cfg):
    sol = _load(a.input)
    model = io.model_of(sol)
    ccfg = ContinuationConfig(
        eps_K=cfg["eps_k"],
        eps_W=cfg["eps_w"],
        eps_t=cfg["eps_t"],
        r_t=cfg["r_t"],
        r_f=cfg["r_f"],
        n_max=cfg["n_max"],
        n_eps=cfg["n_eps"],
        n_des=cfg["n_des"],
        n_t=cfg["n_t"],
        max_grid=cfg["max_grid"],
        d_eps0=cfg["de0"],
        target=cfg["target_e"],
    )
    out = a.output or a.input
    log_fh = open(a.log, "w", newline="") if a.log else None
    log = RunLog(log_fh) if log_fh else None

    def on_step(rec, s):
        if log:
            log(rec)
        if a.checkpoint:
            io.save(s, out)

    t0 = time.perf_counter()
    try:
        res = continue_to(sol, model, ccfg, on_step=on_step)
    except ContinuationError as exc:
        io.save(exc.last, out)
        raise NumericalFailure(exc.reason, f"{exc} (last accepted eps={exc.last.epsilon:.10g} saved to {out})") from exc
    finally:
        if log_fh:
            log_fh.close()
    io.save(res.sol, out)
    s = res.sol
    _emit({"e": s.epsilon, "steps": len(res.records), "N1": s.spec.N1, "N2": s.spec.N2, "lambda": s.lam, "seconds": time.perf_counter() - t0})


def cmd_section(a, cfg):
    sol = _load(a.input)
    model = io.model_of(sol)
    sec = poincare_section(sol, model, theta_d=cfg["theta_d"], t_cap=a.t_cap)
    _write_csv(a.output, ["x1", "x2", "p1", "p2", "p3"], sec.points)
    print(json.dumps({"points": len(sec.points), "skipped": sec.skipped}), file=sys.stderr)


def cmd_resonances(a, cfg):
    if a.inputs:
        sols = [_load(p) for p in a.inputs]
        rho = [s.rot.omega[0] for s in sols]
        T = [s.T for s in sols]
    elif a.rho is not None and a.T is not None:
        rho, T = a.rho, a.T
    else:
        raise UsageError("give --rho and --T, or torus files")
    hits = resonance_scan(rho, T, p_max=cfg["pmax"], eps_R=cfg["eps_r"])
    _write_csv(a.output, ["rho", "T", "k1", "k2", "k3", "order", "R"], [(h.rho, h.T, *h.kappa, h.order, h.value) for h in hits])


def cmd_validate(a, cfg):
    sol = _load(a.input)
    model = io.model_of(sol)
    polish = None
    if not a.no_polish:
        res = refine(sol, model, eps_K=a.polish_k, eps_W=a.polish_w, n_max=4, r_f=cfg["r_f"])
        sol = res.sol
        polish = res.n_it
    rep = validate(sol, model)
    if a.json:
        d = rep.to_dict()
        d["polish_iterations"] = polish
        print(json.dumps(d, indent=2, default=float))
    else:
        if polish is not None:
            print(f"polished with {polish} Newton iteration(s)")
        print(rep.to_text())
    if not rep.passed:
        failed = [c.name for c in rep.checks if not c.passed]
        raise NumericalFailure("validation_failed", f"failed checks: {failed}")


def cmd_lift(a, cfg):
    sol = _load(a.input)
    model = io.model_of(sol)
    td = np.arange(a.samples) / a.samples
    pts = lifted_points(lift_generated_torus(sol, td, model))
    n = sol.n
    head = ["theta_d", "theta", "phi"] + [f"x{i + 1}" for i in range(n)] + [f"p{i + 1}" for i in range(n)]
    _write_csv(a.output, head, pts)


def cmd_info(a, cfg):
    try:
        head = io.info(a.input)
    except OSError as exc:
        raise UsageError(f"cannot read {a.input}: {exc.strerror}") from exc
    except io.TorusFileError as exc:
        raise UsageError(str(exc)) from exc
    for k, v in head.items():
        print(f"{k}: {v}")


# --- parser ----------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="toriqp", description="Partially hyperbolic invariant tori by flow-map parameterization.")
    p.add_argument("--threads", type=int, default=None, help="worker threads for trajectory batches (0: all cores)")
    p.add_argument("--config", default=None, help="file with 'key = value' lines")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("seed-po", help="vertical Lyapunov orbit around L1")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--mu", type=float)
    s.add_argument("--vz", type=float, help="initial vertical speed")
    s.add_argument("--rho", type=float, help="target rotation of the unit-circle multiplier")
    s.add_argument("--nobilize", action="store_true", help="replace --rho by the nearest simple noble number")
    s.set_defaults(fn=cmd_seed_po)

    s = sub.add_parser("seed-torus", help="linear torus around a periodic orbit")
    s.add_argument("orbit")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--s", type=float, help="torus amplitude")
    s.add_argument("--omega", type=float)
    s.add_argument("--nobilize", action="store_true", help="nobilize the orbit's rotation number")
    s.add_argument("--n1", type=int)
    s.add_argument("--n2", type=int)
    s.add_argument("--m", type=int, help="shooting segments")
    s.set_defaults(fn=cmd_seed_torus)

    s = sub.add_parser("refine", help="Newton refinement of a torus file")
    s.add_argument("input")
    s.add_argument("-o", "--output")
    s.add_argument("--eps-k", dest="eps_k", type=float)
    s.add_argument("--eps-w", dest="eps_w", type=float)
    s.add_argument("--n-max", dest="n_max", type=int)
    s.add_argument("--r-f", dest="r_f", type=float, help="lowpass ratio after each iterate (0 disables)")
    s.add_argument("--free-T", dest="free_T", action="store_true", help="adjust the flying time (autonomous only)")
    s.set_defaults(fn=cmd_refine)

    s = sub.add_parser("continue", help="continuation in the eccentricity")
    s.add_argument("input")
    s.add_argument("-o", "--output")
    s.add_argument("--target-e", dest="target_e", type=float)
    s.add_argument("--de0", type=float, help="initial step")
    s.add_argument("--log", help="CSV run log")
    s.add_argument("--checkpoint", action="store_true", help="save after every accepted step")
    for flag, kind in (("eps-k", float), ("eps-w", float), ("eps-t", float), ("r-t", float), ("r-f", float), ("n-max", int), ("n-eps", int), ("n-des", int), ("n-t", int), ("max-grid", int)):
        s.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=kind)
    s.set_defaults(fn=cmd_continue)

    s = sub.add_parser("section", help="Poincare section x3 = 0, p3 > 0")
    s.add_argument("input")
    s.add_argument("-o", "--output")
    s.add_argument("--theta-d", dest="theta_d", type=float, help="flow angle of the starting samples")
    s.add_argument("--t-cap", dest="t_cap", type=float, help="flight-time cap per node (default 2T)")
    s.set_defaults(fn=cmd_section)

    s = sub.add_parser("resonances", help="resonance scan")
    s.add_argument("inputs", nargs="*")
    s.add_argument("--rho", type=float)
    s.add_argument("--T", type=float)
    s.add_argument("--pmax", type=int)
    s.add_argument("--eps", dest="eps_r", type=float)
    s.add_argument("-o", "--output")
    s.set_defaults(fn=cmd_resonances)

    s = sub.add_parser("validate", help="geometric and dynamical consistency checks")
    s.add_argument("input")
    s.add_argument("--json", action="store_true")
    s.add_argument("--no-polish", action="store_true", help="skip the polishing Newton steps")
    s.add_argument("--polish-k", type=float, default=1e-12)
    s.add_argument("--polish-w", type=float, default=1e-10)
    s.set_defaults(fn=cmd_validate)

    s = sub.add_parser("lift", help="sample the full torus in configuration and phase space")
    s.add_argument("input")
    s.add_argument("-o", "--output")
    s.add_argument("--samples", type=int, default=16, help="number of flow-angle samples")
    s.set_defaults(fn=cmd_lift)

    s = sub.add_parser("info", help="print the header of a torus file")
    s.add_argument("input")
    s.set_defaults(fn=cmd_info)
    return p


_FAILURES = (RefineError, SeedError, IntegrationError, FrameError, NewtonError, ArithmeticError, np.linalg.LinAlgError)


def _fail(reason, msg, code):
    print(json.dumps({"reason": reason, "message": msg}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        a = build_parser().parse_args(argv)
        flags = {k: v for k, v in vars(a).items() if k in DEFAULTS}
        cfg = resolve(flags, a.config)
        set_threads(cfg["threads"])
        a.fn(a, cfg)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except NumericalFailure as exc:
        return _fail(exc.reason, str(exc), 1)
    except RefineError as exc:
        return _fail(exc.reason, str(exc), 1)
    except _FAILURES as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    except ValueError as exc:
        return _fail("invalid_input", str(exc), 2)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
