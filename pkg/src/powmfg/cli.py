"""Command-line entry point: ``powmfg <subcommand> [--config PATH] [--set key=value] ...``.

Every run writes its artifacts plus ``manifest.json`` into the output
directory (``--out``, else ``$MFG_POW_OUT``, else ``./out``).  Exit codes:
0 success, 2 configuration error, 3 solver failure, 4 I/O error.  Failures
also print a JSON error record on stderr and, when possible, write
``error.json``.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import os
import platform
import sys
import time
from contextlib import contextmanager
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import io as pio
from .common_noise import (
    PriceProcess,
    default_grids,
    drift_sign_violations,
    simulate_sde,
    solve_master_2d,
    target_curve,
)
from .core import Grid1D, ModelParams, ParameterError, SolverError, validate_params
from .det1d import (
    SolverOptions,
    default_grid,
    numerical_stationary_state,
    simulate_trajectory,
    solve_master_1d,
    stationary_report,
)
from .experiments import (
    DEFAULT_DELTAS,
    DEFAULT_LAMBDAS,
    argmax_profit_delta,
    load_hashrate_csv,
    pde_cross_check,
    sweep_delta,
    sweep_lambda,
    to_real_series,
)
from .obstacle import convergence_study, simulate_obstacle_trajectory, solve_obstacle
from .potential import DEFAULT_EPS, potential_check, solve_hjb
from .two_pop import (
    Grid2D,
    TwoPopParams,
    simulate_2pop,
    solve_2pop_noise,
    solve_system,
    stationary_state_2pop,
)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4

SUBCOMMANDS = (
    "solve1d",
    "stationary",
    "trajectory",
    "noise",
    "twopop",
    "twopop-noise",
    "obstacle",
    "penalized",
    "hjb-check",
    "sweep",
    "ingest",
)

# Every accepted key appears here; ``None`` means "derive a default".
DEFAULT_CONFIG: dict = {
    "model": {"r": 0.05, "delta": 0.2, "lambda": 1.0, "c": 0.02, "eps": 0.0},
    "grid": {"n": 4000, "k_max": None},
    "solver": {"tol": 1e-8, "max_iters": 500, "cfl": 0.5},
    "seed": 0,
    "trajectory": {"k0": 0.0, "horizon": 250.0, "dt": None, "method": "euler"},
    "price": {
        "ou": True,
        "kappa": 1.0,
        "mean": 0.5,
        "width": 6.0,
        "nu": 0.1,
        "p_min": None,
        "p_max": None,
        "drift_kind": "constant",
        "a": 0.0,
        "b": 0.0,
        "reward_kind": "exponential-capped",
        "cap": 5.0,
    },
    "noise": {"nK": 751, "nP": 41, "k_max": None, "k0": 0.0, "p0": None, "horizon": 10.0, "dt": None},
    "twopop": {
        "r1": 0.05,
        "r2": 0.05,
        "lam1": 1.0,
        "lam2": 1.0,
        "c1": 0.02,
        "c2": 0.3,
        "delta": 0.2,
        "eps": 0.0,
        "n": 151,
        "k_max": None,
        "k0": 1.0,
        "l0": 1.0,
        "horizon": 100.0,
        "dt": None,
    },
    "twopop_noise": {"n": 41, "k_max": None, "nP": 9, "lam2_form": "multiply"},
    "obstacle": {
        "etas": [1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
        "k0": [10.0, 100.0],
        "horizon": 10.0,
        "dt": None,
    },
    "hjb": {"eps": DEFAULT_EPS},
    "sweep": {"param": "delta", "values": None, "pde_check": False, "bracket": [0.05, 2.0]},
    "ingest": {"path": None, "delta": None},
}


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _merge(base: dict, extra: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(path, "unknown key")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(path, "expected an object")
            out[key] = _merge(base[key], val, path + ".")
        else:
            out[key] = val
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> dict:
    """``a.b.c=value``; the value is read as JSON when possible, else as a string."""
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    nested: dict = _parse_value(raw)
    for part in reversed(parts):
        nested = {part: nested}
    return _merge(cfg, nested)


def load_config(path: str | None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError("config", f"cannot read {path}: {e.strerror}") from None
        try:
            user = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"invalid JSON at line {e.lineno}: {e.msg}") from None
        if not isinstance(user, dict):
            raise ConfigError("config", "top level must be an object")
        cfg = _merge(cfg, user)
    for item in overrides:
        cfg = apply_override(cfg, item)
    return cfg


@contextmanager
def section(name: str):
    """Re-raise parameter errors with the config path of the offending field."""
    try:
        yield
    except ParameterError as e:
        field = e.field if e.field.startswith(name + ".") else f"{name}.{e.field}"
        raise ConfigError(field, str(e).split(": ", 1)[-1]) from None
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(name, str(e)) from None


def _num(cfg: dict, name: str, key: str, kind=float, allow_none=False):
    v = cfg[key]
    if v is None and allow_none:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{name}.{key}", f"expected a number, got {v!r}")
    v = kind(v)
    if kind is float and not math.isfinite(v):
        raise ConfigError(f"{name}.{key}", "must be finite")
    return v


def model_params(cfg) -> ModelParams:
    with section("model"):
        m = cfg["model"]
        p = ModelParams(**{("lam" if k == "lambda" else k): _num(m, "model", k) for k in m})
        return validate_params(p)


def solver_options(cfg) -> SolverOptions:
    with section("solver"):
        s = cfg["solver"]
        return SolverOptions(_num(s, "solver", "tol"), _num(s, "solver", "max_iters", int), _num(s, "solver", "cfl"))


def grid_1d(cfg, p: ModelParams) -> Grid1D:
    with section("grid"):
        g = cfg["grid"]
        n = _num(g, "grid", "n", int)
        k_max = _num(g, "grid", "k_max", allow_none=True)
        if k_max is not None and not k_max > 1.0 / p.c - p.eps:
            raise ConfigError("grid.k_max", f"must exceed 1/c - eps = {1.0 / p.c - p.eps}")
        return default_grid(p, n) if k_max is None else Grid1D(k_max, n)


def price_process(cfg) -> PriceProcess:
    with section("price"):
        c = cfg["price"]
        kw = {"reward_kind": c["reward_kind"], "cap": _num(c, "price", "cap")}
        if c["ou"]:
            return PriceProcess.ornstein_uhlenbeck(
                _num(c, "price", "kappa"), _num(c, "price", "mean"), _num(c, "price", "nu"), _num(c, "price", "width"), **kw
            )
        for key in ("p_min", "p_max"):
            if c[key] is None:
                raise ConfigError(f"price.{key}", "required when price.ou is false")
        return PriceProcess(
            nu=_num(c, "price", "nu"),
            p_min=_num(c, "price", "p_min"),
            p_max=_num(c, "price", "p_max"),
            drift_kind=c["drift_kind"],
            a=_num(c, "price", "a"),
            b=_num(c, "price", "b"),
            **kw,
        )


def two_pop_params(cfg) -> TwoPopParams:
    with section("twopop"):
        t = cfg["twopop"]
        keys = ("r1", "r2", "lam1", "lam2", "c1", "c2", "delta", "eps")
        return TwoPopParams(**{k: _num(t, "twopop", k) for k in keys})


def _manifest_versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"artifact": pkg, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


# --- subcommands -------------------------------------------------------------------
# each takes (cfg, out_dir, args) and returns a dict of diagnostics for the manifest


def cmd_stationary(cfg, out, args):
    p = model_params(cfg)
    rep = stationary_report(p)
    pio.write_json(out / "stationary.json", rep.to_dict())
    return {"k_star": rep.k_star}


def cmd_solve1d(cfg, out, args):
    p = model_params(cfg)
    g = grid_1d(cfg, p)
    u = solve_master_1d(p, g, solver_options(cfg))
    pio.write_csv(out / "value.csv", ("K", "U"), zip(g.nodes, u.values))
    k_num = numerical_stationary_state(u, p)
    summary = {
        "k_star_numerical": k_num,
        "k_star_closed_form": stationary_report(p).k_star,
        "residual_norm": u.residual_norm,
        "iterations": u.iterations,
        "n": g.n,
        "k_max": g.k_max,
    }
    pio.write_json(out / "solve1d.json", summary)
    return {"residual_norm": u.residual_norm, "iterations": u.iterations}


def cmd_trajectory(cfg, out, args):
    p = model_params(cfg)
    g = grid_1d(cfg, p)
    u = solve_master_1d(p, g, solver_options(cfg))
    t = cfg["trajectory"]
    with section("trajectory"):
        path = simulate_trajectory(
            p,
            u,
            _num(t, "trajectory", "k0"),
            _num(t, "trajectory", "horizon"),
            _num(t, "trajectory", "dt", allow_none=True),
            t["method"],
        )
    pio.write_csv(out / "trajectory.csv", ("t", "K"), path.rows())
    return {"residual_norm": u.residual_norm, "terminal_K": float(path.K[-1])}


def cmd_noise(cfg, out, args):
    p = model_params(cfg)
    pp = price_process(cfg)
    nc = cfg["noise"]
    with section("noise"):
        gK, gP = default_grids(p, pp, _num(nc, "noise", "nK", int), _num(nc, "noise", "nP", int))
        k_max = _num(nc, "noise", "k_max", allow_none=True)
        if k_max is not None:
            gK = Grid1D(k_max, gK.n)
    u = solve_master_2d(p, pp, (gK, gP), solver_options(cfg))
    curve = target_curve(u, p)
    pio.write_csv(
        out / "value2d.csv",
        ("K", "p", "U"),
        ((k, x, u.values[i, j]) for i, k in enumerate(gK.nodes) for j, x in enumerate(gP.nodes)),
    )
    pio.write_csv(out / "target_curve.csv", ("p", "k_star"), zip(curve.p_nodes, curve.k_star))
    with section("noise"):
        p0 = _num(nc, "noise", "p0", allow_none=True)
        p0 = 0.5 * (pp.p_min + pp.p_max) if p0 is None else p0
        path = simulate_sde(
            p,
            pp,
            u,
            _num(nc, "noise", "k0"),
            p0,
            _num(nc, "noise", "horizon"),
            _num(nc, "noise", "dt", allow_none=True),
            seed=int(cfg["seed"]),
        )
    pio.write_csv(out / "path.csv", ("t", "K", "p"), path.rows())
    viol = drift_sign_violations(path, curve, gK.h)
    pio.write_json(
        out / "noise.json",
        {
            "residual_norm": u.residual_norm,
            "iterations": u.iterations,
            "target_continuous": curve.is_continuous(),
            "drift_sign_violations": viol,
            "seed": int(cfg["seed"]),
        },
    )
    return {"residual_norm": u.residual_norm, "drift_sign_violations": viol}


def _pair_grid(t: dict, tp: TwoPopParams, name: str) -> Grid2D:
    with section(name):
        n = _num(t, name, "n", int)
        k_max = _num(t, name, "k_max", allow_none=True)
        return Grid2D(1.5 / min(tp.c1, tp.c2) if k_max is None else k_max, n)


def cmd_twopop(cfg, out, args):
    tp = two_pop_params(cfg)
    t = cfg["twopop"]
    g = _pair_grid(t, tp, "twopop")
    uv = solve_system(tp, g, solver_options(cfg))
    x = g.axis.nodes
    pio.write_csv(
        out / "pair.csv",
        ("K", "L", "U", "V"),
        ((x[i], x[j], uv.u_values[i, j], uv.v_values[i, j]) for i in range(g.n) for j in range(g.n)),
    )
    x0, y0 = stationary_state_2pop(tp, uv)
    pio.write_json(
        out / "twopop_stationary.json",
        {"x0": x0, "y0": y0, "residual_norm": uv.residual_norm, "iterations": uv.iterations, "params": tp.to_dict()},
    )
    with section("twopop"):
        path = simulate_2pop(
            tp, uv, _num(t, "twopop", "k0"), _num(t, "twopop", "l0"), _num(t, "twopop", "horizon"),
            _num(t, "twopop", "dt", allow_none=True),
        )
    pio.write_csv(out / "twopop_trajectory.csv", ("t", "K", "L"), path.rows())
    return {"residual_norm": uv.residual_norm, "x0": x0, "y0": y0}


def cmd_twopop_noise(cfg, out, args):
    tp = two_pop_params(cfg)
    pp = price_process(cfg)
    t = cfg["twopop_noise"]
    g = _pair_grid(t, tp, "twopop_noise")
    with section("twopop_noise"):
        nP = _num(t, "twopop_noise", "nP", int)
        sol, surf = solve_2pop_noise(tp, pp, g, nP, t["lam2_form"], SolverOptions(
            tol=max(solver_options(cfg).tol, 1e-6), max_iters=solver_options(cfg).max_iters
        ))
    x = g.axis.nodes
    ps = sol.gridP.nodes
    pio.write_csv(
        out / "pair_noise.csv",
        ("K", "L", "p", "U", "V"),
        (
            (x[i], x[j], ps[k], sol.u_values[i, j, k], sol.v_values[i, j, k])
            for i in range(g.n)
            for j in range(g.n)
            for k in range(nP)
        ),
    )
    pio.write_json(
        out / "target_surface.json",
        {
            "p": surf.p_nodes,
            "k_star": surf.k_star,
            "l_star": surf.l_star,
            "exchange_rate": sol.exchange,
            "lam2": sol.lam2,
            "continuous": surf.is_continuous(),
            "residual_norm": sol.residual_norm,
            "sweeps": sol.sweeps,
        },
    )
    return {"residual_norm": sol.residual_norm, "sweeps": sol.sweeps}


def cmd_obstacle(cfg, out, args):
    p = model_params(cfg)
    g = grid_1d(cfg, p)
    o = cfg["obstacle"]
    sol = solve_obstacle(p, g, solver_options(cfg))
    pio.write_csv(out / "obstacle.csv", ("K", "U"), zip(g.nodes, sol.u.values))
    with section("obstacle"):
        horizon = _num(o, "obstacle", "horizon")
        dt = _num(o, "obstacle", "dt", allow_none=True)
        for i, k0 in enumerate(o["k0"]):
            path = simulate_obstacle_trajectory(p, sol, float(k0), horizon, dt)
            pio.write_csv(out / f"obstacle_trajectory_{i}.csv", ("t", "K"), path.rows())
    pio.write_json(out / "obstacle.json", {"k_star": sol.k_star, "complementarity": sol.complementarity})
    return {"k_star": sol.k_star, "complementarity": sol.complementarity}


def cmd_penalized(cfg, out, args):
    p = model_params(cfg)
    g = grid_1d(cfg, p)
    with section("obstacle"):
        etas = [float(e) for e in cfg["obstacle"]["etas"]]
        rows, _sols, obst = convergence_study(p, etas, g, solver_options(cfg))
    pio.write_csv(
        out / "convergence.csv",
        ("eta", "k_star_eta", "k_star_numerical", "sup_gap"),
        ((r.eta, r.k_star_eta, r.k_star_numerical, r.sup_gap) for r in rows),
    )
    return {"obstacle_k_star": obst.k_star, "rows": len(rows)}


def cmd_hjb_check(cfg, out, args):
    with section("hjb"):
        eps = _num(cfg["hjb"], "hjb", "eps")
    p = model_params(cfg).replace(eps=eps)
    with section("model"):
        validate_params(p)
    g = grid_1d(cfg, p)
    o = solver_options(cfg)
    phi = solve_hjb(p, g, o)
    u = solve_master_1d(p, g, o)
    gap = potential_check(phi, u)
    grad = phi.gradient()
    pio.write_csv(
        out / "potential.csv",
        ("K", "Phi", "dPhi", "U", "gap"),
        (
            (g.nodes[i], phi.phi_values[i], grad[i - 1], u.values[i], abs(grad[i - 1] - u.values[i]))
            for i in range(1, g.n - 1)
        ),
    )
    pio.write_json(out / "hjb_check.json", {"gap": gap, "h": g.h, "gap_over_h": gap / g.h, "eps": eps})
    return {"gap": gap, "hjb_residual": phi.residual_norm}


def cmd_sweep(cfg, out, args):
    p = model_params(cfg)
    s = cfg["sweep"]
    param = s["param"]
    if param not in ("delta", "lambda"):
        raise ConfigError("sweep.param", "must be 'delta' or 'lambda'")
    values = s["values"]
    with section("sweep"):
        if param == "delta":
            res = sweep_delta(p, DEFAULT_DELTAS if values is None else values, jobs=args.jobs)
        else:
            res = sweep_lambda(p, DEFAULT_LAMBDAS if values is None else values, jobs=args.jobs)
    pio.write_csv(out / f"sweep_{param}.csv", (param, "k_star", "u_star", "pi_star"), res.rows())
    info = {"param": param, "rows": len(res.reports)}
    if s["pde_check"]:
        info["pde_max_relative_gap"] = pde_cross_check(p, res)
    if param == "delta":
        try:
            info["argmax_profit_delta"] = argmax_profit_delta(p, tuple(s["bracket"]))
        except SolverError as e:
            info["argmax_profit_delta"] = None
            info["argmax_note"] = str(e)
    pio.write_json(out / f"sweep_{param}.json", info)
    return info


def cmd_ingest(cfg, out, args):
    ic = cfg["ingest"]
    path = ic["path"]
    if path is None:
        raise ConfigError("ingest.path", "required (or pass --csv)")
    delta = ic["delta"] if ic["delta"] is not None else cfg["model"]["delta"]
    try:
        series = load_hashrate_csv(path)
    except ValueError as e:
        raise ConfigError("ingest.path", str(e)) from None
    real = to_real_series(series, float(delta))
    pio.write_csv(
        out / "real_hashrate.csv",
        ("timestamp", "years", "nominal", "real"),
        (
            (t.isoformat(), y, a, b)
            for t, y, a, b in zip(series.timestamps, series.years(), series.values, real.values)
        ),
    )
    return {"rows": len(series), "delta": float(delta)}


COMMANDS = {
    "solve1d": cmd_solve1d,
    "stationary": cmd_stationary,
    "trajectory": cmd_trajectory,
    "noise": cmd_noise,
    "twopop": cmd_twopop,
    "twopop-noise": cmd_twopop_noise,
    "obstacle": cmd_obstacle,
    "penalized": cmd_penalized,
    "hjb-check": cmd_hjb_check,
    "sweep": cmd_sweep,
    "ingest": cmd_ingest,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError("arguments", message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="powmfg", description="Mean-field mining game solvers.")
    ap.add_argument("subcommand", help="one of: " + ", ".join(SUBCOMMANDS))
    ap.add_argument("--config", metavar="PATH")
    ap.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides")
    ap.add_argument("--out", metavar="DIR")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--param", choices=("delta", "lambda"), help="sweep parameter")
    ap.add_argument("--csv", metavar="PATH", help="hashrate file for ingest")
    return ap


def _error_record(kind: str, message: str, code: int, field: str | None = None) -> dict:
    rec = {"error": kind, "message": message, "exit_code": code}
    if field is not None:
        rec["field"] = field
    return rec


def main(argv=None) -> int:
    out_dir = None
    try:
        args = build_parser().parse_args(argv)
        if args.subcommand not in COMMANDS:
            raise ConfigError("subcommand", f"unknown subcommand {args.subcommand!r}")
        if args.jobs < 1:
            raise ConfigError("jobs", "must be >= 1")
        cfg = load_config(args.config, args.overrides)
        # fold flags into the echoed config so the manifest alone reproduces the run
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.param is not None:
            cfg["sweep"]["param"] = args.param
        if args.csv is not None:
            cfg["ingest"]["path"] = args.csv
        seed = cfg["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        out_dir = Path(args.out or os.environ.get("MFG_POW_OUT") or "out")
        out_dir.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        info = COMMANDS[args.subcommand](cfg, out_dir, args)
        manifest = {
            "subcommand": args.subcommand,
            "config": cfg,
            "versions": _manifest_versions(),
            "diagnostics": info,
            "wall_time": time.perf_counter() - start,
        }
        pio.write_json(out_dir / "manifest.json", manifest)
        return EXIT_OK
    except ConfigError as e:
        rec = _error_record("config", str(e), EXIT_CONFIG, e.field)
    except ParameterError as e:
        rec = _error_record("config", str(e), EXIT_CONFIG, e.field)
    except SolverError as e:
        rec = _error_record("solver", f"{type(e).__name__}: {e}", EXIT_SOLVER)
    except OSError as e:
        rec = _error_record("io", str(e), EXIT_IO)
    sys.stderr.write(json.dumps(rec, sort_keys=True) + "\n")
    if out_dir is not None:
        try:
            pio.write_json(out_dir / "error.json", rec)
        except OSError:
            pass
    return rec["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
