"""Command-line front end.

Exit codes: 0 success, 2 configuration or input error, 3 failed check.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import platform
import sys
from contextlib import nullcontext
from importlib import metadata
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from . import scenarios
from .config import ExperimentConfig, preset_frame, substream
from .control import ControlProblemSpec, min_energy_cost
from .curved import build_curved_family, default_alphas, integrability_proxy, jacobian_profile
from .errors import ConfigError, InvalidInputError, KalmanHJError
from .hj_solver import (ControlGrid, GridFunction, GridSpec, HJProblem, ParabolicBoundary, SourceTerm,
                        solve_value)
from .kalman_geometry import KalmanFrame, build_frame, frame_invariant_errors, load_matrix, rescaled_drift
from .regularity import holder_fit, oscillation_iteration
from .scaling import SpaceTimePoint, gauge_rho, modulus_omega

EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 2, 3
logger = logging.getLogger("kalmanhj")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    return obj


def dump_json(obj, path=None):
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)
    return text


def write_csv(rows, path=None, columns=None):
    if not rows:
        return ""
    columns = columns or list(rows[0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(float(r[c])) if isinstance(r[c], (float, np.floating)) else r[c] for c in columns])
    if path is None:
        sys.stdout.write(buf.getvalue())
    else:
        Path(path).write_text(buf.getvalue())
    return buf.getvalue()


def _frame_from_args(args):
    """Preset name, frame JSON path, or ``--matrix-file`` with ``--p0-file``."""
    if getattr(args, "matrix_file", None):
        if not args.p0_file:
            raise ConfigError("--matrix-file needs --p0-file")
        return build_frame(load_matrix(args.matrix_file), load_matrix(args.p0_file))
    name = getattr(args, "frame", None) or "kolmogorov2"
    path = Path(name)
    if path.suffix == ".json" and path.exists():
        return KalmanFrame.from_json(path)
    return preset_frame(name).frame


def _read_points(source, N):
    """Rows ``t, x_1..x_N`` from inline JSON or a CSV file."""
    M = load_matrix(source)
    if M.ndim != 2 or M.shape[1] != N + 1:
        raise InvalidInputError(f"points need {N + 1} columns (t, x...)")
    return M


def cmd_decompose(args):
    frame = _frame_from_args(args)
    errs = frame_invariant_errors(frame)
    doc = frame.to_dict()
    doc["invariant_errors"] = errs
    dump_json(doc, _out_file(args, "frame.json"))
    return EXIT_OK if max(errs.values()) <= 1e-10 else EXIT_CHECK


def _out_file(args, name):
    if not args.out:
        return None
    out = Path(args.out)
    if out.suffix:
        out.parent.mkdir(parents=True, exist_ok=True)
        return out
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _point_rows(args, with_rho):
    frame = _frame_from_args(args)
    pts = _read_points(args.points, frame.N)
    gamma = 1.0 / args.q + args.alpha * (1.0 - 1.0 / args.q)
    rows = []
    for t, *x in pts:
        p = SpaceTimePoint(t, np.array(x))
        row = {"t": float(t), **{f"x{i + 1}": float(v) for i, v in enumerate(x)}}
        if with_rho:
            row["rho"] = gauge_rho(frame, args.h, gamma, p)
        row["omega"] = modulus_omega(frame, args.q, args.alpha, p) if args.alpha > 0 else float("nan")
        rows.append(row)
    return rows


def cmd_gauge(args):
    write_csv(_point_rows(args, True), _out_file(args, "gauge.csv"))
    return EXIT_OK


def cmd_modulus(args):
    if not 0 < args.alpha <= 1:
        raise InvalidInputError("--alpha must lie in (0, 1]")
    write_csv(_point_rows(args, False), _out_file(args, "modulus.csv"))
    return EXIT_OK


def cmd_cost(args):
    frame = _frame_from_args(args)
    y = np.asarray(json.loads(args.from_), dtype=float) if args.from_ else None
    x = np.asarray(json.loads(args.to), dtype=float)
    spec = ControlProblemSpec(frame, args.h, args.qconj, 0.0, args.t, y, x)
    cv, traj = min_energy_cost(spec, tol=args.tol)
    dump_json({"J": cv.J, "residual": cv.residual, "iterations": cv.iterations, "method": cv.method},
              _out_file(args, "cost.json"))
    if args.trajectory:
        rows = []
        for k, tau in enumerate(traj.times):
            row = {"tau": float(tau), **{f"eta{i + 1}": float(v) for i, v in enumerate(traj.states[k])}}
            b = traj.controls[min(k, len(traj.controls) - 1)]
            row.update({f"beta{i + 1}": float(v) for i, v in enumerate(b)})
            rows.append(row)
        write_csv(rows, args.trajectory)
    return EXIT_OK


def cmd_curved(args):
    frame = _frame_from_args(args)
    alphas = tuple(args.alphas) if args.alphas else default_alphas(frame, args.q, args.p)
    fam = build_curved_family(frame, args.h, args.t, alphas)
    prof = jacobian_profile(fam, [args.t * 0.5 ** k for k in range(args.levels + 1)])
    proxy = integrability_proxy(fam, args.p)
    rows = [dict(r, fitted_exponent=prof["fitted_exponent"]) for r in prof["rows"]]
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        write_csv(rows, out / "curved.csv")
    else:
        write_csv(rows)
    summary = {k: v for k, v in prof.items() if k != "rows"}
    summary.update({"alphas": list(alphas), "proxy": proxy, "HR_norm": fam.HR_norm})
    dump_json(summary, out / "curved.json" if out else None)
    return EXIT_OK if prof["ok"] else EXIT_CHECK


def _parse_grid(text, N):
    try:
        parts = [int(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"--grid expects integers, got {text!r}") from None
    if len(parts) != N + 1 or min(parts) < 2:
        raise ConfigError(f"--grid needs {N} node counts and nt")
    return tuple(parts[:-1]), parts[-1]


def _solve_data(kind, frame, h, q):
    if kind == "upper":
        return ParabolicBoundary(scenarios.desk_bottom_data(frame, h, 0.1, 1.0 / q))
    if kind == "lower":
        flow = expm(rescaled_drift(frame, None, h))
        return ParabolicBoundary(lambda X: np.maximum(0.0, 1.0 - np.linalg.norm(np.atleast_2d(X) @ flow.T, axis=1)))
    return ParabolicBoundary(lambda X: np.sum(np.atleast_2d(X) ** 2, axis=1))


def cmd_solve(args):
    frame = _frame_from_args(args)
    shape, nt = _parse_grid(args.grid, frame.N)
    grid = GridSpec.box(args.half_width, shape, nt)
    source = 0.0
    if args.f_file:
        samples = np.loadtxt(args.f_file, delimiter=",", ndmin=2)
        if samples.shape != (nt + 1, int(np.prod(shape))):
            raise ConfigError(f"--f-file needs {nt + 1} rows of {int(np.prod(shape))} cell samples")
        source = SourceTerm(GridFunction(frame, grid, samples.reshape((nt + 1,) + shape), args.h), p=args.f_p)
    problem = HJProblem(frame, _solve_data(args.kind, frame, args.h, args.q), h=args.h, q=args.q,
                        lam=args.lam, source=source, eps_drift=args.eps if args.kind == "lower" else 0.0)
    u = solve_value(problem, grid, ControlGrid(b_max=args.bmax))
    if args.out:
        u.save(args.out)
    dump_json({"dims": list(u.values.shape), "dt": grid.dt, "min": float(u.values.min()),
               "max": float(u.values.max()), **u.meta})
    return EXIT_OK


def cmd_oscillate(args):
    u = GridFunction.load(args.input)
    rep = oscillation_iteration(u, levels=args.levels, delta=args.delta, alpha=args.alpha, q=args.q)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    dump_json(rep.to_dict(), out / "oscillation.json" if out else None)
    if out:
        write_csv([{"level": k, "radius": r, "osc": o, "nodes": n}
                   for k, (r, o, n) in enumerate(zip(rep.radii, rep.osc, rep.nodes))], out / "oscillation.csv")
    return EXIT_OK if rep.nonincreasing else EXIT_CHECK


def cmd_holderfit(args):
    u = GridFunction.load(args.input)
    t = u.grid.T1 if args.base_time is None else args.base_time
    fit = holder_fit(u, q=args.q, base=(t, None))
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        write_csv([{"stratum": j, "beta": b, "low": lo, "high": hi, "predicted": p}
                   for j, (b, (lo, hi), p) in enumerate(zip(fit.betas, fit.intervals, fit.predicted))],
                  out / "holder.csv")
    dump_json(fit.to_dict(), out / "holder.json" if out else None)
    return EXIT_OK


def _versions():
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "scikit-learn"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


def run_experiment(config: ExperimentConfig, out=None):
    """Run every configured scenario and write reports under ``out``.

    Returns the exit status: 0 when all checks pass, 3 otherwise. A scenario
    that raises is recorded as failed and the run continues.
    """
    out = Path(out or config.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json({"config": config.to_dict(), "versions": _versions()}, out / "manifest.json")
    bundle = config.bundle()
    summary = {}
    for name in config.scenarios:
        kwargs = dict(frame=bundle.frame, q=config.q, p=config.p, h=config.h, lam=config.lam, eps=config.eps,
                      delta=config.delta, grid=config.grid, rng=substream(config.seed, name))
        try:
            res = scenarios.RUNNERS[name](**kwargs)
        except KalmanHJError as exc:
            logger.error("scenario %s failed: %s", name, exc)
            res = {"ok": False, "metrics": {"error": f"{type(exc).__name__}: {exc}"}, "tables": {}}
        dump_json({"ok": res["ok"], "metrics": res["metrics"]}, out / f"{name}.json")
        for tname, rows in res["tables"].items():
            write_csv(rows, out / f"{name}_{tname}.csv")
        summary[name] = bool(res["ok"])
    dump_json({"checks": summary, "passed": all(summary.values())}, out / "summary.json")
    return EXIT_OK if all(summary.values()) else EXIT_CHECK


def cmd_run(args):
    if not args.config:
        raise ConfigError("run needs --config")
    config = ExperimentConfig.load(args.config)
    if args.seed is not None:
        config = ExperimentConfig.from_dict({**config.to_dict(), "seed": args.seed})
    return run_experiment(config, args.out)


def build_parser():
    p = argparse.ArgumentParser(prog="kalmanhj", description=__doc__)
    p.add_argument("--config", help="experiment JSON (used by 'run')")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def framed(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--frame", default="kolmogorov2", help="preset (kolmogorov2, chain-N) or frame JSON")
        s.add_argument("--matrix-file", help="drift A as CSV or JSON")
        s.add_argument("--p0-file", help="projection P0 as CSV or JSON")
        return s

    framed("decompose", "Kalman frame of (A, P0) as JSON")
    for name in ("gauge", "modulus"):
        s = framed(name, f"{name} values for points (t, x...)")
        s.add_argument("--points", required=True, help="CSV file or inline JSON rows")
        s.add_argument("--h", type=float, default=0.0)
        s.add_argument("--q", type=float, default=2.0)
        s.add_argument("--alpha", type=float, default=0.0 if name == "gauge" else 0.5)
    s = framed("cost", "minimum-energy cost between two states")
    s.add_argument("--qconj", type=float, default=2.0)
    s.add_argument("--h", type=float, default=0.0)
    s.add_argument("--t", type=float, default=1.0)
    s.add_argument("--from", dest="from_", help="start state as JSON list (default origin)")
    s.add_argument("--to", required=True, help="end state as JSON list")
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--trajectory", help="CSV path for (tau, eta..., beta...)")
    s = framed("curved", "curved family Jacobian profile")
    s.add_argument("--q", type=float, default=2.0)
    s.add_argument("--p", type=float, default=10.0)
    s.add_argument("--h", type=float, default=0.0)
    s.add_argument("--t", type=float, default=1.0)
    s.add_argument("--levels", type=int, default=8)
    s.add_argument("--alphas", type=float, nargs="+")
    s = framed("solve", "semi-Lagrangian value function")
    s.add_argument("--h", type=float, default=0.0)
    s.add_argument("--q", type=float, default=2.0)
    s.add_argument("--lambda", dest="lam", type=float, default=1.0)
    s.add_argument("--kind", choices=("upper", "lower", "plain"), default="plain")
    s.add_argument("--grid", default="33,33,64", help="nx,...,nt")
    s.add_argument("--half-width", type=float, default=1.25)
    s.add_argument("--bmax", type=float, default=2.0)
    s.add_argument("--eps", type=float, default=0.0)
    s.add_argument("--f-file", help="CSV of cell samples, one row per time level")
    s.add_argument("--f-p", type=float, default=np.inf)
    for name in ("oscillate", "holderfit"):
        s = sub.add_parser(name, help=f"{name} report for a saved grid function")
        s.add_argument("--input", required=True)
        s.add_argument("--q", type=float, default=2.0)
        if name == "oscillate":
            s.add_argument("--levels", type=int, default=4)
            s.add_argument("--delta", type=float, default=0.5)
            s.add_argument("--alpha", type=float, default=0.0)
        else:
            s.add_argument("--base-time", type=float, default=None)
    sub.add_parser("run", help="run the scenarios of --config")
    return p


COMMANDS = {"decompose": cmd_decompose, "gauge": cmd_gauge, "modulus": cmd_modulus, "cost": cmd_cost,
            "curved": cmd_curved, "solve": cmd_solve, "oscillate": cmd_oscillate, "holderfit": cmd_holderfit,
            "run": cmd_run}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    limit = nullcontext()
    if args.threads:
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(args.threads)
    try:
        with limit:
            return COMMANDS[args.command](args)
    except (ConfigError, InvalidInputError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KalmanHJError as exc:
        print(f"check failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
