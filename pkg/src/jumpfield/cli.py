"""Command-line front end: ``jumpfield <command> [options]``.

Commands: ``solve``, ``residual``, ``sensitivity``, ``contraction`` and
``benchmark``.  Options can come from ``--config`` (JSON, validated
against ``schema/config.json``); flags given on the command line win.
Every run writes ``summary.json`` (sorted keys, no wall-clock fields) to
``--out``; failures write ``error.json`` and exit non-zero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from jumpfield import __version__, kernels
from jumpfield.backward import RegressionBasis
from jumpfield.drivers import TimeGrid
from jumpfield.errors import ConfigError, JumpfieldError
from jumpfield.model import InitialLaw, ProblemSpec

log = logging.getLogger("jumpfield")

COMMANDS = ("solve", "residual", "sensitivity", "contraction", "benchmark")

DEFAULTS = {
    "N": 20000,
    "M": None,
    "steps": 50,
    "seed": 7,
    "tol": 1e-10,
    "max_iter": 20,
    "subsample": 64,
}

# the residual differentiates V in t over one grid step, so it wants a coarse
# grid and a large flow to keep the flow noise of that difference small
COMMAND_DEFAULTS = {"residual": {"N": 200000, "M": 20000, "steps": 5}}


def load_schema():
    text = resources.files("jumpfield").joinpath("schema/config.json").read_text()
    return json.loads(text)


def validate_config(cfg):
    import jsonschema

    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        pointer = "/" + "/".join(str(p) for p in err.absolute_path)
        raise ConfigError(f"invalid config at {pointer}: {err.message}", pointer=pointer)
    return cfg


def build_parser():
    p = argparse.ArgumentParser(prog="jumpfield", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--family", choices=("A", "B", "C", "Q", "coupled"))
    p.add_argument("--horizon", type=float)
    p.add_argument("--N", type=int, help="flow particles")
    p.add_argument("--M", type=int, help="pinned copies (default N)")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--threads", type=int, help="worker cap; falls back to JUMPFIELD_THREADS")
    p.add_argument("--points", type=int, help="residual evaluation points")
    p.add_argument("--x", type=float, nargs="+", help="pin point")
    p.add_argument("--v", type=float, nargs="+", action="append", help="measure-derivative probe (repeatable)")
    p.add_argument("--criterion", nargs="+", help="acceptance criteria to run (numbers or 'all')")
    p.add_argument("--out", type=Path, help="output directory (default: run-<command>)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _positive(name, value, allow_none=False):
    if value is None and allow_none:
        return
    if value is None or value <= 0:
        raise ConfigError(f"invalid config at /numerics/{name}: must be positive", pointer=f"/numerics/{name}")


def _criteria(values):
    if any(v.lower() == "all" for v in values):
        return list(range(1, 13))
    try:
        return sorted({int(v) for v in values})
    except ValueError:
        raise ConfigError("invalid config at /criterion: expected numbers or 'all'", pointer="/criterion") from None


def resolve(args):
    """Merge config file and flags into one validated run description."""
    cfg = {}
    if args.config is not None:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}", pointer="") from None
        validate_config(cfg)
    problem = dict(cfg.get("problem", {}))
    num = dict(cfg.get("numerics", {}))
    if args.family:
        problem = {"family": args.family} if problem.get("family") != args.family else problem
    if args.horizon is not None:
        problem["horizon"] = args.horizon
    for key in ("N", "M", "steps", "seed", "tol", "max_iter", "threads"):
        val = getattr(args, key)
        if val is not None:
            num[key] = val
    run = {
        "command": args.command,
        "problem": problem,
        "numerics": {**DEFAULTS, **COMMAND_DEFAULTS.get(args.command, {}),
                     **{k: v for k, v in num.items() if v is not None}},
        "x": args.x if args.x is not None else cfg.get("x"),
        "cloud": cfg.get("cloud"),
        "probes": args.v if args.v else cfg.get("probes"),
        "points": args.points if args.points is not None else cfg.get("points", 10),
        "criterion": _criteria(args.criterion) if args.criterion else cfg.get("criterion"),
        "out": str(args.out) if args.out else cfg.get("out", f"run-{args.command}"),
    }
    merged = {k: v for k, v in run.items() if v is not None and v != {}}
    merged["numerics"] = {k: v for k, v in run["numerics"].items() if v is not None}
    validate_config(merged)
    n = run["numerics"]
    for key in ("N", "steps", "tol", "max_iter", "subsample"):
        _positive(key, n[key])
    _positive("M", n["M"], allow_none=True)
    if n["seed"] < 0:
        raise ConfigError("seed must be non-negative", pointer="/numerics/seed")
    if run["points"] < 1:
        raise ConfigError("points must be positive", pointer="/points")
    if args.command != "benchmark" and "family" not in problem:
        raise ConfigError("a problem family is required (--family or problem.family)", pointer="/problem/family")
    return run


def make_spec(problem, default_horizon=0.25):
    from jumpfield.families import build
    from jumpfield.model import JumpMeasure

    horizon = float(problem.get("horizon", 0.1 if problem["family"] == "coupled" else default_horizon))
    jump = JumpMeasure.from_atoms(problem["jump"]["atoms"]) if "jump" in problem else None
    coeffs = build(problem["family"], horizon=horizon, jump=jump, **problem.get("params", {}))
    if "initial_law" in problem:
        law = InitialLaw.from_dict(problem["initial_law"])
    else:
        law = InitialLaw.point(np.zeros(coeffs.dim))
    pin = None
    if "pin" in problem:
        pin = (float(problem["pin"]["t"]), np.asarray(problem["pin"]["x"], float))
    return ProblemSpec(coeffs, horizon, law, pin)


def _basis(num):
    b = num.get("basis") or {}
    return RegressionBasis(kind=b.get("kind", "poly"), degree=b.get("degree", 3), ridge=b.get("ridge"))


def _point(run, spec):
    if run["x"] is not None:
        return np.asarray(run["x"], float)
    if spec.pin is not None:
        return np.atleast_1d(spec.pin[1])
    return np.zeros(spec.coeffs.dim)


def _cloud(run, spec):
    from jumpfield.measure import ParticleCloud

    if run["cloud"] is not None:
        return ParticleCloud(np.asarray(run["cloud"], float))
    law = spec.initial_law
    if law.kind == "point":
        return ParticleCloud(law.mean[None, :])
    return ParticleCloud(law.sample(run["numerics"]["N"], run["numerics"]["seed"]))


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _num(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v))


def write_summary(out, payload):
    with open(out / "summary.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_num)
        fh.write("\n")


def cmd_solve(run, out):
    from jumpfield.master import DecouplingField
    from jumpfield.picard import picard_solve

    spec = make_spec(run["problem"])
    n = run["numerics"]
    grid = TimeGrid(0.0, spec.horizon, n["steps"])
    basis = _basis(n)
    sol = picard_solve(spec, grid, n["N"], n["seed"], basis, n["tol"], n["max_iter"])
    sol.diagnostics.to_csv(out / "diagnostics.csv")
    sol.backward.coefficient_table(out / "coefficients.csv")
    x = _point(run, spec)
    fld = DecouplingField(spec, grid, N=n["N"], M=n["M"] or n["N"], seed=n["seed"], basis=basis,
                          tol=n["tol"], max_iter=n["max_iter"])
    v, se = fld.eval_V(0.0, x, _cloud(run, spec))
    return {
        "V0": v,
        "V0_stderr": se,
        "x": x.tolist(),
        "mean_Y0": float(sol.backward.Y[0].mean()),
        "picard": sol.diagnostics.to_dict(),
    }


def residual_points(grid, count):
    nodes = grid.times[:-1]
    xs = (-0.4, 0.3, 0.0, 0.8, -1.0)
    return [(float(nodes[i % len(nodes)]), xs[(i // len(nodes)) % len(xs)]) for i in range(count)]


def cmd_residual(run, out):
    from jumpfield.master import DecouplingField, FDSteps, TERMS, residual, write_residual_csv, write_residual_json

    spec = make_spec(run["problem"])
    n = run["numerics"]
    grid = TimeGrid(0.0, spec.horizon, n["steps"])
    fld = DecouplingField(spec, grid, N=n["N"], M=n["M"] or n["N"], seed=n["seed"], basis=_basis(n),
                          tol=n["tol"], max_iter=n["max_iter"])
    fd = n.get("fd") or {}
    steps = FDSteps(x=fd.get("x", 1e-2), t=fd.get("t"), v=fd.get("v", 1e-2), subsample=n["subsample"])
    cloud = _cloud(run, spec)
    d = spec.coeffs.dim
    reports = [residual(fld, None, t, np.full(d, x), cloud, steps) for t, x in residual_points(grid, run["points"])]
    write_residual_csv(out / "residual_terms.csv", reports)
    write_residual_json(out / "residual.json", reports)
    _write_rows(out / "residual.csv", ["t", "x", *TERMS, "total"],
                [[r.t, " ".join(map(str, r.x)), *(r.terms[k] for k in TERMS), r.total] for r in reports])
    totals = [r.total for r in reports]
    return {"points": len(reports), "max_abs_total": max(abs(v) for v in totals), "totals": totals,
            "tolerance": 0.05, "pass": bool(max(abs(v) for v in totals) <= 0.05)}


def cmd_sensitivity(run, out):
    from jumpfield.master import DecouplingField
    from jumpfield.sensitivity import solve_dmu, solve_dx, write_sensitivity_csv

    spec = make_spec(run["problem"])
    n = run["numerics"]
    grid = TimeGrid(0.0, spec.horizon, n["steps"])
    basis = _basis(n)
    fld = DecouplingField(spec, grid, N=n["N"], M=n["M"] or n["N"], seed=n["seed"], basis=basis,
                          tol=n["tol"], max_iter=n["max_iter"])
    x = _point(run, spec)
    base = fld.pinned(0.0, x, _cloud(run, spec))
    dx = solve_dx(base, spec, basis=basis)
    rows = [(0.0, "", "dY_dx", a, dx.value[a], dx.stderr[a]) for a in range(spec.coeffs.dim)]
    probes = run["probes"] or [list(x)]
    dmu = []
    for v in probes:
        res = solve_dmu(base, spec, basis=basis, v=np.asarray(v, float))
        vs = " ".join(map(str, v))
        rows += [(0.0, vs, "dY_dmu", a, res.value[a], res.stderr[a]) for a in range(spec.coeffs.dim)]
        dmu.append({"v": list(v), "value": res.value.tolist(), "stderr": res.stderr.tolist()})
    write_sensitivity_csv(out / "sensitivity.csv", rows)
    return {"V0": base.value, "dx": dx.value.tolist(), "dx_stderr": dx.stderr.tolist(), "dmu": dmu, "x": x.tolist()}


def cmd_contraction(run, out):
    from jumpfield.picard import contraction_probe, picard_solve

    spec = make_spec(run["problem"])
    n = run["numerics"]
    grid = TimeGrid(0.0, spec.horizon, n["steps"])
    basis = _basis(n)
    sol = picard_solve(spec, grid, n["N"], n["seed"], basis, n["tol"], n["max_iter"])
    sol.diagnostics.to_csv(out / "diagnostics.csv")
    probe = [float(r) for r in contraction_probe(spec, grid, n["N"], n["seed"], basis)]
    _write_rows(out / "contraction.csv", ["pair", "ratio"], list(enumerate(probe)))
    return {"picard": sol.diagnostics.to_dict(), "probe_ratios": probe, "probe_max": max(probe),
            "pass": bool(max(probe) < 1)}


def cmd_benchmark(run, out):
    from jumpfield import acceptance

    if run["criterion"]:
        nums = run["criterion"]
        results = []
        for c in nums:
            res = acceptance.run(c, seed=run["numerics"]["seed"])
            print(res.line(), flush=True)
            results.append(res)
        _write_rows(out / "acceptance.csv", ["criterion", "title", "pass", "tolerance", "metrics"],
                    [[r.number, r.title, r.passed, r.tolerance, json.dumps(r.metrics, sort_keys=True, default=_num)]
                     for r in results])
        return {"criteria": [r.to_dict() for r in results], "pass": all(r.passed for r in results)}

    from jumpfield.master import DecouplingField
    from jumpfield.oracle import ClosedFormField

    problem = run["problem"] or {"family": "A"}
    spec = make_spec(problem)
    n = run["numerics"]
    grid = TimeGrid(0.0, spec.horizon, n["steps"])
    fld = DecouplingField(spec, grid, N=n["N"], M=n["M"] or n["N"], seed=n["seed"], basis=_basis(n),
                          tol=n["tol"], max_iter=n["max_iter"])
    x, cloud = _point(run, spec), _cloud(run, spec)
    v, se = fld.eval_V(0.0, x, cloud)
    exact = ClosedFormField(spec, grid).value(0.0, x, cloud)
    tol = 0.01 if spec.coeffs.name == "A" else 0.02
    passed = abs(v - exact) <= tol
    _write_rows(out / "acceptance.csv", ["check", "value", "expected", "tolerance", "pass"],
                [["V0", v, exact, tol, passed]])
    return {"V0": v, "V0_stderr": se, "expected": exact, "tolerance": tol, "pass": bool(passed), "x": x.tolist()}


HANDLERS = {
    "solve": cmd_solve,
    "residual": cmd_residual,
    "sensitivity": cmd_sensitivity,
    "contraction": cmd_contraction,
    "benchmark": cmd_benchmark,
}


def _threads(cli_value, num):
    if cli_value is not None:
        return cli_value
    if num.get("threads") is not None:
        return num["threads"]
    env = os.environ.get("JUMPFIELD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError("JUMPFIELD_THREADS must be an integer", pointer="") from None
    return None


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run = resolve(args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"jumpfield: error: {exc}", file=sys.stderr)
        return 2
    out = Path(run["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"jumpfield: error: output directory not writable: {exc}", file=sys.stderr)
        return 2
    kernels.set_threads(_threads(args.threads, run["numerics"]))
    try:
        result = HANDLERS[run["command"]](run, out)
    except JumpfieldError as exc:
        with open(out / "error.json", "w") as fh:
            json.dump(exc.to_dict(), fh, indent=2, sort_keys=True, default=_num)
        print(f"jumpfield: {exc.kind} error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    numerics = {k: v for k, v in run["numerics"].items() if k != "threads"}
    summary = {
        "command": run["command"],
        "problem": run["problem"],
        "numerics": numerics,
        "seed": run["numerics"]["seed"],
        "version": __version__,
        "result": result,
    }
    write_summary(out, summary)
    log.info("wrote %s", out / "summary.json")
    if isinstance(result, dict) and result.get("pass") is False:
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
