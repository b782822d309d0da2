"""Command-line entry point.

Every command writes its outputs plus ``manifest.json`` into ``--out``.
Exit codes: 0 success, 1 solver or planner failure, 2 usage or input error.
"""
import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, dynamics, smoothing, systems
from .errors import CqdcError, ParseError, SolverFailure, ValidationError
from .impc import ImpcConfig, impc_run, rollout
from .rrt import RrtConfig, packing_ratio, refine_path, rrt_plan

SCHEMA_HELP = """scenario files are UTF-8 JSON objects with keys:
  system     {"name": <bundled system>, "params": {...}}
  q_init     configuration, unactuated coordinates first
  q_goal     configuration of the same length
  workspace  [lo, hi] per unactuated coordinate
  h          step size in seconds
  smoothing, impc, rrt  optional configuration objects
  seed       optional nonnegative integer
bundled scenarios: bundled/<name>.scenario with <name> one of
  """ + ", ".join(systems.SYSTEM_NAMES)

ARMS = {
    "full": {},
    "exact-gradients": {"exact_gradients": True},
    "no-contact-sampling": {"contact_sampling": False},
    "global-metric": {"global_metric": True},
}
IMPC_ARMS = ("analytic", "randomized-first", "randomized-zeroth", "exact")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------ output

def to_jsonable(obj):
    """Nested structure with numpy values converted; floats keep repr precision."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def dumps(obj):
    return json.dumps(to_jsonable(obj), indent=1, sort_keys=True) + "\n"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def emit_results(out_dir, files):
    """Write ``{name: text}`` into ``out_dir``; returns the written paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for name, text in files.items():
            p = out / name
            p.write_text(text, encoding="utf-8")
            written.append(str(p))
    except OSError as exc:
        raise OSError(f"cannot write results to {out}: {exc}") from exc
    return written


class Run:
    """Collects the manifest for one invocation."""

    def __init__(self, command, args, scenario=None, scenario_path=None):
        self.command = command
        self.args = {k: v for k, v in vars(args).items() if k != "func"}
        self.scenario = scenario
        self.scenario_path = scenario_path
        self.start = datetime.now(timezone.utc).isoformat()
        self.config = {}
        self.outputs = []

    def finish(self, out_dir, files, status="ok"):
        self.outputs = emit_results(out_dir, files)
        manifest = {
            "command": self.command,
            "arguments": self.args,
            "scenario_path": self.scenario_path,
            "scenario": None if self.scenario is None else self.scenario.to_dict(),
            "resolved_config": self.config,
            "seed": self.args.get("seed"),
            "version": __version__,
            "start": self.start,
            "end": datetime.now(timezone.utc).isoformat(),
            "outputs": sorted(Path(p).name for p in self.outputs),
            "status": status,
        }
        emit_results(out_dir, {"manifest.json": dumps(manifest)})
        return manifest


# ------------------------------------------------------------------ helpers

def load(path):
    """Scenario from a file, ``bundled/<name>``, or a previous run's manifest."""
    p = systems.resolve_scenario_path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read scenario {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from exc
    if isinstance(doc, dict) and "scenario" in doc and "command" in doc:
        doc = doc["scenario"]
    return systems.load_scenario(doc)


def _vec(text, n, name):
    if text is None:
        return None
    try:
        v = np.array([float(t) for t in text.replace(",", " ").split()])
    except ValueError as exc:
        raise UsageError(f"{name}: expected {n} numbers") from exc
    if v.size != n:
        raise UsageError(f"{name}: expected {n} numbers, got {v.size}")
    return v


def _seed(args, sc):
    return sc.seed if args.seed is None else args.seed


def _smoothing(sc, scheme=None, seed=0):
    d = dict(sc.smoothing)
    if scheme is not None and scheme != "exact":
        d["scheme"] = scheme
    d.setdefault("seed", seed)
    return smoothing.SmoothingConfig.from_dict(d)


def step_dict(res):
    return {
        "q_next": res.q_next, "dq": res.dq, "impulses": res.impulses,
        "row_impulses": res.row_impulses, "slack": res.slack, "mode": res.mode,
        "kappa": res.kappa, "iterations": res.iterations, "residual": res.residual,
    }


def model_dict(lm):
    d = {"A": lm.A, "B": lm.B, "c": lm.c, "q_nominal": lm.q_nominal,
         "u_nominal": lm.u_nominal, "mode": lm.mode}
    if lm.stderr is not None:
        d["stderr"] = lm.stderr
    return d


def trajectory_dict(res, h):
    return {"h": h, "inputs": res.inputs, "states": res.states, "cost_history": res.cost_history,
            "best_iteration": res.best_iteration, "schedule": res.schedule}


def tree_dict(out):
    nodes = []
    for i, n in enumerate(out.tree):
        nodes.append({"index": i, "q": n.q, "parent": n.parent, "u": n.u,
                      "provenance": n.provenance, "iteration": n.iteration,
                      "B": n.model.B, "c": n.model.c})
    return {"success": out.success, "path": out.path, "goal_index": out.goal_index,
            "iterations": out.iterations, "failures": out.failures, "nodes": nodes}


# ------------------------------------------------------------------ commands

def cmd_step(args):
    sc = load(args.scenario)
    m = sc.model
    q = _vec(args.q, m.n_q, "--q")
    q = sc.q_init if q is None else q
    u = _vec(args.u, m.n_a, "--u")
    u = q[m.n_u:] if u is None else u
    res = dynamics.step(m, q, u, sc.h, args.kappa)
    run = Run("step", args, sc, args.scenario)
    text = dumps({"q": q, "u": u, "h": sc.h, "result": step_dict(res)})
    sys.stdout.write(text)
    run.config = {"q": q, "u": u, "kappa": args.kappa}
    run.finish(args.out, {"step.json": text})
    return 0


def cmd_linearize(args):
    sc = load(args.scenario)
    m = sc.model
    q = _vec(args.q, m.n_q, "--q")
    q = sc.q_init if q is None else q
    u = _vec(args.u, m.n_a, "--u")
    u = q[m.n_u:] if u is None else u
    seed = _seed(args, sc)
    if args.scheme == "exact":
        lm = dynamics.linearize(m, q, u, sc.h, None)
        cfg = None
    else:
        cfg = _smoothing(sc, args.scheme, seed)
        if args.kappa is not None:
            cfg = cfg.with_(kappa=args.kappa)
        lm = smoothing.smoothed_linear_model(m, q, u, sc.h, cfg)
    text = dumps(model_dict(lm))
    sys.stdout.write(text)
    run = Run("linearize", args, sc, args.scenario)
    run.config = {"q": q, "u": u, "smoothing": None if cfg is None else cfg.to_dict()}
    run.finish(args.out, {"linear_model.json": text})
    return 0


def _bench_functions():
    relu = (lambda X: np.maximum(X[:, 0], 0.0), lambda X: (X[:, 0] > 0).astype(float)[:, None])
    heav = (lambda X: (X[:, 0] > 0).astype(float), lambda X: np.zeros((len(X), 1)))
    return {"relu": relu, "heaviside": heav}


def cmd_smooth_bench(args):
    """Estimator convergence tables for ReLU and Heaviside under logistic noise."""
    rho = smoothing.NoiseDistribution("logistic", [args.scale])
    if args.seed is None:
        args.seed = 0
    rows = []
    ns = [int(n) for n in args.n]
    for name, (f, df) in _bench_functions().items():
        for n in ns:
            for x in args.x:
                mean = smoothing.surrogate_mean(f, [x], rho, n, args.seed)
                g1 = smoothing.gradient_first_order(df, [x], rho, n, args.seed)
                g0 = smoothing.gradient_zeroth_order(f, [x], rho, n, args.seed)
                s = args.scale
                if name == "relu":
                    ref_mean = s * np.logaddexp(0.0, x / s)
                    ref_grad = 1.0 / (1.0 + math.exp(-x / s))
                else:
                    ref_mean = 1.0 / (1.0 + math.exp(-x / s))
                    ref_grad = math.exp(-abs(x) / s) / (s * (1 + math.exp(-abs(x) / s)) ** 2)
                rows.append([name, n, float(x), float(mean.estimate), float(mean.stderr),
                             float(g1.estimate[0]), float(g1.stderr[0]),
                             float(g0.estimate[0]), float(g0.stderr[0]), ref_mean, ref_grad])
    header = ["function", "n", "x", "mean", "mean_se", "grad_first", "grad_first_se",
              "grad_zeroth", "grad_zeroth_se", "closed_form_mean", "closed_form_grad"]
    text = csv_text(header, rows)
    sys.stdout.write(text)
    run = Run("smooth-bench", args)
    run.config = {"scale": args.scale, "n": ns, "x": list(args.x)}
    run.finish(args.out, {"smooth_bench.csv": text})
    return 0


def _impc_inputs(sc, impc_cfg):
    return np.repeat(sc.q_init[sc.model.n_u:][None], impc_cfg.horizon, axis=0)


def run_impc(sc, scheme, seed):
    cfg = ImpcConfig.from_dict(sc.impc)
    sm = None if scheme == "exact" else _smoothing(sc, scheme, seed)
    res = impc_run(sc.model, sc.q_init, _impc_inputs(sc, cfg), sc.h, cfg, sm, goal=sc.q_goal)
    return res, cfg, sm


def cmd_impc(args):
    sc = load(args.scenario)
    seed = _seed(args, sc)
    res, cfg, sm = run_impc(sc, args.scheme, seed)
    run = Run("impc", args, sc, args.scenario)
    run.config = {"impc": cfg.to_dict(), "smoothing": None if sm is None else sm.to_dict(),
                  "scheme": args.scheme, "seed": seed}
    files = {
        "trajectory.json": dumps(trajectory_dict(res, sc.h)),
        "cost_history.csv": csv_text(["outer_iteration", "cost"], enumerate(res.cost_history)),
    }
    run.finish(args.out, files)
    print(f"impc {args.scheme}: best cost {res.cost!r} at outer iteration {res.best_iteration}")
    return 0


def _rrt_config(sc, seed, overrides):
    d = dict(sc.rrt)
    d.update(overrides)
    d["seed"] = seed
    if "smoothing" not in d:
        d["smoothing"] = {k: v for k, v in sc.smoothing.items() if k != "seed"}
    return RrtConfig.from_dict(d)


def run_rrt(sc, seed, overrides):
    cfg = _rrt_config(sc, seed, overrides)
    out = rrt_plan(sc.model, sc.q_init, sc.q_goal, sc.workspace, sc.h, cfg, seed)
    return out, cfg


def _rrt_files(out):
    diag = csv_text(["iteration", "min_dist", "packing_ratio"],
                    [(i + 1, d, p) for i, (d, p) in enumerate(zip(out.min_dist, out.packing))])
    return {"tree.json": dumps(tree_dict(out)), "diagnostics.csv": diag}


def _arm_overrides(args):
    o = {}
    if args.exact_gradients:
        o["exact_gradients"] = True
    if args.no_contact_sampling:
        o["contact_sampling"] = False
    if args.global_metric:
        o["global_metric"] = True
    if args.iterations is not None:
        o["max_iterations"] = args.iterations
    return o


def cmd_rrt(args):
    sc = load(args.scenario)
    seed = _seed(args, sc)
    out, cfg = run_rrt(sc, seed, _arm_overrides(args))
    run = Run("rrt", args, sc, args.scenario)
    run.config = {"rrt": cfg.to_dict(), "seed": seed}
    run.finish(args.out, _rrt_files(out), "ok" if out.success else "goal not reached")
    print(f"rrt: success={out.success} nodes={len(out.tree)} iterations={out.iterations}")
    return 0 if out.success else 1


def cmd_refine(args):
    sc = load(args.scenario)
    seed = _seed(args, sc)
    out, cfg = run_rrt(sc, seed, _arm_overrides(args))
    run = Run("refine", args, sc, args.scenario)
    run.config = {"rrt": cfg.to_dict(), "seed": seed}
    files = _rrt_files(out)
    if not out.success:
        run.finish(args.out, files, "goal not reached")
        print("refine: planner did not reach the goal", file=sys.stderr)
        return 1
    impc_cfg = ImpcConfig.from_dict(sc.impc)
    sm = cfg.smoothing_config()
    segs = refine_path(sc.model, out, sc.h, impc_cfg, sm, seed)
    files["refined.json"] = dumps({"segments": [
        {"kind": s.kind, "h": s.h, "states": s.states, "inputs": s.inputs, "refined": s.refined,
         "warning": s.warning} for s in segs]})
    run.config["impc"] = impc_cfg.to_dict()
    run.finish(args.out, files)
    print(f"refine: {len(segs)} segments")
    return 0


def _ablate_one(job):
    kind, scenario_path, arm, seed, iterations = job
    sc = load(scenario_path)
    if kind == "impc":
        res, _, _ = run_impc(sc, arm, seed)
        return {"arm": arm, "seed": seed, "cost": res.cost, "history": res.cost_history}
    o = dict(ARMS[arm])
    o["stop_at_goal"] = False
    if iterations is not None:
        o["max_iterations"] = iterations
    out, _ = run_rrt(sc, seed, o)
    first = out.tree[out.goal_index].iteration if out.success else None
    return {"arm": arm, "seed": seed, "success": out.success, "first_goal_iteration": first,
            "min_dist": out.min_dist, "packing": out.packing}


def threads():
    v = os.environ.get("CQDC_THREADS")
    return max(1, int(v)) if v else (os.cpu_count() or 1)


def cmd_ablate(args):
    sc = load(args.scenario)
    arms = args.arms or (list(IMPC_ARMS) if args.kind == "impc" else list(ARMS))
    valid = IMPC_ARMS if args.kind == "impc" else tuple(ARMS)
    bad = [a for a in arms if a not in valid]
    if bad:
        raise UsageError(f"unknown arms {bad}; choose from {list(valid)}")
    jobs = [(args.kind, args.scenario, a, s, args.iterations) for a in arms for s in args.seeds]
    n = min(threads(), len(jobs))
    if n > 1:
        with ProcessPoolExecutor(n) as ex:
            results = list(ex.map(_ablate_one, jobs))
    else:
        results = [_ablate_one(j) for j in jobs]
    run = Run("ablate", args, sc, args.scenario)
    run.config = {"kind": args.kind, "arms": arms, "seeds": list(args.seeds)}
    if args.kind == "impc":
        rows = [(r["arm"], r["seed"], k, c) for r in results for k, c in enumerate(r["history"])]
        files = {"ablation.csv": csv_text(["arm", "seed", "outer_iteration", "cost"], rows)}
    else:
        rows = [(r["arm"], r["seed"], i + 1, d, p) for r in results
                for i, (d, p) in enumerate(zip(r["min_dist"], r["packing"]))]
        files = {"ablation.csv": csv_text(["arm", "seed", "iteration", "min_dist", "packing_ratio"],
                                          rows)}
    files["summary.json"] = dumps({"results": [{k: v for k, v in r.items()
                                                if k not in ("min_dist", "packing", "history")}
                                               for r in results]})
    run.finish(args.out, files)
    for r in results:
        print(" ".join(f"{k}={_fmt(v)}" for k, v in r.items()
                       if k not in ("min_dist", "packing", "history")))
    return 0


# ------------------------------------------------------------------ parser

def build_parser():
    p = _Parser(prog="cqdc", description="Contact dynamics, smoothing and planning toolkit.",
                epilog=SCHEMA_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"cqdc {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, scenario=True):
        if scenario:
            sp.add_argument("scenario", help="scenario file, bundled/<name>, or a manifest.json")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")

    sp = sub.add_parser("step", help="one dynamics step")
    common(sp)
    sp.add_argument("--q", help="configuration (defaults to q_init)")
    sp.add_argument("--u", help="command (defaults to q_init actuated part)")
    sp.add_argument("--kappa", type=float, default=None, help="barrier weight; exact when omitted")
    sp.set_defaults(func=cmd_step)

    sp = sub.add_parser("linearize", help="local affine model")
    common(sp)
    sp.add_argument("--q")
    sp.add_argument("--u")
    sp.add_argument("--scheme", choices=("exact",) + smoothing.SCHEMES, default="analytic")
    sp.add_argument("--kappa", type=float, default=None)
    sp.set_defaults(func=cmd_linearize)

    sp = sub.add_parser("smooth-bench", help="estimator convergence tables")
    common(sp, scenario=False)
    sp.add_argument("--n", nargs="+", default=[100, 1000, 10000, 100000])
    sp.add_argument("--x", nargs="+", type=float, default=[-1.0, 0.0, 1.0])
    sp.add_argument("--scale", type=float, default=1.0)
    sp.set_defaults(func=cmd_smooth_bench)

    sp = sub.add_parser("impc", help="trajectory optimization")
    common(sp)
    sp.add_argument("--scheme", choices=IMPC_ARMS, default="analytic")
    sp.set_defaults(func=cmd_impc)

    for name, func, hlp in (("rrt", cmd_rrt, "sampling-based planning"),
                            ("refine", cmd_refine, "plan then refine the path")):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        sp.add_argument("--exact-gradients", action="store_true")
        sp.add_argument("--no-contact-sampling", action="store_true")
        sp.add_argument("--global-metric", action="store_true")
        sp.add_argument("--iterations", type=int, default=None)
        sp.set_defaults(func=func)

    sp = sub.add_parser("ablate", help="ablation matrix over seeds")
    common(sp)
    sp.add_argument("--kind", choices=("rrt", "impc"), default="rrt")
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    sp.add_argument("--arms", nargs="+", default=None)
    sp.add_argument("--iterations", type=int, default=None)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        if args.out is None:
            args.out = os.path.join("cqdc-out", args.command)
        return args.func(args)
    except UsageError as exc:
        print(f"cqdc: {exc}\n\n{parser.format_usage()}\n{SCHEMA_HELP}", file=sys.stderr)
        return 2
    except (ParseError, ValidationError) as exc:
        print(f"cqdc: invalid scenario: {exc}\n\n{SCHEMA_HELP}", file=sys.stderr)
        return 2
    except (SolverFailure, CqdcError) as exc:
        print(f"cqdc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"cqdc: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
