"""Command-line pipeline: ``htmpc <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
input), 3 numeric failure (divergence, non-convergence). On failure a
JSON object ``{"error": ..., "kind": ..., "exit_code": ...}`` is printed
to stderr.
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

from . import closed_loop as cl
from . import training as tr
from .box_qp import BoxQp, OracleFailure, active_set_oracle, apgd, convergence_cert, pgd
from .htnn import HtnnSpec, build_vector_minmax
from .minmax import BoxDomain, MinMaxVector
from .mpc_core import CondensedQp, condense, problem_from_dict
from .nn_runtime import lipschitz_cert
from .unfolded import UnfoldedParams, init_from_mpc, init_structured, to_htnn

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
ARTIFACT_ENV = "HTMPC_ARTIFACT_DIR"
REPRO_X0 = [4.0, 10.0, -1.0, -1.0]

log = logging.getLogger("htmpc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- I/O helpers ---------------------------------------------------------------

def artifact_dir() -> Path:
    return Path(os.environ.get(ARTIFACT_ENV, "."))


def out_path(name) -> Path:
    """Relative output paths land in the artifact directory."""
    p = Path(name)
    if not p.is_absolute():
        p = artifact_dir() / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def bundled(name) -> Path:
    return Path(str(resources.files("htmpc") / "data" / f"{name}.json"))


def resolve_input(path) -> Path:
    """Relative inputs are looked up in the cwd, then the artifact directory."""
    p = Path(path)
    if not p.exists() and not p.is_absolute() and (artifact_dir() / p).exists():
        p = artifact_dir() / p
    return p


def read_json(path):
    p = resolve_input(path)
    if not p.exists() and not p.suffix:
        # bare names refer to bundled examples: "two_mass", "three_mass"
        b = bundled(path)
        if b.exists():
            p = b
    with open(p) as fh:
        return json.load(fh)


def write_json(path, obj):
    p = out_path(path)
    with open(p, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
    return p


def load_problem_arg(path):
    d = read_json(path)
    sys_, mpc = problem_from_dict(d)
    return sys_, mpc, d


def load_qp_arg(path) -> CondensedQp:
    d = read_json(path)
    if "H" in d:
        return CondensedQp.from_dict(d)
    sys_, mpc = problem_from_dict(d)
    return condense(sys_, mpc)


def load_model(path):
    d = read_json(path)
    kind = d.get("type")
    if kind == "htnn":
        return HtnnSpec.from_dict(d)
    if kind == "unfolded":
        return UnfoldedParams.from_dict(d)
    raise ValueError(f"{path}: unknown model type {kind!r}")


def parse_vec(s, n=None, name="vector"):
    try:
        v = np.array([float(t) for t in s.replace(",", " ").split()])
    except ValueError:
        raise UsageError(f"{name} must be a comma-separated list of numbers") from None
    if n is not None and v.size != n:
        raise UsageError(f"{name} must have {n} entries, got {v.size}")
    return v


def state_ranges(d, n_x):
    if "state_ranges" in d:
        return np.asarray(d["state_ranges"], dtype=float)
    return np.array([[-4.0, 4.0], [-10.0, 10.0]] * (n_x // 2))


# -- subcommands ---------------------------------------------------------------

def cmd_condense(a):
    sys_, mpc, _ = load_problem_arg(a.problem)
    qp = condense(sys_, mpc)
    p = write_json(a.output or "qp.json", qp.to_dict())
    return {"output": str(p), "nu": qp.nu, "n_x": qp.n_x}


def cmd_solve(a):
    qp = load_qp_arg(a.qp)
    x0 = parse_vec(a.x0, qp.n_x, "--x0")
    box = BoxQp.from_condensed(qp, x0)
    solver = pgd if a.method == "pgd" else apgd
    kw = {"alpha": a.alpha, "tol": a.tol, "max_iter": a.max_iter, "record": True}
    if a.method == "apgd":
        kw["beta"] = a.beta
    rep = solver(box, **kw)
    if not rep.converged:
        raise ArithmeticError(f"{a.method} did not converge in {rep.iterations} iterations")
    d = rep.to_dict()
    d.update({"type": "solve_report", "method": a.method, "x0": x0.tolist()})
    p = write_json(a.output or "solve.json", d)
    if a.residuals_csv:
        rep.residuals_to_csv(out_path(a.residuals_csv))
    return {"output": str(p), "iterations": rep.iterations, "u": rep.x.tolist()}


def cmd_compile(a):
    d = read_json(a.law)
    law = MinMaxVector.from_dict(d)
    if a.box:
        # a single number is shared by every state coordinate
        lo, hi = (parse_vec(b, name=name) for b, name in
                  zip(a.box, ("box lower bound", "box upper bound")))
        if {lo.size, hi.size} - {1, law.n_x}:
            raise UsageError(f"--box bounds must have 1 or {law.n_x} entries")
        lo, hi = lo * np.ones(law.n_x), hi * np.ones(law.n_x)
    else:
        if "domain" not in d:
            raise UsageError("give --box LO HI or a 'domain' entry in the law file")
        lo, hi = d["domain"]["x_lo"], d["domain"]["x_hi"]
    X = BoxDomain(lo, hi)
    net, report = build_vector_minmax(law, X)
    xs = X.sample(a.check, np.random.default_rng(a.seed))
    err = float(np.max(np.abs(net(xs) - law(xs).reshape(xs.shape[0], -1))))
    p = write_json(a.output or "net.json", net.to_dict())
    return {"output": str(p), "size_report": report.to_dict(), "bounds_ok": report.ok(),
            "max_abs_error": err}


def cmd_dataset(a):
    sys_, mpc, d = load_problem_arg(a.problem)
    n_init, horizon = (500, 100) if a.full else (a.n_init, a.horizon)
    ds = tr.generate_dataset(sys_, mpc, n_init, horizon, state_ranges(d, sys_.n_x),
                             seed=a.seed, jobs=a.jobs)
    p = out_path(a.output or "dataset.npz")
    ds.save(p)
    return {"output": str(p), "samples": len(ds), "train": int(ds.train.size),
            "val": int(ds.val.size), "test": int(ds.test.size)}


def build_model(arch, sys_, mpc, ds, depth, width, seed, noise, alpha=None, beta=None):
    qp = condense(sys_, mpc)
    if arch == "htnn":
        scale = np.abs(ds.X).max(axis=0)
        scale[scale == 0] = 1.0
        return tr.init_htnn(sys_.n_x, qp.nu, depth, width, seed, input_scale=scale)
    if arch == "dense":
        p = init_from_mpc(qp, depth, alpha=alpha, beta=beta, N=mpc.N)
    else:
        p = init_structured(sys_, mpc, depth, alpha=alpha, beta=beta,
                            super_structured=arch == "super_structured")
    return tr.perturb(p, noise, np.random.default_rng(seed)) if noise else p


def cmd_train(a):
    sys_, mpc, _ = load_problem_arg(a.problem)
    ds = tr.Dataset.load(resolve_input(a.data))
    default_depth = 7 if a.arch == "htnn" else 3
    model = build_model(a.arch, sys_, mpc, ds, a.depth or default_depth, a.width, a.seed,
                        a.noise, a.alpha, a.beta)
    cfg = tr.AdamConfig(lr=a.lr, epochs=a.epochs, batch_size=a.batch_size, seed=a.seed)
    best, report = tr.train(model, ds, cfg)
    p = out_path(a.output or f"{a.arch}.json")
    best.save(p)
    rp = write_json(a.report or f"{a.arch}_report.json", report.to_dict())
    v0, vb = report.val_mse[0], min(report.val_mse)
    return {"output": str(p), "report": str(rp), "val_mse_initial": v0, "val_mse_best": vb,
            "test_mse": report.test_mse}


def cmd_simulate(a):
    sys_, mpc, _ = load_problem_arg(a.problem)
    x0 = parse_vec(a.x0, sys_.n_x, "--x0")
    ctrl = "apgd" if a.controller == "apgd" else load_model(a.controller)
    traj = cl.simulate(sys_, mpc, ctrl, x0, a.steps)
    ref = None
    if a.reference:
        ref_ctrl = "apgd" if a.reference == "apgd" else load_model(a.reference)
        ref = cl.simulate(sys_, mpc, ref_ctrl, x0, a.steps)
    p = out_path(a.output or "trajectory.csv")
    traj.to_csv(p)
    m = cl.trajectory_metrics(traj, mpc, ref)
    mp = write_json(a.metrics or "metrics.json", m)
    return {"output": str(p), "metrics": str(mp), **m}


def cmd_certify(a):
    if a.model is None and a.qp is None:
        raise UsageError("certify needs a model file or --qp")
    if a.model is not None:
        d = read_json(a.model)
        if d.get("type") == "solve_report":
            return _certify_solve(a, d)
        model = load_model(a.model)
    else:
        qp = load_qp_arg(a.qp)
        model = init_from_mpc(qp, a.depth or 3, alpha=a.alpha, beta=a.beta)
    net = to_htnn(model) if isinstance(model, UnfoldedParams) else model
    cert = lipschitz_cert(net)
    out = cert.to_dict()
    p = write_json(a.output or "lipschitz.json", out)
    return {"output": str(p), **out}


def _certify_solve(a, d):
    """Convergence certificate of a recorded solve against the exact minimizer."""
    if a.qp is None:
        raise UsageError("certifying a solve report needs --qp")
    qp = load_qp_arg(a.qp)
    box = BoxQp.from_condensed(qp, d["x0"])
    from .box_qp import SolveReport

    rep = SolveReport.from_dict(d)
    if rep.iterates is None:
        raise ValueError("solve report has no recorded iterates")
    try:
        u_star = active_set_oracle(box)
    except (OracleFailure, ValueError):
        u_star = apgd(box, tol=1e-14, max_iter=1_000_000).x
    lmin, lmax = box.eig_extremes()
    cert = convergence_cert(rep, u_star, lmax / lmin, accelerated=d.get("method") == "apgd",
                            min_points=a.min_points)
    out = cert.to_dict()
    out["final_error"] = float(np.linalg.norm(rep.x - u_star))
    p = write_json(a.output or "convergence.json", out)
    return {"output": str(p), **out}


def cmd_repro(a):
    """Desk-scale (or ``--full``) end-to-end run on the 2-mass benchmark."""
    sys_, mpc, d = load_problem_arg(a.problem)
    n_init, horizon = (500, 100) if a.full else (50, 30)
    ds = tr.generate_dataset(sys_, mpc, n_init, horizon, state_ranges(d, sys_.n_x),
                             seed=a.seed, jobs=a.jobs)
    ds.save(out_path("repro/dataset.npz"))
    epochs = a.epochs if a.epochs is not None else (50 if a.full else 200)
    cfg = tr.AdamConfig(lr=a.lr, epochs=epochs, seed=a.seed)
    x0 = np.array(REPRO_X0)
    if x0.size != sys_.n_x:
        x0 = np.resize(x0, sys_.n_x)
    archs = {"htnn": 7, "dense": 3, "structured": 3, "super_structured": 3}
    trajs = {"apgd": cl.simulate(sys_, mpc, "apgd", x0, a.steps)}
    metrics = {"dataset": {"samples": len(ds), "train": int(ds.train.size),
                           "val": int(ds.val.size), "test": int(ds.test.size)},
               "controllers": {}}
    for arch, depth in archs.items():
        model = build_model(arch, sys_, mpc, ds, depth, 4, a.seed, a.noise)
        best, report = tr.train(model, ds, cfg)
        best.save(out_path(f"repro/{arch}.json"))
        traj = cl.simulate(sys_, mpc, best, x0, a.steps)
        trajs[arch] = traj
        net = to_htnn(best) if isinstance(best, UnfoldedParams) else best
        m = cl.trajectory_metrics(traj, mpc, trajs["apgd"], timing=False)
        m.update({"val_mse_initial": report.val_mse[0], "val_mse_best": min(report.val_mse),
                  "test_mse": report.test_mse, "best_epoch": report.best_epoch,
                  "lipschitz": lipschitz_cert(net).L, "n_params": int(best.n_params)})
        metrics["controllers"][arch] = m
    metrics["controllers"]["apgd"] = cl.trajectory_metrics(trajs["apgd"], mpc, timing=False)
    cp = out_path("repro/comparison.csv")
    with open(cp, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["t"]
        for name in trajs:
            header += [f"{name}_x{i + 1}" for i in range(sys_.n_x)]
            header += [f"{name}_u{j + 1}" for j in range(sys_.n_u)]
        w.writerow(header)
        for t in range(a.steps + 1):
            row = [t]
            for traj in trajs.values():
                row += [repr(float(v)) for v in traj.states[t]]
                row += ([repr(float(v)) for v in traj.inputs[t]] if t < a.steps
                        else [""] * sys_.n_u)
            w.writerow(row)
    mp = write_json("repro/metrics.json", metrics)
    return {"comparison": str(cp), "metrics": str(mp)}


# -- parser --------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="htmpc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, seed=True):
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("-o", "--output")
        return sp

    s = common(sub.add_parser("condense", help="problem JSON -> condensed QP JSON"), seed=False)
    s.add_argument("problem", help="problem JSON or bundled name (two_mass, three_mass)")
    s.set_defaults(func=cmd_condense)

    s = common(sub.add_parser("solve", help="solve the QP at one initial state"), seed=False)
    s.add_argument("qp", help="condensed QP JSON or problem JSON")
    s.add_argument("--x0", required=True)
    s.add_argument("--method", choices=("apgd", "pgd"), default="apgd")
    s.add_argument("--alpha", type=float)
    s.add_argument("--beta", type=float)
    s.add_argument("--tol", type=float, default=1e-10)
    s.add_argument("--max-iter", type=int, default=100_000)
    s.add_argument("--residuals-csv")
    s.set_defaults(func=cmd_solve)

    s = common(sub.add_parser("compile-exact", help="min-max law JSON -> exact HTNN JSON"))
    s.add_argument("law")
    s.add_argument("--box", nargs=2, metavar=("LO", "HI"))
    s.add_argument("--check", type=int, default=1000, help="sample points for the self-check")
    s.set_defaults(func=cmd_compile)

    s = common(sub.add_parser("dataset", help="closed-loop APGD dataset (.npz)"))
    s.add_argument("problem")
    s.add_argument("--n-init", type=int, default=50)
    s.add_argument("--horizon", type=int, default=30)
    s.add_argument("--full", action="store_true", help="500 initial states x 100 steps")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_dataset)

    s = common(sub.add_parser("train", help="train a network on a dataset"))
    s.add_argument("problem")
    s.add_argument("--data", required=True)
    s.add_argument("--arch", choices=("htnn", "dense", "structured", "super_structured"),
                   default="htnn")
    s.add_argument("--depth", type=int)
    s.add_argument("--width", type=int, default=4)
    s.add_argument("--alpha", type=float)
    s.add_argument("--beta", type=float)
    s.add_argument("--noise", type=float, default=0.1,
                   help="multiplicative noise on the solver-derived initialization")
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--report")
    s.set_defaults(func=cmd_train)

    s = common(sub.add_parser("simulate", help="closed-loop simulation"), seed=False)
    s.add_argument("problem")
    s.add_argument("--controller", default="apgd", help="'apgd' or a model JSON")
    s.add_argument("--reference", help="'apgd' or a model JSON to compare inputs against")
    s.add_argument("--x0", default=",".join(str(v) for v in REPRO_X0))
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--metrics")
    s.set_defaults(func=cmd_simulate)

    s = common(sub.add_parser("certify", help="Lipschitz or convergence certificate"),
               seed=False)
    s.add_argument("model", nargs="?", help="HTNN / unfolded JSON, or a solve report")
    s.add_argument("--qp")
    s.add_argument("--depth", type=int)
    s.add_argument("--alpha", type=float)
    s.add_argument("--beta", type=float)
    s.add_argument("--min-points", type=int, default=3,
                   help="fewest error samples accepted for the rate fit of a solve report")
    s.set_defaults(func=cmd_certify)

    s = sub.add_parser("repro", help="end-to-end desk-scale reproduction")
    s.add_argument("--problem", default="two_mass")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--full", action="store_true")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_repro)
    return p


def _fail(kind, msg, code):
    print(json.dumps({"error": str(msg), "kind": kind, "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING)
        for name in ("jobs", "epochs", "steps", "n_init", "horizon", "depth"):
            v = getattr(a, name, None)
            if v is not None and v < (0 if name == "epochs" else 1):
                raise UsageError(f"--{name.replace('_', '-')} out of range: {v}")
        result = a.func(a)
    except UsageError as e:
        return _fail("usage", e, EXIT_USAGE)
    except (ArithmeticError, OracleFailure) as e:
        return _fail(type(e).__name__, e, EXIT_NUMERIC)
    except cl.ControllerFailure as e:
        code = EXIT_NUMERIC if isinstance(e.cause, ArithmeticError) else EXIT_DATA
        return _fail("ControllerFailure", e, code)
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as e:
        return _fail(type(e).__name__, e, EXIT_DATA)
    print(json.dumps(result, indent=1, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
