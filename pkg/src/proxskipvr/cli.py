"""Command-line harness: run, sweep-delta, verify, plot and gen-data.

Exit codes: 0 success, 1 I/O error, 2 configuration error, 3 parse error,
4 divergence, 5 verification failure. Outputs go to ``--out``, else to
``$PROXSKIPVR_OUT``, else to ``./out``.
"""
from __future__ import annotations

import argparse
import csv
import math
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields

import numpy as np

from . import costmodel, dataio, verify
from .config import ExperimentConfig
from .core import Rng
from .errors import (
    ConfigError,
    DivergenceError,
    InvalidInputError,
    InvalidParamsError,
    InvalidProblemError,
    InvalidStateError,
    NoConvergenceError,
    ParseError,
)
from .estimators import GD, Compressor, make_estimator, minibatch_smoothness
from .problem import CompositeProblem, ConsensusRegularizer, ZeroRegularizer, random_quadratic
from .solver import COLUMNS, SolverConfig, estimator_hyperparams, localgd_baseline, run

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_PARSE, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3, 4, 5
ENV_OUT = "PROXSKIPVR_OUT"
DEFAULT_DELTAS = [0.0] + [float(f"1e{e}") for e in range(-8, 0)]


def build_problem(cfg: ExperimentConfig) -> CompositeProblem:
    """Construct the lifted problem described by ``cfg`` and solve for its minimizer."""
    rng = Rng(cfg.data_seed)
    if cfg.source == "quadratic":
        if cfg.n % cfg.M:
            raise ConfigError(f"quadratic source needs M to divide n (n={cfg.n}, M={cfg.M})")
        f = random_quadratic(rng, cfg.M, cfg.n // cfg.M, cfg.d, cfg.kappa if cfg.kappa is not None else 100.0)
    else:
        if cfg.source == "synthetic":
            inst = dataio.generate_synthetic(rng.spawn(0), cfg.n, cfg.d, kappa_target=cfg.kappa or None,
                                             lam_fraction=None if cfg.kappa else 5e-4)
            ds = inst.dataset
        else:
            ds = dataio.load(cfg.source)
        part = dataio.partition(ds, cfg.M, rng.spawn(1))
        L0 = dataio.loss_smoothness(ds.dense())
        if cfg.lam is not None:
            lam = cfg.lam
        elif cfg.kappa is not None:
            lam = L0 / (cfg.kappa - 1.0) if L0 > 0 else 1.0
        else:
            lam = 5e-4 * L0 if L0 > 0 else 1.0
        f = dataio.to_objective(ds, part, lam)
    reg = ConsensusRegularizer() if cfg.regularizer == "consensus" else ZeroRegularizer()
    return CompositeProblem(f, reg).with_reference()


def build_estimator(cfg: ExperimentConfig):
    if cfg.estimator == "localgd":
        return None
    return make_estimator(cfg.estimator, cfg.tau, Compressor.parse(cfg.compressor))


def resolve_hyperparams(cfg, problem, est):
    """Theory values, with manual overrides for any of gamma, p, q that are set."""
    gamma, p, q = estimator_hyperparams(problem, est)
    if cfg.mode == "manual":
        gamma = cfg.gamma if cfg.gamma is not None else gamma
        p = cfg.p if cfg.p is not None else p
        if est.has_control:
            q = cfg.q if cfg.q is not None else q
    return gamma, p, q


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(path, header: list, columns: list, rows) -> None:
    """CSV with ``# key=value`` provenance lines ahead of the column header."""
    with open(path, "w", newline="") as fh:
        for k, v in header:
            fh.write(f"# {k}={_fmt(v)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_table(path):
    """Inverse of :func:`write_table`: ``(meta, columns, rows)`` with string cells."""
    meta, body = {}, []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("# "):
                k, _, v = line[2:].rstrip("\n").partition("=")
                meta[k] = v
            else:
                body.append(line)
    reader = list(csv.reader(body))
    if not reader:
        raise ConfigError(f"{path}: no column header")
    return meta, reader[0], reader[1:]


def write_meta(path, pairs) -> None:
    with open(path, "w") as fh:
        for k, v in pairs:
            fh.write(f"{k} = {_fmt(v)}\n")


def _out_dir(args) -> str:
    out = args.out or os.environ.get(ENV_OUT) or "out"
    os.makedirs(out, exist_ok=True)
    return out


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if getattr(args, "config", None):
        with open(args.config) as fh:
            cfg = ExperimentConfig.from_text(fh.read())
    overrides = {}
    for f in fields(ExperimentConfig):
        v = getattr(args, "cfg_" + f.name, None)
        if v is not None:
            overrides[f.name] = v
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return cfg.updated(overrides).validate()


def _problem_meta(problem, est):
    c = problem.constants()
    tau = est.tau if est is not None and est.tau is not None else problem.m
    return [
        ("L", c.L),
        ("L_max", c.L_max),
        ("mu", c.mu),
        ("L_tau", minibatch_smoothness(tau, problem.m, c.L, c.L_max)),
        ("blocks", problem.M),
        ("shard_size", problem.m),
        ("block_dim", problem.d),
    ]


def _trace_rows(trace):
    cols = [trace.columns[c] for c in COLUMNS]
    for i in range(len(trace)):
        yield [c[i] for c in cols]


def execute_run(cfg: ExperimentConfig, problem=None):
    """Run one configured experiment; returns ``(trace, header pairs, diverged)``."""
    problem = problem or build_problem(cfg)
    est = build_estimator(cfg)
    header = list(cfg.items()) + _problem_meta(problem, est)
    diverged = False
    if est is None:
        gamma = cfg.gamma if cfg.gamma is not None else 1.0 / (problem.M * problem.constants().L)
        try:
            trace = localgd_baseline(problem, cfg.local_steps, cfg.T, gamma)
        except DivergenceError as err:
            trace, diverged = err.trace, True
        header += [("label", trace.meta.get("estimator", "localgd")), ("gamma_used", gamma), ("p_used", None), ("q_used", None)]
    else:
        gamma, p, q = resolve_hyperparams(cfg, problem, est)
        sc = SolverConfig(gamma, p, cfg.T, cfg.seed, q, cfg.eps)
        try:
            trace = run(problem, est, sc, backend=cfg.backend)
        except DivergenceError as err:
            trace, diverged = err.trace, True
        header += [("label", est.describe()), ("gamma_used", gamma), ("p_used", p), ("q_used", q)]
    header += [("status", "diverged" if diverged else trace.status)]
    return trace, header, diverged


def cmd_run(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    trace, header, diverged = execute_run(cfg)
    write_table(os.path.join(out, "iterations.csv"), header, list(COLUMNS), _trace_rows(trace))
    meta = header + [
        ("iterations", trace.iterations),
        ("comms", trace.comms),
        ("grad_evals", trace.grad_evals),
        ("warnings", "; ".join(trace.warnings) if trace.warnings else "none"),
    ]
    write_meta(os.path.join(out, "meta.txt"), meta)
    print(f"{dict(header)['status']}: {trace.iterations} iterations, {trace.comms} communications -> {out}")
    return EXIT_DIVERGED if diverged else EXIT_OK


def _parse_deltas(text):
    if not text:
        return list(DEFAULT_DELTAS)
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse delta grid {text!r}") from None
    if any(v < 0 for v in vals):
        raise ConfigError("deltas must be nonnegative")
    return vals


def cmd_sweep_delta(args) -> int:
    cfg = load_config(args)
    if cfg.estimator not in ("sgd", "lsvrg", "hub"):
        raise ConfigError("sweep-delta compares against a variance-reduced or minibatch estimator")
    deltas = _parse_deltas(args.deltas)
    eps = cfg.eps if cfg.eps is not None else 1e-6
    out = _out_dir(args)
    problem = build_problem(cfg)
    est = build_estimator(cfg)
    base = GD()

    def go(e):
        gamma, p, q = estimator_hyperparams(problem, e)
        try:
            return run(problem, e, SolverConfig(gamma, p, cfg.T, cfg.seed, q, eps), backend=cfg.backend,
                       track_fgap=False)
        except DivergenceError as err:
            return err.trace

    with ThreadPoolExecutor(max_workers=2) as pool:
        tr_base, tr_vr = pool.map(go, [base, est])
    ok = int(tr_base.status == "converged" and tr_vr.status == "converged")
    c = problem.constants()
    m, tau = problem.m, est.tau
    L_tau = minibatch_smoothness(tau, m, c.L, c.L_max)
    cross = costmodel.crossover_delta(c.mu, c.L, L_tau, m, tau)
    rows = []
    for delta in deltas:
        rows.append([
            delta,
            costmodel.cost_ratio(delta, c.mu, c.L, L_tau, m, tau),
            costmodel.empirical_cost_ratio(delta, tr_base, tr_vr),
            ok,
        ])
    header = list(cfg.items()) + _problem_meta(problem, est) + [
        ("label", est.describe()),
        ("crossover_delta", cross),
        ("base_comms", tr_base.comms),
        ("base_grad_evals", tr_base.grad_evals),
        ("vr_comms", tr_vr.comms),
        ("vr_grad_evals", tr_vr.grad_evals),
    ]
    write_table(os.path.join(out, "sweep_delta.csv"), header,
                ["delta", "ratio_theory", "ratio_empirical", "converged"], rows)
    print(f"crossover delta (theory): {_fmt(cross)}; both converged: {bool(ok)} -> {out}")
    return EXIT_OK


SUITES = ("assumptions", "prox-facts", "theorem1", "all")


def run_suite(cfg, suite, seed, samples=100_000, states=20, seeds=200):
    """Reports for one verification suite on the configured problem."""
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; choose from {SUITES}")
    reports = []
    need_problem = suite != "prox-facts"
    problem = build_problem(cfg) if need_problem else None
    est = build_estimator(cfg) if need_problem else None
    if need_problem and est is None:
        raise ConfigError("verification needs one of the gd, sgd, lsvrg, hub estimators")
    if suite in ("prox-facts", "all"):
        for reg in (ZeroRegularizer(), ConsensusRegularizer()):
            reports.append(verify.check_prox_facts(reg, 10_000, seed=seed))
    if suite in ("assumptions", "all"):
        gamma, p, q = estimator_hyperparams(problem, est)
        T_traj = max(states, min(cfg.T, 2000))
        pts = verify.trajectory_states(problem, est, SolverConfig(gamma, p, T_traj, seed, q), states)
        reports.append(verify.check_unbiasedness(est, problem, pts, samples, seed))
        reports.append(verify.check_assumption4(est, problem, pts, samples, q, seed))
        if est.tau is not None:
            reports.append(verify.check_minibatch_lemma(problem, est.tau, [x for x, _ in pts[:10]], samples, seed))
    if suite in ("theorem1", "all"):
        gamma, p, q = estimator_hyperparams(problem, est)
        sc = SolverConfig(gamma, p, cfg.T, seed, q)
        seed_list = [seed * 1_000_003 + s for s in range(seeds)]
        reports.append(verify.check_theorem1(problem, est, sc, seed_list, backend=cfg.backend,
                                             min_seeds=min(100, seeds)))
        if est.kind == "sgd":
            reports.append(verify.check_neighborhood(problem, est, sc, seed_list, backend=cfg.backend))
    return reports


def cmd_verify(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    reports = run_suite(cfg, args.suite, cfg.seed, args.samples, args.states, args.seeds)
    header = list(cfg.items()) + [("suite", args.suite), ("samples", args.samples), ("states", args.states),
                                  ("seeds", args.seeds)]
    provenance = "".join(f"# {k}={_fmt(v)}\n" for k, v in header)
    with open(os.path.join(out, "verify.csv"), "w") as fh:
        fh.write(provenance)
        fh.write(verify.reports_to_csv(reports))
    text = verify.reports_to_text(reports)
    with open(os.path.join(out, "verify.txt"), "w") as fh:
        fh.write(provenance)
        fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VERIFY


TRACE_COLUMNS = {"comms", "psi"}
SWEEP_COLUMNS = {"delta", "ratio_theory", "ratio_empirical"}

PLOT_TEMPLATE = '''"""Plot script generated by proxskipvr; reads only the data files next to it."""
import csv
import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

HERE = os.path.dirname(os.path.abspath(__file__))
TRACES = {traces!r}
SWEEPS = {sweeps!r}


def load(name):
    with open(os.path.join(HERE, name), newline="") as fh:
        rows = [line for line in fh if not line.startswith("# ")]
    reader = csv.DictReader(rows)
    return list(reader)


if TRACES:
    fig, ax = plt.subplots()
    for name, label in TRACES:
        rows = load(name)
        xs = [float(r["comms"]) for r in rows]
        ys = [float(r["psi"]) for r in rows]
        pts = [(x, y) for x, y in zip(xs, ys) if y > 0 and not math.isnan(y)]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=label)
    ax.set_yscale("log")
    ax.set_xlabel("communication rounds")
    ax.set_ylabel("Lyapunov function")
    ax.legend()
    fig.savefig(os.path.join(HERE, "convergence.png"), dpi=150)

for name, label in SWEEPS:
    rows = [r for r in load(name) if float(r["delta"]) > 0]
    fig, ax = plt.subplots()
    delta = [float(r["delta"]) for r in rows]
    ax.plot(delta, [float(r["ratio_theory"]) for r in rows], marker="o", label="theory")
    ax.plot(delta, [float(r["ratio_empirical"]) for r in rows], marker="s", label="empirical")
    ax.axhline(1.0, color="red", linestyle="--")
    ax.set_xscale("log")
    ax.set_xlabel("delta")
    ax.set_ylabel("cost ratio")
    ax.set_title(label)
    ax.legend()
    fig.savefig(os.path.join(HERE, os.path.splitext(name)[0] + ".png"), dpi=150)
'''


def cmd_plot(args) -> int:
    out = _out_dir(args)
    traces, sweeps = [], []
    for i, path in enumerate(args.csv):
        meta, columns, _ = read_table(path)
        cols = set(columns)
        name = f"data_{i}.csv"
        if TRACE_COLUMNS <= cols:
            traces.append((name, meta.get("label", os.path.basename(path))))
        elif SWEEP_COLUMNS <= cols:
            sweeps.append((name, meta.get("label", os.path.basename(path))))
        else:
            missing = sorted(TRACE_COLUMNS - cols) if "delta" not in cols else sorted(SWEEP_COLUMNS - cols)
            raise ConfigError(f"{path}: missing columns {missing}")
        shutil.copyfile(path, os.path.join(out, name))
    with open(os.path.join(out, "plot.py"), "w") as fh:
        fh.write(PLOT_TEMPLATE.format(traces=traces, sweeps=sweeps))
    print(f"wrote plot.py and {len(args.csv)} data files -> {out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    if args.kappa is None and args.lam_fraction is None:
        args.lam_fraction = 5e-4
    inst = dataio.generate_synthetic(Rng(args.seed), args.n, args.d, args.kappa, lam_fraction=args.lam_fraction)
    path = args.output
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    if args.cache:
        dataio.write_cache(inst.dataset, path)
    else:
        with open(path, "w") as fh:
            fh.write(dataio.serialize_libsvm(inst.dataset))
    print(f"wrote {inst.dataset.n} rows (d={inst.dataset.d}, suggested lam={inst.lam!r}) -> {path}")
    return EXIT_OK


def _add_config_args(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--out", help=f"output directory (default ${ENV_OUT} or ./out)")
    g = p.add_argument_group("configuration fields (override the file)")
    for f in fields(ExperimentConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proxskipvr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one configured experiment")
    _add_config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-delta", help="theoretical and measured cost ratio over a delta grid")
    _add_config_args(p)
    p.add_argument("--deltas", help="comma-separated delta grid")
    p.set_defaults(func=cmd_sweep_delta)

    p = sub.add_parser("verify", help="run a verification suite")
    _add_config_args(p)
    p.add_argument("--suite", default="all", help=f"one of {', '.join(SUITES)}")
    p.add_argument("--samples", type=int, default=100_000, help="Monte Carlo samples per state")
    p.add_argument("--states", type=int, default=20, help="trajectory states for assumption checks")
    p.add_argument("--seeds", type=int, default=200, help="seeds for the rate check")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("plot", help="emit a plot script for trace or sweep CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", help=f"output directory (default ${ENV_OUT} or ./out)")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("gen-data", help="write a synthetic LibSVM dataset")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--d", type=int, default=10)
    p.add_argument("--kappa", type=float)
    p.add_argument("--lam-fraction", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache", action="store_true", help="write the 'n d' header cache format")
    p.add_argument("--output", "-o", required=True)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "verify" and args.suite not in SUITES:
        print(f"error: unknown suite {args.suite!r}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ParseError as err:
        print(f"parse error: {err}", file=sys.stderr)
        return EXIT_PARSE
    except DivergenceError as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, InvalidInputError, InvalidParamsError, InvalidProblemError, InvalidStateError,
            NoConvergenceError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
