"""Wall-clock comparison of the compiled run loop against the pure-Python fallback.

Usage: python3 benchmarks/bench_backends.py [--steps N] [--repeat R]

Each case runs the same seeded configuration on both backends, checks that the
coin and refresh sequences agree, and reports the best-of-R time per step.
"""
import argparse
import time

import numpy as np

from proxskipvr import CompositeProblem, ConsensusRegularizer
from proxskipvr._backend import compiled_available
from proxskipvr.core import Rng
from proxskipvr.dataio import synthetic_instance
from proxskipvr.estimators import GD, HUB, LSVRG, SGD, Compressor
from proxskipvr.problem import random_quadratic
from proxskipvr.solver import SolverConfig, estimator_hyperparams, run


def cases():
    f, _ = synthetic_instance(0, 400, 20, 1e3, M=4)
    logistic = CompositeProblem(f, ConsensusRegularizer()).with_reference()
    quad = CompositeProblem(random_quadratic(Rng(1), 4, 25, 20, 1e3), ConsensusRegularizer()).with_reference()
    yield "logistic gd", logistic, GD()
    yield "logistic sgd tau=8", logistic, SGD(8)
    yield "logistic lsvrg tau=8", logistic, LSVRG(8)
    yield "logistic hub rand-k:5", logistic, HUB(8, Compressor("rand-k", 5))
    yield "quadratic lsvrg tau=8", quad, LSVRG(8)


def best_time(problem, est, cfg, backend, repeat):
    times, trace = [], None
    for _ in range(repeat):
        t0 = time.perf_counter()
        trace = run(problem, est, cfg, backend=backend, track_fgap=False)
        times.append(time.perf_counter() - t0)
    return min(times), trace


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not compiled_available():
        raise SystemExit("compiled extension not available; build with pip install -e . --no-build-isolation")
    print(f"{'case':<26}{'python us/step':>16}{'compiled us/step':>18}{'speedup':>10}  agree")
    for name, prob, est in cases():
        gamma, p, q = estimator_hyperparams(prob, est)
        cfg = SolverConfig(gamma, p, args.steps, seed=3, q=q)
        tp, a = best_time(prob, est, cfg, "python", args.repeat)
        tc, b = best_time(prob, est, cfg, "compiled", args.repeat)
        agree = all(np.array_equal(a[c], b[c]) for c in ("comms", "grad_evals", "theta", "y_updated"))
        per = 1e6 / args.steps
        print(f"{name:<26}{tp * per:>16.1f}{tc * per:>18.2f}{tp / tc:>9.1f}x  {agree}")


if __name__ == "__main__":
    main()
