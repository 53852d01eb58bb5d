"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--sim]

Prints one row per kernel with the median time per call for each backend
and the speedup. Both backends are checked to agree before timing. ``--sim``
also times one default harvest_conf simulation under each backend.
"""
import argparse
import os
import statistics
import subprocess
import sys
import timeit

import numpy as np

from harvestnet._kernels import compiled_backend, python_backend


def cases(rng):
    logits5 = rng.standard_normal(5)
    emb = rng.standard_normal(128)
    ex = rng.standard_normal((18, 128))
    L = rng.standard_normal((1000, 5))
    targets = np.array([0], dtype=np.intp)
    n, d, K = 1000, 64, 5
    W, b, X = rng.standard_normal((K, d)) * 0.1, rng.standard_normal(K), rng.standard_normal((n, d))
    y = rng.integers(0, K, n).astype(np.intp)
    w = np.full(n, 1.0 / n)
    W1, b1, X1 = rng.standard_normal((2, 1)), rng.standard_normal(2), rng.standard_normal((n, 1))
    y1 = rng.integers(0, 2, n).astype(np.intp)

    def grad(W, b, X, y):
        gW, gb = np.empty_like(W), np.empty_like(b)
        return lambda m: m.xent_grad(W, b, X, y, w, 1e-4, gW, gb)

    resid = np.empty_like(L)
    yl = rng.integers(0, 5, 1000).astype(np.intp)
    return [
        ("softmax_row (K=5)", lambda m: m.softmax_row(logits5)),
        ("softmax_rows (1000x5)", lambda m: m.softmax_rows(L)),
        ("target_conf", lambda m: m.target_conf(logits5, targets)),
        ("sq_dist (d=128)", lambda m: m.sq_dist(emb, ex[0])),
        ("median_sq_dist (18x128)", lambda m: m.median_sq_dist(ex, emb)),
        ("xent_resid (1000x5)", lambda m: m.xent_resid(L, yl, w, resid)),
        ("xent_grad (1000x64, K=5)", grad(W, b, X, y)),
        ("xent_grad (1000x1, K=2)", grad(W1, b1, X1, y1)),
    ]


SIM_SNIPPET = """
import time
from harvestnet import BACKEND
from harvestnet.simulate import Scenario, SimConfig, run_simulation
from harvestnet.data import SynthConfig
sc = Scenario.from_synth(SynthConfig())
t = time.perf_counter()
r = run_simulation(SimConfig(policy="harvest_conf"), sc)
print(BACKEND, time.perf_counter() - t, r.accuracy_curve[-1])
"""


def time_simulation():
    for pure in ("0", "1"):
        env = dict(os.environ, HARVEST_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", SIM_SNIPPET], env=env, capture_output=True,
                             text=True, check=True).stdout.split()
        print(f"simulation ({out[0]:8s}) {float(out[1]):8.2f}s  final accuracy {float(out[2]):.4f}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--sim", action="store_true")
    args = ap.parse_args()
    if compiled_backend is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'compiled':>12s} {'numpy':>12s} {'speedup':>8s}")
    for name, f in cases(rng):
        a, b = f(compiled_backend), f(python_backend)
        if not np.allclose(a, b, rtol=1e-10, atol=1e-12):
            raise SystemExit(f"{name}: backends disagree")
        times = {}
        for label, mod in (("c", compiled_backend), ("py", python_backend)):
            timer = timeit.Timer(lambda: f(mod))
            number, _ = timer.autorange()
            times[label] = statistics.median(t / number for t in timer.repeat(args.repeat, number))
        print(f"{name:28s} {times['c'] * 1e6:10.2f}us {times['py'] * 1e6:10.2f}us {times['py'] / times['c']:7.1f}x")
    if args.sim:
        time_simulation()


if __name__ == "__main__":
    main()
