"""Benchmark the compiled kernels against the numpy reference.

Times the four batch primitives on GLM and MLP models at desk-scale shapes,
plus one end-to-end forward+reverse pass, under each available backend.

    python benchmarks/bench_backends.py [--repeats 2000]
"""

import argparse
import time

import numpy as np

from retrace.backend import available_backends


def _time(fn, repeats):
    fn()  # warm up
    best = float("inf")
    for _ in range(5):
        start = time.perf_counter()
        for _ in range(repeats):
            fn()
        best = min(best, (time.perf_counter() - start) / repeats)
    return best


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    backends = available_backends()

    shapes = [
        ("glm d=5 B=50", "glm", 5, None, 50),
        ("mlp 5-8-1 B=50", "mlp", 5, np.array([5, 8, 1], dtype=np.int64), 50),
        ("mlp 2-8-1 B=8", "mlp", 2, np.array([2, 8, 1], dtype=np.int64), 8),
    ]
    rows = []
    for label, family, d, widths, B in shapes:
        X = rng.normal(size=(B, d))
        y = rng.normal(size=B)
        w = rng.uniform(0.5, 1.5, size=B)
        if family == "glm":
            P = d
            args = lambda op, theta, v: {
                "losses": (theta, X, y, 0),
                "weighted_grad": (theta, X, y, w, 0),
                "grad_dots": (theta, X, y, v, 0),
                "hvp_sum": (theta, X, y, v, w, 0),
            }[op]
        else:
            P = int(np.sum(widths[1:] * (widths[:-1] + 1)))
            args = lambda op, theta, v: {
                "losses": (theta, widths, 0, X, y),
                "weighted_grad": (theta, widths, 0, X, y, w),
                "grad_dots": (theta, widths, 0, X, y, v),
                "hvp_sum": (theta, widths, 0, X, y, v, w),
            }[op]
        theta = rng.normal(size=P)
        v = rng.normal(size=P)
        for op in ("losses", "weighted_grad", "grad_dots", "hvp_sum"):
            times = {}
            for name, module in backends.items():
                fn = getattr(module, f"{family}_{op}")
                call_args = args(op, theta, v)
                times[name] = _time(lambda: fn(*call_args), repeats)
            rows.append((f"{label} {op}", times))
    return rows


_REPLAY_SNIPPET = """
import time
import numpy as np
import retrace as rt

train, test = rt.synthetic_split("blobs", 42, 1000, 4, 5,
                                 separation=2.0, noise=1.2)
model = rt.ModelFamily("mlp", feature_dim=5, hidden=(8,),
                       task_kind="classification")
rule = rt.UpdateRule("sgd", rt.LrSchedule.constant(0.03))
sched = rt.BatchSchedule.from_seed(9, 1000, 50, 6)
plan = rt.TrainPlan(train, model, rule, sched, init_seed=1)
phi = rt.MeasurementFn("test-loss-on-example", test.example(0))
start = time.perf_counter()
_, store = rt.train_recorded(plan, np.ones(1000))
mid = time.perf_counter()
rt.replay_metagradient(plan, phi, store)
end = time.perf_counter()
print(f"{mid - start} {end - mid}")
"""


def bench_replay():
    # backend selection happens at import, so each run gets a fresh process
    import os
    import subprocess
    import sys

    results = {}
    for name in available_backends():
        env = dict(os.environ, RETRACE_BACKEND=name)
        out = subprocess.run([sys.executable, "-c", _REPLAY_SNIPPET],
                             env=env, capture_output=True, text=True,
                             check=True)
        fwd, rev = map(float, out.stdout.split())
        results[name] = (fwd, rev)
    return results


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=2000)
    args = parser.parse_args()

    backends = available_backends()
    print(f"backends: {', '.join(backends)}\n")

    rows = bench_kernels(args.repeats)
    width = max(len(r[0]) for r in rows)
    names = list(backends)
    header = f"{'kernel':<{width}}  " + "  ".join(f"{n:>12}" for n in names)
    if len(names) == 2:
        header += f"  {'speedup':>8}"
    print(header)
    for label, times in rows:
        line = f"{label:<{width}}  " + "  ".join(
            f"{times[n] * 1e6:>10.2f}us" for n in names)
        if len(names) == 2:
            line += f"  {times['python'] / times['compiled']:>7.1f}x"
        print(line)

    print("\nend-to-end (train 120 steps + one reverse pass, N=1000 mlp):")
    for name, (fwd, rev) in bench_replay().items():
        print(f"  {name:>8}: forward {fwd * 1e3:.1f}ms  reverse {rev * 1e3:.1f}ms")


if __name__ == "__main__":
    main()
