#!/usr/bin/env python3
"""Benchmark the numba kernel backend against the numpy fallback.

Runs itself twice in subprocesses, once per value of DPAUDIT_BACKEND, on
identical inputs. The parent prints per-kernel timings, the speedup, and the
max-abs disagreement between the two backends. Exits nonzero if the backends
disagree beyond tolerance.

Usage: python benchmarks/bench_kernels.py [--n 2048] [--reps 30]
"""

import argparse
import json
import os
import subprocess
import sys
import tempfile
import time

import numpy as np

TOL = 1e-9


def build_inputs(n: int) -> dict:
    rng = np.random.default_rng(0)
    d, k, h = 64, 10, 128
    return {
        "X": rng.standard_normal((n, d)),
        "y": rng.integers(0, k, size=n),
        "W": rng.standard_normal((k, d)) * 0.1,
        "b": rng.standard_normal(k) * 0.1,
        "aW": rng.standard_normal((k, d)),
        "ab": rng.standard_normal(k),
        "W1": rng.standard_normal((h, d)) * 0.1,
        "b1": rng.standard_normal(h) * 0.1,
        "W2": rng.standard_normal((k, h)) * 0.1,
        "b2": rng.standard_normal(k) * 0.1,
        "aW1": rng.standard_normal((h, d)),
        "ab1": rng.standard_normal(h),
        "aW2": rng.standard_normal((k, h)),
        "ab2": rng.standard_normal(k),
    }


def kernel_calls(kr, v: dict, act: int) -> dict:
    c = 1.0
    return {
        "logreg_logits": lambda: kr.logreg_logits(v["W"], v["b"], v["X"]),
        "logreg_loss": lambda: kr.logreg_loss(v["W"], v["b"], v["X"], v["y"]),
        "logreg_grads": lambda: kr.logreg_grads(v["W"], v["b"], v["X"], v["y"]),
        "logreg_grad_input": lambda: kr.logreg_grad_input(
            v["W"], v["b"], v["X"], v["y"]),
        "logreg_clipped_grad_sum": lambda: kr.logreg_clipped_grad_sum(
            v["W"], v["b"], v["X"], v["y"], c),
        "logreg_reverse_step": lambda: np.concatenate(
            [a.ravel() for a in kr.logreg_reverse_step(
                v["W"], v["b"], v["X"], v["y"], v["aW"], v["ab"], c)]),
        "mlp_logits": lambda: kr.mlp_logits(
            v["W1"], v["b1"], v["W2"], v["b2"], v["X"], act),
        "mlp_loss": lambda: kr.mlp_loss(
            v["W1"], v["b1"], v["W2"], v["b2"], v["X"], v["y"], act),
        "mlp_grads": lambda: kr.mlp_grads(
            v["W1"], v["b1"], v["W2"], v["b2"], v["X"], v["y"], act),
        "mlp_grad_input": lambda: kr.mlp_grad_input(
            v["W1"], v["b1"], v["W2"], v["b2"], v["X"], v["y"], act),
        "mlp_clipped_grad_sum": lambda: kr.mlp_clipped_grad_sum(
            v["W1"], v["b1"], v["W2"], v["b2"], v["X"], v["y"], c, act),
        "mlp_reverse_step": lambda: np.concatenate(
            [a.ravel() for a in kr.mlp_reverse_step(
                v["W1"], v["b1"], v["W2"], v["b2"], v["X"], v["y"],
                v["aW1"], v["ab1"], v["aW2"], v["ab2"], c, act)]),
    }


def child(n: int, reps: int, out: str) -> None:
    from dpaudit import kernels as kr
    from dpaudit._backend import BACKEND

    calls = kernel_calls(kr, build_inputs(n), kr.ACT_TANH)
    timings, outputs = {}, {}
    for name, fn in calls.items():
        outputs[name] = np.asarray(fn(), dtype=np.float64)  # also JIT warmup
        best = float("inf")
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        timings[name] = best
    np.savez(out + ".npz", **outputs)
    with open(out + ".json", "w") as f:
        json.dump({"backend": BACKEND, "timings": timings}, f)


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=2048, help="batch size")
    ap.add_argument("--reps", type=int, default=30)
    ap.add_argument("--child-out", help=argparse.SUPPRESS)
    args = ap.parse_args()

    if args.child_out:
        child(args.n, args.reps, args.child_out)
        return 0

    results = {}
    with tempfile.TemporaryDirectory() as tmp:
        for backend in ("numpy", "numba"):
            out = os.path.join(tmp, backend)
            env = dict(os.environ, DPAUDIT_BACKEND=backend)
            subprocess.run(
                [sys.executable, __file__, "--n", str(args.n),
                 "--reps", str(args.reps), "--child-out", out],
                env=env, check=True,
            )
            with open(out + ".json") as f:
                results[backend] = json.load(f)["timings"]
            results[backend + "_arrays"] = dict(np.load(out + ".npz"))

    print(f"\nbatch={args.n}, f64, best of {args.reps} runs")
    print(f"{'kernel':<26}{'numpy (ms)':>12}{'numba (ms)':>12}"
          f"{'speedup':>9}{'max |diff|':>12}")
    failures = []
    for name in results["numpy"]:
        t_np = results["numpy"][name] * 1e3
        t_nb = results["numba"][name] * 1e3
        diff = float(np.max(np.abs(
            results["numpy_arrays"][name] - results["numba_arrays"][name])))
        print(f"{name:<26}{t_np:>12.3f}{t_nb:>12.3f}"
              f"{t_np / t_nb:>8.1f}x{diff:>12.2e}")
        if diff > TOL:
            failures.append(name)
    if failures:
        print(f"\nbackend disagreement above {TOL}: {failures}")
        return 1
    print(f"\nall kernels agree within {TOL}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
