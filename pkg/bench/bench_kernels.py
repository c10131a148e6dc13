"""Time the compiled and numpy RK4 kernels on training-sized workloads.

Usage: python bench/bench_kernels.py [--repeat N] [--json PATH]
"""
import argparse
import json
import time

import numpy as np

from flowrecover import kernels
from flowrecover.benchmarks import lorenz_model, lotka_volterra_model
from flowrecover.ode import adjoint_batch, solve_batch

CASES = [
    # name, model, inputs, batch, steps, substeps, dt
    ("lv_window50", lotka_volterra_model, 1, 4, 49, 4, 1.0),
    ("lv_subwindows", lotka_volterra_model, 1, 100, 1, 4, 1.0),
    ("lorenz_window10", lorenz_model, 0, 20, 9, 4, 0.05),
    ("lorenz_long", lorenz_model, 0, 1, 2000, 4, 0.005),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def run_case(case, backend, repeat):
    name, model_fn, m, B, steps, sub, dt = case
    model = model_fn()
    rng = np.random.default_rng(0)
    x0 = rng.uniform(1.0, 10.0, size=(B, model.library.n_states))
    u = np.ones((B, steps + 1, m))
    theta, lib = model.coefficients, model.library

    def fwd():
        return solve_batch(theta, lib, x0, u, dt, steps, sub, record=True, backend=backend)

    states, _, tape = fwd()
    g = np.ones_like(states)
    t_fwd = best_of(fwd, repeat)
    t_adj = best_of(lambda: adjoint_batch(tape, theta, lib, g, backend=backend), repeat)
    return t_fwd, t_adj


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json")
    args = ap.parse_args()
    backends = kernels.available()
    rows = []
    print(f"{'case':<18}{'backend':<9}{'solve ms':>10}{'adjoint ms':>12}")
    for case in CASES:
        res = {b: run_case(case, b, args.repeat) for b in backends}
        for b, (tf, ta) in res.items():
            print(f"{case[0]:<18}{b:<9}{1e3 * tf:>10.3f}{1e3 * ta:>12.3f}")
        row = {"case": case[0], **{f"{b}_solve_s": v[0] for b, v in res.items()},
               **{f"{b}_adjoint_s": v[1] for b, v in res.items()}}
        if "cython" in res:
            row["speedup_solve"] = res["python"][0] / res["cython"][0]
            row["speedup_adjoint"] = res["python"][1] / res["cython"][1]
            print(f"{'':<18}{'speedup':<9}{row['speedup_solve']:>10.1f}{row['speedup_adjoint']:>12.1f}")
        rows.append(row)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
