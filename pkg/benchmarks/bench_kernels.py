"""Numba vs numpy timings for the three hot kernels.

    python3 benchmarks/bench_kernels.py --lanes 1000 --reps 5

The reverse sweep and tape replay run on a real DPF-SGR tape (stochastic
volatility, N=25, T=100); the resampling search runs on random weights.
Each kernel is called once per backend before timing so numba's compile
time is not counted.  With numba missing only the numpy column is filled.
"""

import argparse
import statistics
import time

import numpy as np

from sgrpf import _accel
from sgrpf import adcore as ad
from sgrpf import resampling as rs
from sgrpf.filters import FilterConfig, run_filter
from sgrpf.ssm import get_model, simulate


def timed(fn, reps):
    fn()
    out = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def kernels(lanes, n, t, search_n):
    model = get_model("sv")
    data = simulate(model, model.true_theta, t, 0)
    run = run_filter(model, data, list(model.true_theta), FilterConfig(variant="dpf_sgr", n_particles=n, lanes=lanes, seed=1))
    tape = run.tape
    leaves = run.theta_leaves()

    rng = np.random.default_rng(0)
    w = rng.gamma(0.3, size=(search_n, lanes))
    probs = w / w.sum(axis=0)
    u = rng.random((search_n, lanes))
    return {
        f"sweep ({len(tape._op)} nodes)": lambda: ad.grad_values(run.objective, leaves),
        "replay": lambda: tape.replay(),
        f"search (N={search_n})": lambda: rs.draw_ancestors("stratified", probs, u),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--lanes", type=int, default=1000)
    p.add_argument("--n", type=int, default=25)
    p.add_argument("--t", type=int, default=100)
    p.add_argument("--search-n", type=int, default=4096)
    p.add_argument("--reps", type=int, default=5)
    args = p.parse_args(argv)

    work = kernels(args.lanes, args.n, args.t, args.search_n)
    backends = ["numpy"] + (["numba"] if _accel.HAVE_NUMBA else [])
    print(f"{'kernel':<28}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name, fn in work.items():
        row = []
        for b in backends:
            with _accel.forced_backend(b):
                row.append(timed(fn, args.reps))
        line = f"{name:<28}" + "".join(f"{s * 1e3:>10.2f}ms" for s in row)
        if len(row) == 2:
            line += f"{row[0] / row[1]:>11.2f}x"
        print(line)


if __name__ == "__main__":
    main()
