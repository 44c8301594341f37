"""Compare the compiled and numpy BN kernels: wall time and output agreement.

    python3 benchmarks/bench_kernels.py --sizes 64x64 256x64 4096x256 --repeat 200
"""
import argparse
import json
import sys
import timeit

import numpy as np

from gprebn import kernels


def _cases(rows, cols, rng):
    x = rng.normal(size=(rows, cols))
    g = rng.normal(size=(rows, cols))
    mu, var = x.mean(axis=0), x.var(axis=0)
    gamma, beta = rng.uniform(0.5, 1.5, cols), rng.normal(size=cols)
    xhat = (x - mu) / np.sqrt(var + 1e-5)
    scale = gamma / np.sqrt(var + 1e-5)
    return {
        "batch_mean_var": (x,),
        "normalize_affine": (x, mu, var, gamma, beta, 1e-5),
        "bn_input_grad": (g, xhat, scale, True),
    }


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(u, v) for u, v in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def run(sizes, repeat, seed=0):
    backends = kernels.available_backends()
    rng = np.random.default_rng(seed)
    rows = []
    for size in sizes:
        r, c = (int(v) for v in size.lower().split("x"))
        for name, args in _cases(r, c, rng).items():
            row = {"kernel": name, "shape": f"{r}x{c}"}
            outs = {}
            for b in backends:
                fn = getattr(kernels.get_backend(b), name)
                outs[b] = fn(*args)
                t = min(timeit.repeat(lambda: fn(*args), number=repeat, repeat=3)) / repeat
                row[f"{b}_us"] = 1e6 * t
            if len(outs) == 2:
                row["speedup"] = row["python_us"] / row["compiled_us"]
                row["max_abs_diff"] = _max_diff(outs["compiled"], outs["python"])
            rows.append(row)
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", nargs="+", default=["8x4", "64x64", "256x64", "4096x256"])
    p.add_argument("--repeat", type=int, default=200)
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    args = p.parse_args(argv)
    if "compiled" not in kernels.available_backends():
        print("compiled kernels not built; timing the numpy backend only", file=sys.stderr)
    rows = run(args.sizes, args.repeat)
    if args.json:
        print(json.dumps(rows, indent=1))
        return 0
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':18s} {'shape':>10s} {'python us':>11s} {'compiled us':>12s} {'speedup':>8s} {'max|diff|':>10s}")
    for row in rows:
        print(f"{row['kernel']:18s} {row['shape']:>10s} {row['python_us']:11.2f} "
              f"{row.get('compiled_us', float('nan')):12.2f} {row.get('speedup', float('nan')):8.2f} "
              f"{row.get('max_abs_diff', float('nan')):10.2e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
