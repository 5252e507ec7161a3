"""Compare the compiled kernels with the pure-numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--k 2000] [--repetitions 20]

Prints one row per kernel with the median time of each backend and the
speed ratio.  Without the compiled extension only the fallback is timed.
"""
import argparse

from fitrank import kernels
from fitrank.serving import backend_comparison


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--k", type=int, default=2000, help="candidates per request")
    parser.add_argument("--heads", type=int, default=2)
    parser.add_argument("--head-dim", type=int, default=64)
    parser.add_argument("--n-queries", type=int, default=64)
    parser.add_argument("--repetitions", type=int, default=20)
    args = parser.parse_args()

    timings = backend_comparison(k=args.k, heads=args.heads, head_dim=args.head_dim,
                                 n_queries=args.n_queries, repetitions=args.repetitions)
    names = list(timings)
    kernels_timed = list(timings[names[0]])
    print(f"active backend: {kernels.BACKEND}")
    header = f"{'kernel':<28}" + "".join(f"{n + ' ms':>14}" for n in names)
    if len(names) == 2:
        header += f"{'python/compiled':>17}"
    print(header)
    for kernel in kernels_timed:
        row = f"{kernel:<28}" + "".join(f"{timings[n][kernel] * 1e3:14.4f}" for n in names)
        if len(names) == 2:
            row += f"{timings['python'][kernel] / timings['compiled'][kernel]:17.2f}"
        print(row)


if __name__ == "__main__":
    main()
