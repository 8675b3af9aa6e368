"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 3] [--json out.json]

Each row checks that both backends return the same answer before timing.
"""

import argparse
import json
import time

import numpy as np

from jumpfield import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    for n in (10_000, 200_000):
        yield f"uniform_cube 50x{n}x4", lambda b, n=n: kernels.uniform_cube(17, 0, 50, n, 4, backend=b, threads=1), \
            lambda a, b: a.tobytes() == b.tobytes()
    for n in (64, 256, 512):
        cost = rng.uniform(size=(n, n))
        yield f"hungarian {n}", lambda b, c=cost: kernels.hungarian(c, backend=b), \
            lambda a, b, c=cost: np.isclose(c[np.arange(len(a)), a].sum(), c[np.arange(len(b)), b].sum())
    for n in (500, 2000):
        pa, pb = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
        yield f"greedy_match {n}", lambda b, pa=pa, pb=pb: kernels.greedy_match(pa, pb, backend=b), \
            lambda a, b: np.array_equal(a, b)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--json", help="write the table as JSON")
    args = p.parse_args(argv)
    if kernels.BACKEND != "compiled":
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
    rows = []
    print(f"{'kernel':<28}{'compiled s':>12}{'python s':>12}{'speedup':>10}  same")
    for name, run, same in cases():
        ok = bool(same(run("compiled"), run("python")))
        tc = best_of(lambda: run("compiled"), args.repeat)
        tp = best_of(lambda: run("python"), args.repeat)
        rows.append({"kernel": name, "compiled_s": tc, "python_s": tp, "speedup": tp / tc, "same": ok})
        print(f"{name:<28}{tc:>12.4f}{tp:>12.4f}{tp / tc:>10.1f}  {ok}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
