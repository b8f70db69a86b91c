"""Compare the compiled and pure-Python clustering kernels.

Times pairwise distances, DBSCAN labelling and silhouette scores on random
blobs, checks both backends agree, and prints one CSV row per kernel and size.

    python3 benchmarks/bench_kernels.py --sizes 300 1000 3394 --dim 64
"""
import argparse
import sys
import time

import numpy as np

from hedn import _kernels_py

try:
    from hedn import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def blobs(n, dim, seed):
    r = np.random.default_rng(seed)
    centres = r.normal(scale=6.0, size=(9, dim))
    return np.ascontiguousarray(centres[r.integers(0, 9, n)] + r.normal(size=(n, dim)))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[300, 1000, 3394])
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if _kernels_c is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1

    eps = float(np.sqrt(2 * args.dim))  # roughly the within-blob distance
    print("kernel,n,dim,cython_s,python_s,speedup,agree")
    for n in args.sizes:
        x = blobs(n, args.dim, args.seed)
        tc, dc = best_of(lambda: _kernels_c.pairwise_distances(x), args.repeat)
        tp, dp = best_of(lambda: _kernels_py.pairwise_distances(x), args.repeat)
        rows = [("pairwise_distances", tc, tp, bool(np.max(np.abs(dc - dp)) < 1e-9))]

        tc, lc = best_of(lambda: _kernels_c.dbscan_labels(dc, eps, 5), args.repeat)
        tp, lp = best_of(lambda: _kernels_py.dbscan_labels(dc, eps, 5), args.repeat)
        rows.append(("dbscan_labels", tc, tp, bool(np.array_equal(lc, lp))))

        labels = np.ascontiguousarray(np.asarray(lc, dtype=np.int64))
        k = int(labels.max()) + 1
        tc, sc = best_of(lambda: _kernels_c.silhouette_samples(dc, labels, k), args.repeat)
        tp, sp = best_of(lambda: _kernels_py.silhouette_samples(dc, labels, k), args.repeat)
        rows.append(("silhouette_samples", tc, tp, bool(np.allclose(sc, sp, atol=1e-12, equal_nan=True))))

        for name, tc, tp, agree in rows:
            print(f"{name},{n},{args.dim},{tc:.6f},{tp:.6f},{tp / max(tc, 1e-12):.1f},{agree}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
