"""Time the Jacobi SVD under the numba and pure-numpy backends.

    python3 benchmarks/bench_svd.py --sizes 32,64,128,256 --repeat 3
"""
import argparse
import statistics
import time

import numpy as np

from svfit import kernels, linalg


def time_svd(w, backend, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        f = linalg.svd(w, backend=backend)
        times.append(time.perf_counter() - start)
    return statistics.median(times), f


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="32,64,128,256")
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    backends = ["numpy"]
    if kernels.numba_available():
        backends.append("numba")
        linalg.svd(np.eye(3), backend="numba")  # compile outside the timed region
    else:
        print("numba not installed; timing the numpy backend only")

    rng = np.random.default_rng(args.seed)
    print(f"{'size':>9} {'sweeps':>6} " + " ".join(f"{b + ' [s]':>11}" for b in backends)
          + ("  speedup  max|dsigma|" if len(backends) == 2 else ""))
    for n in (int(s) for s in args.sizes.split(",")):
        w = rng.standard_normal((n, n))
        results = {b: time_svd(w, b, args.repeat) for b in backends}
        line = f"{n:>4}x{n:<4} {results['numpy'][1].sweeps:>6} " + " ".join(
            f"{results[b][0]:>11.4f}" for b in backends)
        if len(backends) == 2:
            gap = np.abs(results["numpy"][1].sigma - results["numba"][1].sigma).max()
            line += f"  {results['numpy'][0] / results['numba'][0]:>6.1f}x  {gap:.1e}"
        print(line)


if __name__ == "__main__":
    main()
