"""Time the compiled kernels against the pure-numpy ones.

    python benchmarks/bench_kernels.py [--repeat 20]

Both paths are imported directly, so the SEQMC_DISABLE_NUMBA flag does not
matter here.  The first numba call (compilation or cache load) is excluded.
"""
import argparse
import time

import numpy as np

from seqmc import kernels
from seqmc.model import ColumnBatch


def _time(fn, args, repeat):
    fn(*args)
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def loglik_case(rng, S=8, D=20, N=40, K=8, frac=0.3):
    W = rng.gamma(1.0, 0.3, size=(S, D, K))
    mask = rng.random((D, N)) < frac
    batch = ColumnBatch.from_masked(rng.standard_normal((D, N)), mask)
    return W, 0.1, batch


def info_case(rng, S=64, A=800, B=32):
    q = rng.random((S, A, B))
    q /= q.sum(axis=2, keepdims=True)
    y = np.sort(rng.standard_normal((A, B)), axis=1)
    return q, y, np.full(S, 1.0 / S), np.ones(A)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)

    cases = [
        ("loglik_grad S=8 D=20 N=40", kernels.loglik_grad_numpy, kernels.loglik_grad_numba, loglik_case(rng)),
        ("loglik_grad S=8 D=50 N=100", kernels.loglik_grad_numpy, kernels.loglik_grad_numba,
         loglik_case(rng, D=50, N=100, K=20, frac=0.2)),
        ("info_tables S=64 A=800", kernels.info_tables_numpy, kernels.info_tables_numba, info_case(rng)),
    ]
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, f_np, f_nb, a in cases:
        out_np, out_nb = f_np(*a), f_nb(*a)
        diff = max(float(np.max(np.abs(np.asarray(x) - np.asarray(y)))) for x, y in zip(out_np[:2], out_nb[:2]))
        t_np = _time(f_np, a, args.repeat)
        t_nb = _time(f_nb, a, args.repeat)
        print(f"{name:32s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:8.1f} {diff:11.2e}")


if __name__ == "__main__":
    main()
