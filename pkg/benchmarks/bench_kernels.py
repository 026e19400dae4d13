"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat R]
"""

import argparse
import timeit

import numpy as np

from coppkit import _fallback

try:
    from coppkit import _kernels
except ImportError:
    _kernels = None


def quantile_case(rng, n=5000, m=500_000):
    scores = rng.normal(size=n)
    atoms, inv = np.unique(scores, return_inverse=True)
    cum = np.cumsum(np.bincount(inv, weights=rng.exponential(size=n)))
    return (atoms, cum, float(cum[-1]), rng.exponential(size=m), 0.9, 1e-12)


def mixture_case(rng, N=1000, G=100, H=500):
    return (rng.normal(size=(N, G)), rng.normal(size=(N, H)), rng.uniform(0.5, 2, size=(N, H)),
            rng.dirichlet(np.ones(H), size=N))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    cases = {"weighted_quantile_sorted": quantile_case(rng), "gaussian_mixture_pdf": mixture_case(rng)}
    impls = {"python": _fallback}
    if _kernels is not None:
        impls["cython"] = _kernels
    print(f"{'kernel':<26}{'backend':<9}{'best (s)':>10}")
    for name, inputs in cases.items():
        best = {}
        for label, mod in impls.items():
            fn = getattr(mod, name)
            best[label] = min(timeit.repeat(lambda: fn(*inputs), number=1, repeat=args.repeat))
            print(f"{name:<26}{label:<9}{best[label]:>10.4f}")
        if "cython" in best:
            print(f"{'':<26}{'speedup':<9}{best['python'] / best['cython']:>9.2f}x")


if __name__ == "__main__":
    main()
