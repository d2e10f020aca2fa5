"""Time the compiled sequence-gradient kernel against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--T 20] [--batch 16] [--hidden 32] [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from seqgrad import _core_py, kernels
from seqgrad.linalg import Rng
from seqgrad.training import TrainConfig, init_params

try:
    from seqgrad import _core
except ImportError:
    _core = None


def problem(arch, T, B, N, K=8):
    rng = Rng(0)
    p = init_params(arch, (K + 1, N, K), TrainConfig(), rng)
    X = rng.normal(0, 1, (T, B, K + 1))
    labels = rng.integers(0, K, (T, B))
    return p, X, labels


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--T", type=int, default=20)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if _core is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")

    print(f"T={args.T} B={args.batch} N={args.hidden}, best of {args.repeat}")
    print(f"{'arch':<6}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for arch in ("rnn", "lstm", "gru"):
        p, X, labels = problem(arch, args.T, args.batch, args.hidden)
        la, ga = kernels.seq_grad(p, X, labels, impl=_core)
        lb, gb = kernels.seq_grad(p, X, labels, impl=_core_py)
        assert np.isclose(la, lb, rtol=1e-12) and all(np.allclose(ga[n], gb[n]) for n in p)
        slow = best_of(lambda: kernels.seq_grad(p, X, labels, impl=_core_py), args.repeat)
        fast = best_of(lambda: kernels.seq_grad(p, X, labels, impl=_core), args.repeat)
        print(f"{arch:<6}{slow * 1e3:>12.3f}{fast * 1e3:>12.3f}{slow / fast:>9.1f}x")


if __name__ == "__main__":
    main()
