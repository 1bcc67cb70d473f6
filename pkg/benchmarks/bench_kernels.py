"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from metatra import _kernels_py

try:
    from metatra import _kernels
except ImportError:
    _kernels = None


def _rollout_args(rng, n_agents=12, n_steps=200):
    pos = rng.uniform(0, 10, (n_agents, 2))
    return (pos, rng.uniform(-np.pi, np.pi, n_agents), np.full(n_agents, 1.0),
            rng.uniform(0, 10, (n_agents, 2)), rng.uniform(-0.05, 0.05, (n_steps, n_agents)),
            0.4, 0.2, 0.5, 1.0)


def _metric_args(rng, agents=2000, k=20, t=12):
    return rng.normal(size=(agents, k, t, 2)), rng.normal(size=(agents, t, 2))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    cases = {
        "social_force_rollout": _rollout_args(rng),
        "best_of_k_errors": _metric_args(rng),
    }
    backends = [("python", _kernels_py)] + ([("cython", _kernels)] if _kernels else [])
    if _kernels is None:
        print("compiled extension not built; timing the fallback only")
    print(f"{'kernel':<24}{'backend':<10}{'best ms':>10}")
    for name, a in cases.items():
        ref = None
        for label, mod in backends:
            fn = getattr(mod, name)
            out = fn(*a)
            if ref is None:
                ref = out
            else:
                same = all(np.allclose(x, y, rtol=0, atol=1e-12) for x, y in
                           zip(out if isinstance(out, tuple) else (out,), ref if isinstance(ref, tuple) else (ref,)))
                assert same, f"{name}: backends disagree"
            best = min(timeit.repeat(lambda: fn(*a), number=1, repeat=args.repeat))
            print(f"{name:<24}{label:<10}{best * 1e3:>10.2f}")


if __name__ == "__main__":
    main()
