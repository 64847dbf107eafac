"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one line per workload with the best-of-``repeat`` wall time of each
backend and the speed-up.
"""
import argparse
import timeit

import numpy as np

from sekf_transfer import _pykernels
from sekf_transfer.systems import TclabParams

try:
    from sekf_transfer import _kernels
except ImportError:  # pragma: no cover
    _kernels = None


def n_params(widths):
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def workloads(rng):
    spring = (2, 32, 32, 20)
    p_s, X_s = rng.normal(size=n_params(spring)) * 0.3, rng.normal(size=(8, 2))
    node = (4, 32, 32, 2)
    p_n = rng.normal(size=n_params(node)) * 0.1
    x0, u = rng.normal(size=(8, 2)), rng.normal(size=(8, 60, 2))
    Q = np.ascontiguousarray(rng.uniform(0, 100, (8640, 2)))
    tp, T0 = TclabParams().as_tuple(), np.array([296.15, 296.15])
    return {
        "mlp jacobian (8 x 1812)": lambda k: k.mlp_eval_jac(spring, p_s, X_s, True, False),
        "node roll-out (8 x 60 steps)": lambda k: k.node_integrate(node, p_n, x0, u, 0.025, 4),
        "node sensitivities (8 x 60)": lambda k: k.node_integrate(node, p_n, x0, u, 0.025, 4,
                                                                  True),
        "spring rk4 (1000 ic x 400)": lambda k: k.spring_rk4(
            1.0, 0.5, 1.0, 0.0, X_s[:, 0].repeat(125), X_s[:, 1].repeat(125), 0.05, 400, 20),
        "tclab rk4 (1 day)": lambda k: k.tclab_rk4(tp, T0, Q, 2.5, 4),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _kernels is None:
        raise SystemExit("compiled extension not built; run `pip install -e .` first")
    print(f"{'workload':32s} {'numpy [ms]':>11s} {'cython [ms]':>12s} {'speed-up':>9s}")
    for name, fn in workloads(np.random.default_rng(0)).items():
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat))
        t_cy = min(timeit.repeat(lambda: fn(_kernels), number=1, repeat=args.repeat))
        print(f"{name:32s} {1e3 * t_py:11.2f} {1e3 * t_cy:12.2f} {t_py / t_cy:8.1f}x")


if __name__ == "__main__":
    main()
