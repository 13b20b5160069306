#!/usr/bin/env python3
"""Benchmark the numba assembly kernels against the pure-numpy fallback.

Times the hot kernels on realistic chunk shapes (low-order and enriched
local assembly, coefficient evaluation) and a full nonlinear Jacobian
assembly.  Run directly:

    python benchmarks/bench_kernels.py [--cells N]

DWROPT_NUMBA only selects the *default* path at import time; this script
calls both implementations explicitly.
"""

import argparse
import time

import numpy as np

from dwropt import kernels
from dwropt.fem import assemble_matrix, build_space, interpolate
from dwropt.mesh import UNIT_SQUARE, build_initial, refine_all
from dwropt.problem import make_plaplace_control


def timeit(fn, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_local_kernels(ncells):
    rng = np.random.default_rng(1)
    rows = []
    for label, nq, nloc in (("Q1 matrix (9qp, 4loc)", 9, 4),
                            ("Q2 matrix (16qp, 9loc)", 16, 9)):
        wdet = rng.random((ncells, nq))
        phi = rng.random((nq, nloc))
        gphi = rng.random((nq, nloc, 2))
        inv_h = 1.0 + rng.random(ncells)
        K = rng.random((ncells, nq, 2, 2))
        cf = rng.random((ncells, nq))

        args = (wdet, phi, gphi, phi, gphi, inv_h, K, cf)
        if kernels.HAS_NUMBA:
            kernels.local_matrix_numba(*args)  # JIT warmup
            t_nb = timeit(lambda: kernels.local_matrix_numba(*args))
        else:
            t_nb = float("nan")
        t_np = timeit(lambda: kernels.local_matrix_numpy(*args))
        rows.append((label, t_nb, t_np))

    nq, nloc = 16, 9
    dofs = rng.integers(0, 4 * ncells, size=(ncells, nloc)).astype(np.int64)
    coefs = rng.random(4 * ncells)
    gphi = rng.random((nq, nloc, 2))
    inv_h = 1.0 + rng.random(ncells)
    if kernels.HAS_NUMBA:
        kernels.eval_gradients_numba(dofs, coefs, gphi, inv_h)
        t_nb = timeit(lambda: kernels.eval_gradients_numba(dofs, coefs, gphi, inv_h))
    else:
        t_nb = float("nan")
    t_np = timeit(lambda: kernels.eval_gradients_numpy(dofs, coefs, gphi, inv_h))
    rows.append(("gradient evaluation (16qp)", t_nb, t_np))
    return rows


def bench_jacobian(levels=4):
    """Full linearized-operator assembly on a uniformly refined mesh."""
    problem = make_plaplace_control(alpha=1.0, p=4.0, eps=1.0)
    mesh = build_initial(UNIT_SQUARE, 0.5)
    for _ in range(levels):
        mesh = refine_all(mesh)
    space = build_space(mesh, "cg", 1)
    u = interpolate(space, lambda x, y: np.sin(3 * x) * y)

    def run():
        assemble_matrix(problem.a_u_fields, space, space, coeffs={"u": u})

    run()  # warmup (JIT + tabulation caches)
    return mesh.ncells, timeit(run, repeats=3)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cells", type=int, default=50_000)
    args = ap.parse_args()

    print(f"numba available: {kernels.HAS_NUMBA}; active path: "
          f"{'numba' if kernels.USE_NUMBA else 'numpy'}")
    print(f"\nper-kernel timings on {args.cells} cells (best of 5):")
    print(f"{'kernel':34s} {'numba':>10s} {'numpy':>10s} {'speedup':>8s}")
    for label, t_nb, t_np in bench_local_kernels(args.cells):
        speed = t_np / t_nb if t_nb == t_nb and t_nb > 0 else float("nan")
        print(f"{label:34s} {t_nb*1e3:9.2f}ms {t_np*1e3:9.2f}ms {speed:7.1f}x")

    ncells, t = bench_jacobian()
    print(f"\nnonlinear Jacobian assembly ({ncells} cells, active path): {t*1e3:.1f} ms")


if __name__ == "__main__":
    main()
