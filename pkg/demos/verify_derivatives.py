"""Check gradients and Hessian-vector products on the nonlinear benchmark.

Runs a Taylor remainder test, a finite-difference comparison of the HVP and
the agreement of the three second-order composition modes on a small mesh.

    python3 demos/verify_derivatives.py
"""
import numpy as np

from hessfem.bench import make_benchmark
from hessfem.verify import (run_fd_comparison, run_mode_agreement, run_symmetry_check,
                            run_taylor_test, summarize_fd)

NX = 8

# Taylor remainders need a tight state solve, otherwise solver noise swamps r_second.
p, _ = make_benchmark("model-nonlinear-id", NX, newton_tol=1e-14, newton_max_iter=40)
theta, dtheta = np.random.default_rng(0).standard_normal((2, p.n_param))
rep = run_taylor_test(p, theta, dtheta)
print("Taylor remainders")
for eps, r0, r1, r2 in zip(rep.eps, rep.r_zeroth, rep.r_first, rep.r_second):
    print(f"  eps={eps:.0e}  r0={r0:.3e}  r1={r1:.3e}  r2={r2:.3e}")
print("  slopes", {k: round(v, 3) for k, v in rep.slopes.items()}, "expected 1, 2, 3")

p, _ = make_benchmark("model-nonlinear-id", NX)
summary = summarize_fd(run_fd_comparison(p, (1e-1, 1e-2, 1e-3, 1e-4), n_samples=10, seed=0))
print("\nHVP against central differences of the gradient")
for h, s in summary.items():
    print(f"  h={h:.0e}  median e_v={s['median_e_v']:.2e}  max e_v={s['max_e_v']:.2e}  "
          f"max e_s={s['max_e_s']:.2e}")

rows = run_mode_agreement(p, n_samples=5, seed=0)
print("\nlargest disagreement between composition modes", f"{max(r['max'] for r in rows):.1e}")
sym = run_symmetry_check(p, n_samples=5, seed=0)
print("largest relative asymmetry of the Hessian", f"{max(r['rel_asym'] for r in sym):.1e}")
