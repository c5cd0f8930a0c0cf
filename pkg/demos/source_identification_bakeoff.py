"""Recover a source term with three optimizers and compare their logs.

L-BFGS uses gradients only, Newton-CG uses exact Hessian-vector products and
the last run replaces those by finite differences of the gradient.

    python3 demos/source_identification_bakeoff.py [out_dir]
"""
import sys
import tempfile

from hessfem.bakeoff import relative_l2_error, run_optimizer_bakeoff
from hessfem.bench import b_ref, make_benchmark
from hessfem.fem import read_field

NX = 16
out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="bakeoff-")

_, spec = make_benchmark("source-id", NX)
for m in run_optimizer_bakeoff("source-id", nx=NX, out_path=out):
    theta = read_field(m.outputs["theta"])
    err = relative_l2_error(spec.mesh, theta, b_ref, corner_radius=0.1)
    print(f"{m.optimizer:13s} {m.status:9s} iterations={m.n_iter:3d}  "
          f"g*/g0={m.final_objective / m.initial_objective:.2e}  source error={err:.3f}")
print("logs and fields written to", out)
