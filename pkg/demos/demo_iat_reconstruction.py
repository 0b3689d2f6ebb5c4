"""Small end-to-end power-density reconstruction: generate noisy data on a fine
mesh, reconstruct on the coarse mesh with the reduced formulation, and report
the conductivity error.  Runs in well under a minute.
"""
import numpy as np

from condrec import experiments as ex

for delta in (0.0, 0.01, 0.1):
    cfg = ex.ExperimentConfig(
        formulation="iat-reduced",
        case="I4",
        delta=delta,
        seed=1,
        coarse_scale=1,      # 48-element reconstruction mesh (demo scale)
        fine_refine=1,       # nested 192-element data mesh
        max_iters=1500,
        mu_max=8.0,
    )
    res = ex.run_experiment(cfg)
    print(f"delta={delta:<5} error={res.l2_error:.5f} iterations={res.iterations:5d} "
          f"stop={res.stop_reason:12s} ({res.time_per_iteration * 1e3:.1f} ms/it)")

print()
print("all-at-once flavour on the same data (short fixed budget):")
cfg = ex.ExperimentConfig(formulation="iat-aao", case="I4", delta=0.01, seed=1,
                          coarse_scale=1, fine_refine=1, max_iters=800, mu_max=8.0)
res = ex.run_experiment(cfg)
print(f"iat-aao: error={res.l2_error:.4f} after {res.iterations} iterations "
      f"(J = {res.report.final_cost:.3e})")

cfg = ex.ExperimentConfig(formulation="iat-elim-sigma", case="I4", delta=0.01, seed=1,
                          coarse_scale=1, fine_refine=1, max_iters=800, mu_max=8.0)
res = ex.run_experiment(cfg)
print(f"iat-elim-sigma: error={res.l2_error:.4f} after {res.iterations} iterations "
      f"(J = {res.report.final_cost:.3e})")
