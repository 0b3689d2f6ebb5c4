"""Constrained Newton on the quadratic family: a-priori versus a-posteriori
regularization weights, geometric cost decay, and the center-distance bound.
"""
import numpy as np

from condrec import solvers as sv

rng = np.random.default_rng(2)
n = 8
A = rng.normal(size=(n, n))
x_true = rng.uniform(-0.5, 0.5, n)
e = rng.normal(size=n)
e *= 0.02 / np.linalg.norm(e)
box = sv.BoxFeasible(-1.0, 1.0)
cost = sv.QuadraticLeastSquares(A, A @ x_true + e, box)
eta = float(e @ e) / 2
x0 = np.clip(x_true + 0.4 * rng.normal(size=n), -1, 1)

print("--- a-priori schedule alpha_k = alpha0 theta^k ---")
cfg = sv.NewtonConfig(schedule="a-priori", alpha0=1.0, theta=0.6, tau=2.0, eta=eta,
                      reg_center=np.zeros(n), max_iters=60,
                      inner_tol=1e-10, inner_budget=200000)
rep = sv.newton_sqp(cost, box, x0, cfg)
print(f"stopped by {rep.stop_reason} at k* = {rep.k_star}")
r_dag = 0.5 * np.linalg.norm(x_true) ** 2
for k, J in enumerate(rep.cost_history):
    bound = cfg.alpha0 / cfg.theta * r_dag * cfg.theta**k + eta if k else np.inf
    print(f"  k={k:2d}  J={J:.3e}  alpha={rep.alpha_history[k] if k < len(rep.alpha_history) else '-'}"
          f"  bound={bound:.3e}")

print("--- a-posteriori band sigma_lo <= Q/J <= sigma_hi ---")
cfg = sv.NewtonConfig(schedule="a-posteriori", sigma_lo=0.2, sigma_hi=0.8, tau=10.0,
                      eta=eta, reg_center=np.zeros(n), max_iters=60,
                      inner_tol=1e-10, inner_budget=200000, store_iterates=True)
rep = sv.newton_sqp(cost, box, x0, cfg)
print(f"stopped by {rep.stop_reason} at k* = {rep.k_star}")
ratios = [b / a for a, b in zip(rep.cost_history, rep.cost_history[1:])]
print("cost decay ratios (all <= sigma_hi):", np.array_str(np.array(ratios), precision=3))
print("center distances R(x_k) <= R(x_true) =",
      0.5 * np.linalg.norm(x_true) ** 2)
for k, x in enumerate(rep.iterates):
    print(f"  k={k:2d}  R={0.5 * np.linalg.norm(x) ** 2:.4f}")
