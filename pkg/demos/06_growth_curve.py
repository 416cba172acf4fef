"""Fitting a log curve to archive growth and extrapolating it."""
import numpy as np

from qdzelda.cli import fit_log_curve, stats_report
from qdzelda.config import ExperimentConfig
from qdzelda.runner import run_sequential

run = run_sequential(ExperimentConfig(algorithm="EFME", level_manifest="builtin:desk3",
                                      budget=1500, seed=2))
pts = np.array([(r.evaluation_index, r.archive_size) for r in run.log], dtype=float)
fit = fit_log_curve(pts)
print(f"size ~ {fit.a:.3f} ln(x) + {fit.b:.3f}, r2 {fit.r_squared:.3f}")
for target in (5, 8, 20):
    print(f"  {target} cells after ~{fit.solve(target):,.0f} evaluations")
print(stats_report(run.log, target=8))

# Synthetic growth with bounded noise.
rng = np.random.default_rng(0)
x = np.arange(1, 13_001)
y = 29 * np.log(x) + rng.uniform(-17, 17, x.size)
print("synthetic r2:", round(fit_log_curve(np.c_[x, y]).r_squared, 3))
