"""The four algorithms side by side on the three desk-scale levels."""
import time

from qdzelda.algorithms import CmaConfig, EfmeConfig
from qdzelda.config import ExperimentConfig
from qdzelda.env import EnvConfig
from qdzelda.runner import run_sequential

budget = 600
base = ExperimentConfig(level_manifest="builtin:desk3", budget=budget, env=EnvConfig(step_limit=200))
variants = {
    "VME": base,
    "DME": base.replace(algorithm="DME"),
    "CMAME": base.replace(algorithm="CMAME", cma=CmaConfig(sigma0=0.1)),
    "EFME": base.replace(algorithm="EFME", efme=EfmeConfig(startup=100, explore_ratio=0.67)),
}
print(f"{'algorithm':<8}{'cells':>7}{'solved':>8}{'best':>8}{'seconds':>9}")
for name, cfg in variants.items():
    t0 = time.perf_counter()
    run = run_sequential(cfg, seed=0)
    s = run.driver.primary_map.stats()
    print(f"{name:<8}{s.occupied_cells:>7}{s.most_levels_solved:>8}{s.best_score:>8.1f}"
          f"{time.perf_counter() - t0:>9.1f}")
    if name == "EFME":
        print("  follow map:", run.maps["follow"].stats(), run.driver.source_counts)

# Archive growth over the run.
sizes = [r.archive_size for r in run.log]
print("EFME archive size every 100 evaluations:", sizes[99::100])
