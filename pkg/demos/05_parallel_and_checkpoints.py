"""Worker processes and checkpoints leave the run log unchanged."""
import tempfile
from pathlib import Path

from qdzelda.config import ExperimentConfig
from qdzelda.runner import Run, checkpoint, restore, run_parallel, run_sequential


def clock():
    return 0  # fixed timestamps make logs comparable byte for byte


# Workers are started with 'spawn', which re-imports this file.
if __name__ == "__main__":
    cfg = ExperimentConfig(level_manifest="builtin:desk3", budget=200, seed=3)
    seq = run_sequential(cfg, clock=clock)
    par = run_parallel(cfg, worker_count=1, clock=clock)
    print("one worker reproduces the sequential log:", par.log_text() == seq.log_text())

    many = run_parallel(cfg, worker_count=3, clock=clock)
    print("three workers:", many.evaluations, "evaluations,", many.driver.primary_map.stats())

    with tempfile.TemporaryDirectory() as d:
        half = Run(cfg, clock=clock).run_sequential(stop_at=100)
        path = checkpoint(half, Path(d) / "ck")
        print("checkpoint files:", sorted(p.name for p in path.iterdir()))
        resumed = restore(path, clock=clock).run_sequential()
    print("resumed run matches:", resumed.log_text() == seq.log_text())
    print(seq.log_text().splitlines()[:3])
