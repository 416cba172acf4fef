"""Command line: ``qdzelda run|replay|stats|export-table``.

Exit status is 0 on success, 1 for invalid input (config, files, features)
and 2 for failures while running.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .archive import ArchiveFormatError, EvaluationResult, map_stats, parse_feature, read_archive
from .config import ConfigError, ExperimentConfig, load_config, validate_files
from .env import Action, Terminal, load_level_set, run_episode
from .policy import NetworkPolicy
from .runner import (MalformedLog, Run, checkpoint, parse_log, restore, run_parallel)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class DegenerateFit(ValueError):
    pass


class FeatureNotFound(LookupError):
    pass


# ------------------------------------------------------------ growth curve

@dataclass(frozen=True)
class LogFit:
    a: float
    b: float
    r_squared: float

    def predict(self, x):
        return self.a * np.log(x) + self.b

    def solve(self, target: float) -> float:
        """Evaluation count at which the fitted curve reaches ``target``."""
        if self.a <= 0:
            return math.inf
        try:
            return math.exp((target - self.b) / self.a)
        except OverflowError:
            return math.inf


def fit_log_curve(points: Sequence[Tuple[float, float]]) -> LogFit:
    """Least-squares fit of ``y = a ln(x) + b``.

    R^2 is ``1 - SS_res / SS_tot``, taken as 1 when ``y`` is constant.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        raise DegenerateFit(f"need at least 3 points, got {len(pts)}")
    x, y = pts[:, 0], pts[:, 1]
    if np.any(x < 1):
        raise DegenerateFit("x values must be >= 1")
    if np.all(x == x[0]):
        raise DegenerateFit("all x values are equal")
    lx = np.log(x)
    lx_c = lx - lx.mean()
    y_c = y - y.mean()
    a = float(lx_c @ y_c / (lx_c @ lx_c))
    b = float(y.mean() - a * lx.mean())
    ss_tot = float(y_c @ y_c)
    resid = y - (a * lx + b)
    ss_res = float(resid @ resid)
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return LogFit(a, b, r2)


# ------------------------------------------------------------------ stats

def stats_report(records, target: float = 300.0) -> dict:
    if not records:
        raise MalformedLog("run log has no records", 2)
    last = records[-1]
    report = {
        "fitness_evaluations": last.evaluation_index,
        "agents_in_map": last.archive_size,
        "most_levels_solved": last.most_levels_solved,
        "best_score": last.best_score,
    }
    pts = [(r.evaluation_index, r.archive_size) for r in records]
    try:
        fit = fit_log_curve(pts)
    except DegenerateFit:
        return report
    report.update(log_fit_a=fit.a, log_fit_b=fit.b, log_fit_r2=fit.r_squared,
                  target_size=target, evaluations_to_target=fit.solve(target))
    return report


def cmd_stats(log_path: Union[str, Path], target: float = 300.0) -> dict:
    try:
        text = Path(log_path).read_text()
    except OSError as err:
        raise MalformedLog(f"cannot read {log_path}: {err.strerror}") from None
    return stats_report(parse_log(text), target)


def _format_report(report: dict) -> str:
    def fmt(v):
        return f"{v:.6g}" if isinstance(v, float) else str(v)
    return "".join(f"{k}={fmt(v)}\n" for k, v in report.items())


# --------------------------------------------------------------------- run

def summarize(run: Run) -> dict:
    primary = map_stats(run.driver.primary_map)
    summary = {
        "algorithm": run.cfg.algorithm,
        "seed": run.cfg.seed,
        "fitness_evaluations": run.evaluations,
        "agents_in_map": primary.occupied_cells,
        "most_levels_solved": primary.most_levels_solved,
        "step_limit": run.cfg.env.step_limit,
    }
    if run.cfg.algorithm == "EFME":
        follow = map_stats(run.maps["follow"])
        summary.update(explore_ratio=run.cfg.efme.explore_ratio,
                       explore_map_size=primary.occupied_cells,
                       follow_map_size=follow.occupied_cells,
                       follow_min_total_timesteps=follow.min_total_timesteps)
    return summary


def write_outputs(run: Run, out: Path) -> dict:
    from .archive import archive_to_text

    out.mkdir(parents=True, exist_ok=True)
    (out / "run_log.csv").write_text(run.log_text())
    topo = run.cfg.topology.hash
    for name, m in run.maps.items():
        (out / f"{name}.archive").write_text(archive_to_text(m, run.store, topo))
    (out / "config.ini").write_text(run.cfg.to_text())
    summary = summarize(run)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_run(config_path, out_dir, workers: Optional[int] = None, seed: Optional[int] = None,
            checkpoint_every: int = 0, resume: Optional[str] = None) -> dict:
    if resume:
        run = restore(resume)
    else:
        cfg = load_config(config_path)
        if seed is not None:
            cfg = cfg.replace(seed=seed)
        if workers is not None:
            cfg = cfg.replace(workers=workers)
        validate_files(cfg)
        run = Run(cfg)
    out = Path(out_dir)
    if run.cfg.workers > 0:
        run_parallel(run.cfg, worker_count=run.cfg.workers, run=run)
    elif checkpoint_every > 0:
        while not run.done:
            run.run_sequential(stop_at=run.evaluations + checkpoint_every)
            checkpoint(run, out / "checkpoint")
    else:
        run.run_sequential()
    return write_outputs(run, out)


# ------------------------------------------------------------------ replay

TRAJECTORY_HEADER = "tick,action,avatar_x,avatar_y,score"


@dataclass
class Trajectory:
    rows: List[Tuple[int, str, int, int, float]]
    terminal: Terminal
    won: bool
    steps_used: int
    score: float
    archived: Optional[object] = None  # EpisodeResult from the snapshot, if stored

    def to_csv(self) -> str:
        lines = [TRAJECTORY_HEADER] + [f"{t},{a},{x},{y},{s!r}" for t, a, x, y, s in self.rows]
        return "\n".join(lines) + "\n"


def replay(cfg: ExperimentConfig, archive_path, feature_text: str, level_index: int) -> Trajectory:
    elite_map, store, _ = read_archive(archive_path)
    feature = parse_feature(feature_text, elite_map.scheme)
    entry = elite_map.get(feature) if feature.n_levels == elite_map.n_levels else None
    if entry is None or store is None or entry.genome_id not in store:
        raise FeatureNotFound(f"no elite for feature {feature_text} in {archive_path}")
    levels = load_level_set(cfg.manifest_path())
    if not 0 <= level_index < len(levels):
        raise FeatureNotFound(f"level index {level_index} outside 0..{len(levels) - 1}")
    level = levels[level_index]
    policy = NetworkPolicy(store[entry.genome_id], cfg.topology, cfg.observation)
    trace: list = []
    result = run_episode(level, policy, cfg.env, trace=trace)
    rows = [(s.tick, Action(a).name, s.avatar_pos[1], s.avatar_pos[0], s.score) for a, s in trace]
    archived = None
    stored: Optional[EvaluationResult] = store.results.get(entry.genome_id)
    if stored is not None:
        archived = stored.per_level[level_index]
    final = trace[-1][1].terminal if trace else Terminal.RUNNING
    return Trajectory(rows, final, result.won, result.steps_used, result.score, archived)


def cmd_replay(config_path, archive_path, feature_text: str, level_index: int,
               out_path) -> Trajectory:
    cfg = load_config(config_path)
    traj = replay(cfg, archive_path, feature_text, level_index)
    Path(out_path).write_text(traj.to_csv())
    return traj


# ------------------------------------------------------------ export-table

TABLE_COLUMNS = ("fitness_evaluations", "step_limit", "agents_in_map", "most_levels_solved")


def export_table(run_dirs: Sequence[Union[str, Path]], fmt: str = "markdown") -> str:
    rows = []
    for d in run_dirs:
        p = Path(d) / "summary.json"
        try:
            rows.append(json.loads(p.read_text()))
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read {p}: {err}") from None
    cols = ["algorithm", *TABLE_COLUMNS]
    if any("explore_ratio" in r for r in rows):
        cols.append("explore_ratio")
    if fmt == "csv":
        lines = [",".join(cols)] + [",".join(str(r.get(c, "")) for c in cols) for r in rows]
    else:
        lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
        lines += ["| " + " | ".join(str(r.get(c, "")) for c in cols) + " |" for r in rows]
    return "\n".join(lines) + "\n"


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qdzelda", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment")
    r.add_argument("--config", required=False)
    r.add_argument("--out", required=True)
    r.add_argument("--workers", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--checkpoint-every", type=int, default=0)
    r.add_argument("--resume", help="checkpoint directory to continue from")

    rp = sub.add_parser("replay", help="replay an archived elite on one level")
    rp.add_argument("--config", required=True)
    rp.add_argument("--archive", required=True)
    rp.add_argument("--feature", required=True, help="e.g. 1-0-1-0-0-0-0-0-0-0")
    rp.add_argument("--level", type=int, required=True, help="0-based level index")
    rp.add_argument("--out", required=True)

    s = sub.add_parser("stats", help="summarize a run log")
    s.add_argument("log")
    s.add_argument("--target", type=float, default=300.0,
                   help="archive size to extrapolate the evaluation count for")

    e = sub.add_parser("export-table", help="tabulate summaries of several runs")
    e.add_argument("runs", nargs="+")
    e.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    e.add_argument("--out")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            if not args.config and not args.resume:
                raise ConfigError("run needs --config or --resume")
            summary = cmd_run(args.config, args.out, args.workers, args.seed,
                              args.checkpoint_every, args.resume)
            print(json.dumps(summary, indent=2))
        elif args.command == "replay":
            traj = cmd_replay(args.config, args.archive, args.feature, args.level, args.out)
            print(f"terminal={traj.terminal.value} steps_used={traj.steps_used} "
                  f"score={traj.score!r}")
            if traj.archived is not None and (traj.archived.steps_used, traj.archived.score) != (
                    traj.steps_used, traj.score):
                print("replay does not match the archived result", file=sys.stderr)
                return EXIT_RUNTIME
        elif args.command == "stats":
            print(_format_report(cmd_stats(args.log, args.target)), end="")
        elif args.command == "export-table":
            table = export_table(args.runs, args.format)
            if args.out:
                Path(args.out).write_text(table)
            else:
                print(table, end="")
    except (ConfigError, MalformedLog, FeatureNotFound, ArchiveFormatError,
            FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as err:  # noqa: BLE001 - surfaced as exit status 2
        logging.getLogger(__name__).exception("run failed")
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
