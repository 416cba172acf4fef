"""Experiment execution: sequential and master/worker runs, run logs, checkpoints.

The master process owns the algorithm driver and every map. Workers are
stateless: they get a :class:`Task`, evaluate the genome on the level set, and
send back a :class:`ResultMsg`. Both travel as length-prefixed text frames
(see :func:`encode_task` / :func:`encode_result`), so the same records could
be sent over a pipe or socket.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import multiprocessing as mp
import queue
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .algorithms import (CmaMeDriver, DmeDriver, Driver, EfmeDriver, Evaluator,
                         Improvement, VmeDriver)
from .archive import (ArchiveFormatError, EvaluationResult, GenomeStore, archive_from_text,
                      archive_to_text, store_from_text, write_store)
from .config import ConfigError, ExperimentConfig, parse_config, validate_files
from .env import EpisodeResult, load_level_set
from .policy import Genome, read_genome, write_genome

log = logging.getLogger(__name__)

Clock = Callable[[], int]


def wall_clock_ms() -> int:
    return time.time_ns() // 1_000_000


class WorkerFailure(RuntimeError):
    pass


class CorruptCheckpoint(RuntimeError):
    pass


# ----------------------------------------------------------------- run log

LOG_HEADER = "evaluation,archive_size,most_levels_solved,best_score,accepted,unix_ms"


@dataclass(frozen=True)
class RunLogRecord:
    evaluation_index: int
    archive_size: int
    most_levels_solved: int
    best_score: float
    accepted: bool
    timestamp: int  # unix milliseconds

    def to_csv(self) -> str:
        return (f"{self.evaluation_index},{self.archive_size},{self.most_levels_solved},"
                f"{self.best_score!r},{int(self.accepted)},{self.timestamp}")


class MalformedLog(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


def format_log(records: Sequence[RunLogRecord]) -> str:
    return "".join(line + "\n" for line in [LOG_HEADER] + [r.to_csv() for r in records])


def parse_log(text: str) -> List[RunLogRecord]:
    lines = text.splitlines()
    if not lines:
        raise MalformedLog("empty run log", 1)
    if lines[0].strip() != LOG_HEADER:
        raise MalformedLog(f"expected header {LOG_HEADER!r}", 1)
    out = []
    for n, row in enumerate(csv.reader(lines[1:]), start=2):
        if len(row) != 6:
            raise MalformedLog(f"expected 6 fields, got {len(row)}", n)
        try:
            rec = RunLogRecord(int(row[0]), int(row[1]), int(row[2]), float(row[3]),
                               bool(int(row[4])), int(row[5]))
        except ValueError as err:
            raise MalformedLog(str(err), n) from None
        if out and rec.evaluation_index <= out[-1].evaluation_index:
            raise MalformedLog("evaluation index not increasing", n)
        out.append(rec)
    return out


def read_log(path: Union[str, Path]) -> List[RunLogRecord]:
    return parse_log(Path(path).read_text())


# ------------------------------------------------------------ wire records

@dataclass(frozen=True)
class Task:
    task_id: int
    genome: Genome
    issued_at: int


@dataclass(frozen=True)
class ResultMsg:
    task_id: int
    result: EvaluationResult
    worker_id: int
    wall_time_ms: int


_LEN = struct.Struct(">I")


def frame(payload: str) -> bytes:
    data = payload.encode("utf-8")
    return _LEN.pack(len(data)) + data


def unframe(data: bytes) -> str:
    if len(data) < _LEN.size:
        raise ValueError("short frame")
    (n,) = _LEN.unpack_from(data)
    if len(data) != _LEN.size + n:
        raise ValueError(f"frame length {n} does not match {len(data) - _LEN.size} bytes")
    return data[_LEN.size:].decode("utf-8")


def read_frame(stream: BinaryIO) -> Optional[str]:
    """Next framed record from a byte stream, or None at a clean end of stream."""
    head = stream.read(_LEN.size)
    if not head:
        return None
    if len(head) < _LEN.size:
        raise ValueError("truncated frame header")
    (n,) = _LEN.unpack(head)
    body = stream.read(n)
    if len(body) != n:
        raise ValueError("truncated frame body")
    return body.decode("utf-8")


def encode_task(task: Task) -> bytes:
    buf = io.StringIO()
    buf.write(f"task {task.task_id} {task.issued_at}\n")
    write_genome(buf, task.genome)
    return frame(buf.getvalue())


def decode_task(data: bytes) -> Task:
    lines = iter(unframe(data).split("\n"))
    kind, task_id, issued_at = next(lines).split()
    if kind != "task":
        raise ValueError(f"expected a task record, got {kind!r}")
    genome, _ = read_genome(lines)
    return Task(int(task_id), genome, int(issued_at))


def encode_result(msg: ResultMsg) -> bytes:
    r = msg.result
    head = (f"result {msg.task_id} {msg.worker_id} {msg.wall_time_ms} "
            f"{r.feature.scheme.value} {len(r.per_level)}\n")
    body = "".join(
        f"{int(e.won)}\t{int(e.got_key)}\t{e.score!r}\t{e.steps_used}\t{e.tiles_visited}\t{e.kills}\n"
        for e in r.per_level)
    return frame(head + body)


def decode_result(data: bytes) -> ResultMsg:
    lines = unframe(data).split("\n")
    kind, task_id, worker_id, wall_ms, scheme, n = lines[0].split()
    if kind != "result":
        raise ValueError(f"expected a result record, got {kind!r}")
    eps = []
    for line in lines[1:1 + int(n)]:
        won, key, score, steps, tiles, kills = line.split("\t")
        eps.append(EpisodeResult(won == "1", key == "1", float(score), int(steps), int(tiles),
                                 int(kills)))
    return ResultMsg(int(task_id), EvaluationResult.from_episodes(eps, scheme), int(worker_id),
                     int(wall_ms))


# -------------------------------------------------------------------- runs

def make_driver(cfg: ExperimentConfig, n_levels: int, seed: Optional[int] = None) -> Driver:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    common = dict(scheme=cfg.scheme, n_levels=n_levels, vme=cfg.vme)
    if cfg.algorithm == "VME":
        return VmeDriver(cfg.topology, rng, **common)
    if cfg.algorithm == "DME":
        return DmeDriver(cfg.topology, rng, dme=cfg.dme, **common)
    if cfg.algorithm == "EFME":
        return EfmeDriver(cfg.topology, rng, efme=cfg.efme, **common)
    return CmaMeDriver(cfg.topology, rng, cma=cfg.cma, **common)


def make_evaluator(cfg: ExperimentConfig) -> Evaluator:
    levels = load_level_set(cfg.manifest_path())
    return Evaluator(levels, cfg.env, cfg.topology, cfg.observation, cfg.scheme)


class Run:
    """Driver + evaluator + run log for one experiment."""

    def __init__(self, cfg: ExperimentConfig, seed: Optional[int] = None,
                 clock: Optional[Clock] = None, evaluator: Optional[Evaluator] = None):
        if seed is not None:
            cfg = cfg.replace(seed=seed)
        validate_files(cfg)
        self.cfg = cfg
        self.clock = clock or wall_clock_ms
        self.evaluator = evaluator or make_evaluator(cfg)
        self.driver = make_driver(cfg, len(self.evaluator.levels))
        self.log: List[RunLogRecord] = []
        self.events: List[str] = []

    @property
    def maps(self):
        return self.driver.maps

    @property
    def store(self) -> GenomeStore:
        return self.driver.store

    @property
    def evaluations(self) -> int:
        return self.driver.evaluations

    @property
    def done(self) -> bool:
        return self.evaluations >= self.cfg.budget

    def apply(self, genome: Genome, result: EvaluationResult) -> RunLogRecord:
        accepted = self.driver.tell(genome, result)
        stats = self.driver.primary_map.stats()
        rec = RunLogRecord(self.driver.evaluations, stats.occupied_cells,
                           stats.most_levels_solved, stats.best_score, accepted, self.clock())
        self.log.append(rec)
        return rec

    def note(self, message: str):
        self.events.append(message)
        log.info(message)

    def run_sequential(self, stop_at: Optional[int] = None) -> "Run":
        """Evaluate until the budget (or evaluation ``stop_at``) is reached."""
        end = self.cfg.budget if stop_at is None else min(stop_at, self.cfg.budget)
        while self.evaluations < end:
            genome = self.driver.ask()
            self.apply(genome, self.evaluator(genome))
        return self

    def log_text(self) -> str:
        return format_log(self.log)


def run_sequential(cfg: ExperimentConfig, seed: Optional[int] = None,
                   clock: Optional[Clock] = None) -> Run:
    return Run(cfg, seed, clock).run_sequential()


# ------------------------------------------------------------ master/worker

def _worker_main(worker_id: int, evaluator: Evaluator, tasks, results):
    while True:
        data = tasks.get()
        if data is None:
            return
        task = decode_task(data)
        t0 = time.perf_counter()
        result = evaluator(task.genome)
        ms = int((time.perf_counter() - t0) * 1000)
        results.put(encode_result(ResultMsg(task.task_id, result, worker_id, ms)))


class _Worker:
    def __init__(self, ctx, worker_id: int, evaluator: Evaluator, results):
        self.id = worker_id
        self.tasks = ctx.Queue()
        self.process = ctx.Process(target=_worker_main,
                                   args=(worker_id, evaluator, self.tasks, results),
                                   daemon=True)
        self.process.start()
        self.task: Optional[Task] = None

    def send(self, task: Task):
        self.task = task
        self.tasks.put(encode_task(task))

    def stop(self):
        if self.process.is_alive():
            self.tasks.put(None)
            self.process.join(timeout=5)
        if self.process.is_alive():
            self.process.kill()
            self.process.join()
        self.discard()

    def discard(self):
        # A dead reader can leave the feeder thread blocked on a full pipe.
        self.tasks.cancel_join_thread()
        self.tasks.close()


class ParallelRunner:
    """Master side of a master/worker run.

    Keeps at most ``worker_count`` tasks in flight and applies results in
    arrival order. It never issues more tasks than the remaining budget, so
    the number of applied evaluations equals the budget. A task whose worker
    dies is reissued (same task id, same genome); after ``max_failures``
    losses it is dropped and replaced by a fresh candidate.

    With several workers the archive depends on arrival order; with one worker
    the run log is identical to a sequential run with the same seed.
    """

    max_failures = 3
    poll_seconds = 0.2

    def __init__(self, run: Run, worker_count: int,
                 on_result: Optional[Callable[["ParallelRunner", RunLogRecord], None]] = None,
                 start_method: str = "spawn"):
        if worker_count < 1:
            raise ConfigError("worker_count must be >= 1")
        self.run = run
        self.worker_count = worker_count
        self.on_result = on_result
        self.ctx = mp.get_context(start_method)
        self.results = self.ctx.Queue()
        self.workers: List[_Worker] = []
        self.next_worker_id = 0
        self.next_task_id = 1
        self.outstanding: Dict[int, Task] = {}
        self.failures: Dict[int, int] = {}
        self.reissue: List[Task] = []
        self.applied_ids: set = set()
        self.discarded = 0
        # Poisoned tasks can each cost max_failures deaths; beyond this the workers
        # themselves are broken (e.g. an unguarded __main__ under spawn).
        self.death_limit = 2 * self.max_failures * worker_count + 1
        self.deaths_since_result = 0

    def _spawn(self) -> _Worker:
        w = _Worker(self.ctx, self.next_worker_id, self.run.evaluator, self.results)
        self.next_worker_id += 1
        self.workers.append(w)
        return w

    def _check_workers(self):
        for w in list(self.workers):
            if w.process.is_alive():
                continue
            self.workers.remove(w)
            w.discard()
            self.deaths_since_result += 1
            if self.deaths_since_result > self.death_limit:
                raise WorkerFailure(f"{self.deaths_since_result} worker deaths without a result; "
                                    f"last exit code {w.process.exitcode}")
            task = w.task
            if task is not None and task.task_id in self.outstanding:
                n = self.failures.get(task.task_id, 0) + 1
                self.failures[task.task_id] = n
                if n >= self.max_failures:
                    del self.outstanding[task.task_id]
                    self._forget(task.genome)
                    self.run.note(f"task {task.task_id} dropped after {n} worker failures")
                else:
                    self.reissue.append(task)
                    self.run.note(f"worker {w.id} died; task {task.task_id} reissued ({n})")
            else:
                self.run.note(f"worker {w.id} died while idle")
            self._spawn()

    def _forget(self, genome: Genome):
        # A dropped candidate counts as the worst possible outcome for CMA ranking.
        driver = self.run.driver
        if isinstance(driver, CmaMeDriver):
            for b in driver.open_batches:
                if any(g.id == genome.id for g in b.genomes):
                    b.outcomes[genome.id] = Improvement(Improvement.REJECTED, -math.inf)

    def _fill(self):
        run = self.run
        for w in self.workers:
            if w.task is not None or not w.process.is_alive():
                continue
            if self.reissue:
                task = self.reissue.pop(0)
            elif run.evaluations + len(self.outstanding) < run.cfg.budget:
                task = Task(self.next_task_id, run.driver.ask(), run.evaluations)
                self.next_task_id += 1
                self.outstanding[task.task_id] = task
            else:
                return
            w.send(task)

    def execute(self) -> Run:
        run = self.run
        try:
            for _ in range(self.worker_count):
                self._spawn()
            while not run.done:
                self._fill()
                try:
                    data = self.results.get(timeout=self.poll_seconds)
                except queue.Empty:
                    self._check_workers()
                    continue
                msg = decode_result(data)
                for w in self.workers:
                    if w.id == msg.worker_id and w.task is not None and w.task.task_id == msg.task_id:
                        w.task = None
                task = self.outstanding.pop(msg.task_id, None)
                if task is None or msg.task_id in self.applied_ids:
                    self.discarded += 1
                    run.note(f"result for task {msg.task_id} discarded (not outstanding)")
                    continue
                self.reissue = [t for t in self.reissue if t.task_id != msg.task_id]
                self.applied_ids.add(msg.task_id)
                self.deaths_since_result = 0
                rec = run.apply(task.genome, msg.result)
                if self.on_result is not None:
                    self.on_result(self, rec)
            self._drain()
        finally:
            for w in self.workers:
                w.stop()
        return run

    def _drain(self):
        deadline = time.monotonic() + 30
        while self.outstanding and time.monotonic() < deadline:
            try:
                data = self.results.get(timeout=self.poll_seconds)
            except queue.Empty:
                if not any(w.process.is_alive() for w in self.workers):
                    break
                continue
            msg = decode_result(data)
            self.outstanding.pop(msg.task_id, None)
            self.discarded += 1
            self.run.note(f"result for task {msg.task_id} beyond budget discarded")


def run_parallel(cfg: ExperimentConfig, seed: Optional[int] = None, worker_count: int = 2,
                 clock: Optional[Clock] = None, run: Optional[Run] = None, **kw) -> Run:
    run = run or Run(cfg, seed, clock)
    return ParallelRunner(run, worker_count, **kw).execute()


# ------------------------------------------------------------- checkpoints

CHECKPOINT_VERSION = 1


def _write(path: Path, text: str):
    path.write_text(text, newline="\n")


def checkpoint(run: Run, path: Union[str, Path]) -> Path:
    """Write the full run state to a directory.

    Files: ``config.ini``, one ``<map>.archive`` per map, ``genomes.store``,
    ``driver.json`` (counters, generator state, emitter state),
    ``run_log.csv`` and ``manifest.json`` tying them together.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    cfg = run.cfg.replace(level_manifest=str(run.cfg.manifest_path().resolve()))
    config_text = cfg.to_text()
    _write(path / "config.ini", config_text)
    topo = cfg.topology.hash
    map_files = {}
    for name, m in run.maps.items():
        map_files[name] = f"{name}.archive"
        _write(path / map_files[name], archive_to_text(m))
    buf = io.StringIO()
    write_store(buf, run.store, topology_hash=topo)
    _write(path / "genomes.store", buf.getvalue())
    _write(path / "driver.json", json.dumps(run.driver.state_dict(), sort_keys=True) + "\n")
    _write(path / "run_log.csv", run.log_text())
    manifest = {
        "version": CHECKPOINT_VERSION,
        "algorithm": cfg.algorithm,
        "config_sha256": cfg.sha256,
        "evaluations": run.evaluations,
        "maps": map_files,
    }
    _write(path / "manifest.json", json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def _read(path: Path, name: str) -> str:
    try:
        return (path / name).read_text()
    except OSError as err:
        raise CorruptCheckpoint(f"{path / name}: {err.strerror}") from None


def restore(path: Union[str, Path], clock: Optional[Clock] = None) -> Run:
    path = Path(path)
    try:
        manifest = json.loads(_read(path, "manifest.json"))
    except json.JSONDecodeError as err:
        raise CorruptCheckpoint(f"manifest.json: line {err.lineno}: {err.msg}") from None
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"manifest.json: unsupported version {manifest.get('version')}")
    try:
        cfg = parse_config(_read(path, "config.ini"))
    except ConfigError as err:
        raise CorruptCheckpoint(f"config.ini: {err}") from None
    if cfg.sha256 != manifest["config_sha256"]:
        raise CorruptCheckpoint("config.ini: hash does not match manifest")

    run = Run(cfg, clock=clock)
    maps = {}
    for name, fname in manifest["maps"].items():
        try:
            m, _, _ = archive_from_text(_read(path, fname))
        except ArchiveFormatError as err:
            raise CorruptCheckpoint(f"{fname}: {err}") from None
        maps[name] = m
    try:
        store, _ = store_from_text(_read(path, "genomes.store"), cfg.scheme)
    except ArchiveFormatError as err:
        raise CorruptCheckpoint(f"genomes.store: {err}") from None
    for name, m in maps.items():
        for gid in m.genome_ids():
            if gid not in store:
                raise CorruptCheckpoint(f"{manifest['maps'][name]}: genome {gid} not in store")
            store._refs[gid] = store._refs.get(gid, 0) + 1
    try:
        state = json.loads(_read(path, "driver.json"))
    except json.JSONDecodeError as err:
        raise CorruptCheckpoint(f"driver.json: line {err.lineno}: {err.msg}") from None
    try:
        run.driver.load_state_dict(state, maps, store)
    except (KeyError, TypeError, ValueError) as err:
        raise CorruptCheckpoint(f"driver.json: {err!r}") from None
    try:
        run.log = parse_log(_read(path, "run_log.csv"))
    except MalformedLog as err:
        raise CorruptCheckpoint(f"run_log.csv: {err}") from None
    if len(run.log) != manifest["evaluations"] or run.evaluations != manifest["evaluations"]:
        raise CorruptCheckpoint(
            f"run_log.csv: {len(run.log)} records, manifest says {manifest['evaluations']}")
    return run
