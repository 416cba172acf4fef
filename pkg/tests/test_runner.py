import io
import os
import queue

import numpy as np
import pytest

from conftest import small_config
from qdzelda.algorithms import CmaConfig, EfmeConfig, Evaluator
from qdzelda.archive import Criterion, map_stats
from qdzelda.config import ConfigError
from qdzelda.runner import (LOG_HEADER, CorruptCheckpoint, MalformedLog, ParallelRunner,
                            ResultMsg, Run, Task, _worker_main, checkpoint, decode_result,
                            decode_task, encode_result, encode_task, frame, parse_log,
                            read_frame, restore, run_parallel, run_sequential, unframe)
from qdzelda.policy import init_genome


def zero_clock():
    return 0


# ------------------------------------------------------------------ logs

def test_budget_one():
    run = run_sequential(small_config(budget=1), clock=zero_clock)
    assert len(run.log) == 1
    assert run.log[0].archive_size in (0, 1)
    assert run.log_text().splitlines()[0] == LOG_HEADER


def test_sequential_runs_are_byte_identical():
    cfg = small_config(budget=60, seed=3)
    a = run_sequential(cfg, clock=zero_clock).log_text()
    b = run_sequential(cfg, clock=zero_clock).log_text()
    assert a == b
    c = run_sequential(cfg, seed=4, clock=zero_clock).log_text()
    assert c != a


@pytest.mark.parametrize("algorithm", ["VME", "DME", "EFME", "CMAME"])
def test_log_is_monotone(algorithm):
    cfg = small_config(algorithm=algorithm, budget=80, cma=CmaConfig(population=8))
    run = run_sequential(cfg, clock=zero_clock)
    recs = parse_log(run.log_text())
    assert [r.evaluation_index for r in recs] == list(range(1, 81))
    sizes = [r.archive_size for r in recs]
    solved = [r.most_levels_solved for r in recs]
    assert sizes == sorted(sizes) and solved == sorted(solved)
    assert recs[-1].archive_size == map_stats(run.driver.primary_map).occupied_cells


def test_parse_log_errors():
    with pytest.raises(MalformedLog):
        parse_log("")
    with pytest.raises(MalformedLog) as info:
        parse_log(LOG_HEADER + "\n1,1,0,1.0,1,0\n2,1,0\n")
    assert info.value.line == 3
    with pytest.raises(MalformedLog) as info:
        parse_log(LOG_HEADER + "\n2,1,0,1.0,1,0\n2,1,0,1.0,0,0\n")
    assert info.value.line == 3
    with pytest.raises(MalformedLog):
        parse_log("evaluation,size\n")


def test_log_round_trip():
    run = run_sequential(small_config(budget=20), clock=zero_clock)
    from qdzelda.runner import format_log
    assert format_log(parse_log(run.log_text())) == run.log_text()


# --------------------------------------------------------------- wire format

def test_frames(rng):
    assert unframe(frame("héllo")) == "héllo"
    with pytest.raises(ValueError):
        unframe(frame("abc")[:-1])
    stream = io.BytesIO(frame("a") + frame("bc"))
    assert [read_frame(stream), read_frame(stream), read_frame(stream)] == ["a", "bc", None]
    with pytest.raises(ValueError):
        read_frame(io.BytesIO(frame("abcdef")[:6]))


def test_task_and_result_round_trip(desk_levels, rng):
    cfg = small_config()
    g = init_genome(rng, cfg.topology)
    t = Task(7, g, 3)
    back = decode_task(encode_task(t))
    assert back.task_id == 7 and back.issued_at == 3 and back.genome == g
    ev = Evaluator(desk_levels, cfg.env, cfg.topology)
    msg = ResultMsg(7, ev(g), 2, 15)
    assert decode_result(encode_result(msg)) == msg


def test_worker_is_pure(desk_levels, rng):
    cfg = small_config()
    ev = Evaluator(desk_levels, cfg.env, cfg.topology)
    tasks, results = queue.Queue(), queue.Queue()
    g = init_genome(rng, cfg.topology, 0.5)
    for _ in range(2):
        tasks.put(encode_task(Task(1, g, 0)))
    tasks.put(None)
    _worker_main(0, ev, tasks, results)
    a, b = decode_result(results.get()), decode_result(results.get())
    assert a.result == b.result == ev(g)


# ------------------------------------------------------------------ parallel

@pytest.mark.slow
def test_single_worker_matches_sequential():
    cfg = small_config(budget=40, seed=2)
    seq = run_sequential(cfg, clock=zero_clock).log_text()
    par = run_parallel(cfg, worker_count=1, clock=zero_clock).log_text()
    assert par == seq


@pytest.mark.slow
def test_several_workers_keep_invariants():
    from qdzelda.archive import FeatureScheme
    cfg = small_config(algorithm="EFME", budget=60, scheme=FeatureScheme.KEYWIN20,
                       efme=EfmeConfig(startup=10, explore_ratio=0.5))
    run = run_parallel(cfg, worker_count=3, clock=zero_clock, start_method="fork")
    assert run.evaluations == 60 and len(run.log) == 60
    sizes = [r.archive_size for r in run.log]
    assert sizes == sorted(sizes)
    for m in run.maps.values():
        for f, _ in m:
            assert all(f.got_key(i) or not f.won(i) for i in range(f.n_levels))
    assert run.maps["follow"].criterion is Criterion.MIN_TIMESTEPS


@pytest.mark.slow
def test_killed_worker_task_is_reissued():
    cfg = small_config(budget=30, seed=1)
    killed = []

    def kill_once(runner, rec):
        if rec.evaluation_index == 10 and not killed:
            w = runner.workers[0]
            # hand the worker a task, then kill it before it can answer
            runner._fill()
            killed.append(w.task.task_id if w.task else None)
            w.process.kill()
            w.process.join()

    run = Run(cfg, clock=zero_clock)
    ParallelRunner(run, 1, on_result=kill_once, start_method="fork").execute()
    assert run.evaluations == 30 and len(run.log) == 30
    assert any("reissued" in e for e in run.events)


class PoisonEvaluator(Evaluator):
    """Crashes the worker process on every genome whose id is divisible by 5."""

    def __call__(self, genome):
        if genome.id % 5 == 0:
            os._exit(3)
        return super().__call__(genome)


@pytest.mark.slow
def test_poisoned_task_dropped_after_three_failures():
    cfg = small_config(budget=25, seed=0)
    base = Run(cfg, clock=zero_clock).evaluator
    ev = PoisonEvaluator(base.levels, cfg.env, cfg.topology)
    run = Run(cfg, clock=zero_clock, evaluator=ev)
    runner = ParallelRunner(run, 2, start_method="fork")
    runner.poll_seconds = 0.05
    runner.execute()
    assert run.evaluations == 25
    dropped = [e for e in run.events if "dropped" in e]
    assert dropped
    assert all(v <= 3 for v in runner.failures.values())
    assert len(runner.applied_ids) == 25


class DeadEvaluator(Evaluator):
    def __call__(self, genome):
        os._exit(4)


@pytest.mark.slow
def test_workers_that_always_die_raise():
    from qdzelda.runner import WorkerFailure
    cfg = small_config(budget=5)
    base = Run(cfg, clock=zero_clock).evaluator
    run = Run(cfg, clock=zero_clock, evaluator=DeadEvaluator(base.levels, cfg.env, cfg.topology))
    runner = ParallelRunner(run, 1, start_method="fork")
    runner.poll_seconds = 0.05
    with pytest.raises(WorkerFailure, match="without a result"):
        runner.execute()
    assert run.evaluations == 0


def test_worker_count_validated():
    with pytest.raises(ConfigError):
        ParallelRunner(Run(small_config(budget=1)), 0)


# --------------------------------------------------------------- checkpoints

def files(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


@pytest.mark.parametrize("algorithm", ["VME", "DME", "EFME", "CMAME"])
def test_checkpoint_resume_is_bit_identical(tmp_path, algorithm):
    cfg = small_config(algorithm=algorithm, budget=70, seed=5,
                       cma=CmaConfig(population=8), efme=EfmeConfig(startup=10,
                                                                     explore_ratio=0.6))
    full = run_sequential(cfg, clock=zero_clock)
    part = Run(cfg, clock=zero_clock).run_sequential(stop_at=37)  # mid CMA batch
    checkpoint(part, tmp_path / "ck")
    resumed = restore(tmp_path / "ck", clock=zero_clock)
    assert resumed.evaluations == 37
    resumed.run_sequential()
    assert resumed.log_text() == full.log_text()
    for name in full.maps:
        assert resumed.maps[name] == full.maps[name]


def test_checkpoint_round_trip_bytes(tmp_path):
    run = Run(small_config(algorithm="CMAME", budget=30, cma=CmaConfig(population=7)),
              clock=zero_clock).run_sequential(stop_at=17)
    checkpoint(run, tmp_path / "a")
    checkpoint(restore(tmp_path / "a"), tmp_path / "b")
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_checkpoint_store_matches(tmp_path):
    run = Run(small_config(budget=40), clock=zero_clock).run_sequential()
    checkpoint(run, tmp_path / "ck")
    back = restore(tmp_path / "ck")
    assert set(back.store.genomes) == set(run.store.genomes)
    for gid in run.store.genomes:
        assert back.store[gid] == run.store[gid]
        assert back.store.results[gid] == run.store.results[gid]
    assert back.driver.rng.bit_generator.state == run.driver.rng.bit_generator.state


@pytest.mark.parametrize("name", ["genomes.store", "archive.archive", "run_log.csv",
                                  "driver.json", "manifest.json"])
def test_truncated_checkpoint(tmp_path, name):
    run = Run(small_config(budget=30), clock=zero_clock).run_sequential()
    ck = checkpoint(run, tmp_path / "ck")
    data = (ck / name).read_bytes()
    (ck / name).write_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptCheckpoint, match=name.split(".")[0]):
        restore(ck)


def test_missing_checkpoint_file(tmp_path):
    run = Run(small_config(budget=5), clock=zero_clock).run_sequential()
    ck = checkpoint(run, tmp_path / "ck")
    (ck / "driver.json").unlink()
    with pytest.raises(CorruptCheckpoint, match="driver.json"):
        restore(ck)


def test_config_tamper_detected(tmp_path):
    run = Run(small_config(budget=5), clock=zero_clock).run_sequential()
    ck = checkpoint(run, tmp_path / "ck")
    text = (ck / "config.ini").read_text().replace("budget = 5", "budget = 6")
    (ck / "config.ini").write_text(text)
    with pytest.raises(CorruptCheckpoint, match="hash"):
        restore(ck)


def test_rng_state_restored(tmp_path):
    run = Run(small_config(budget=10), clock=zero_clock).run_sequential()
    ck = checkpoint(run, tmp_path / "ck")
    back = restore(ck)
    assert np.array_equal(back.driver.rng.random(5), run.driver.rng.random(5))
