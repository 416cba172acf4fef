import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qdzelda.archive import (ArchiveFormatError, BehaviorFeature, Criterion, EliteEntry,
                             EliteMap, EmptyMap, EvaluationResult, FeatureScheme, GenomeStore,
                             SchemeLengthMismatch, SchemeMismatch, addressable_cells,
                             archive_from_text, archive_to_text, feature_from_results,
                             feature_to_string, insert_elite, map_stats, parse_feature,
                             select_random_elite, store_from_text, try_insert)
from qdzelda.env import EpisodeResult
from qdzelda.policy import init_genome

W10, KW20 = FeatureScheme.WIN10, FeatureScheme.KEYWIN20
MAX, MIN = Criterion.MAX_SCORE, Criterion.MIN_TIMESTEPS


def ep(won=False, key=None, score=0.0, steps=200, tiles=1):
    key = won if key is None else key
    return EpisodeResult(won, key, score, steps, tiles)


def outcomes(won_levels=(), key_levels=(), n=10):
    return [ep(won=i in won_levels, key=i in won_levels or i in key_levels) for i in range(n)]


def w10(bits):
    return BehaviorFeature(W10, bits)


# ------------------------------------------------------------------ features

def test_first_and_third_levels_won():
    f = feature_from_results(outcomes(won_levels=(0, 2)), W10)
    assert f.bits == 0b101 == 5
    assert feature_to_string(f) == "1-0-1-0-0-0-0-0-0-0"
    assert f.levels_solved == 2


def test_no_wins_no_keys():
    assert feature_from_results(outcomes(), W10).bits == 0
    assert feature_from_results(outcomes(), KW20).bits == 0


def test_key_without_win_on_level_two():
    f = feature_from_results(outcomes(key_levels=(1,)), KW20)
    assert f.bits == 4
    assert feature_to_string(f) == "0-k-0-0-0-0-0-0-0-0"
    assert f.got_key(1) and not f.won(1)


def test_keywin_tokens():
    f = feature_from_results(outcomes(won_levels=(0,), key_levels=(3,)), KW20)
    assert f.bits == 0b11 | 1 << 6
    assert feature_to_string(f) == "kw-0-0-k-0-0-0-0-0-0"


@pytest.mark.parametrize("bits, text", [(5, "1-0-1-0-0-0-0-0-0-0"), (0, "0-0-0-0-0-0-0-0-0-0"),
                                        (1023, "1-1-1-1-1-1-1-1-1-1")])
def test_feature_strings(bits, text):
    assert feature_to_string(w10(bits)) == text
    assert parse_feature(text) == w10(bits)


def test_addressable_cells():
    assert addressable_cells(W10) == 1024
    assert addressable_cells(KW20) == 1_048_576


def test_feature_range_checks():
    with pytest.raises(ValueError):
        w10(1024)
    with pytest.raises(ValueError):
        BehaviorFeature(KW20, 0b10)  # win without key on level 1
    with pytest.raises(ValueError):
        parse_feature("1-x-0")


def test_length_mismatch():
    with pytest.raises(SchemeLengthMismatch):
        feature_from_results(outcomes(n=3), W10, n_levels=10)


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=12),
       st.sampled_from([W10, KW20]))
def test_feature_string_round_trip(flags, scheme):
    per_level = [ep(won=w, key=w or k) for w, k in flags]
    f = feature_from_results(per_level, scheme)
    assert parse_feature(feature_to_string(f), scheme) == f
    for i, (w, k) in enumerate(flags):
        assert f.won(i) == w
        if scheme is KW20:
            assert f.got_key(i) == (w or k)


def test_evaluation_result_aggregates():
    per = [ep(True, score=11.0, steps=4), ep(score=1.0, key=True, steps=200), ep(steps=200)]
    r = EvaluationResult.from_episodes(per, KW20)
    assert r.total_score == 12.0
    assert r.total_timesteps == 404
    assert feature_to_string(r.feature) == "kw-k-0"


# -------------------------------------------------------------------- insert

def test_empty_cell_accepts():
    m = EliteMap(W10, MAX)
    assert try_insert(m, w10(3), EliteEntry(1, -5.0, 10, 1))


def test_max_score_is_strict():
    m = EliteMap(W10, MAX)
    m.try_insert(w10(3), EliteEntry(1, 10.0, 10, 1))
    assert not m.try_insert(w10(3), EliteEntry(2, 10.0, 1, 2))
    assert m.try_insert(w10(3), EliteEntry(3, 10.5, 99, 3))
    assert m.get(w10(3)).genome_id == 3


def test_min_timesteps_replacement():
    m = EliteMap(W10, MIN)
    m.try_insert(w10(1), EliteEntry(1, 0.0, 30_000, 1))
    assert m.try_insert(w10(1), EliteEntry(2, 0.0, 16_461, 2))
    assert not m.try_insert(w10(1), EliteEntry(3, 50.0, 16_461, 3))
    assert m.get(w10(1)).timesteps == 16_461


def test_scheme_mismatch():
    m = EliteMap(W10, MAX)
    with pytest.raises(SchemeMismatch):
        m.try_insert(BehaviorFeature(KW20, 0), EliteEntry(1, 0.0, 0, 1))
    with pytest.raises(SchemeMismatch):
        m.try_insert(BehaviorFeature(W10, 0, n_levels=3), EliteEntry(1, 0.0, 0, 1))


def test_entry_validation():
    with pytest.raises(ValueError):
        EliteEntry(1, 0.0, -1, 1)
    with pytest.raises(ValueError):
        EliteEntry(1, 0.0, 0, 0)


def brute_force(inserts, criterion):
    best = {}
    for i, (bits, score, steps) in enumerate(inserts):
        key = score if criterion is MAX else -steps
        if bits not in best or key > best[bits][0]:
            best[bits] = (key, i)
    return {bits: i for bits, (_, i) in best.items()}


@pytest.mark.parametrize("criterion", [MAX, MIN])
def test_oracle_equivalence(criterion):
    rng = np.random.default_rng(11)
    inserts = [(int(rng.integers(64)), float(rng.integers(0, 20)), int(rng.integers(0, 50)))
               for _ in range(1000)]
    m = EliteMap(W10, criterion)
    for i, (bits, score, steps) in enumerate(inserts):
        m.try_insert(w10(bits), EliteEntry(i, score, steps, i + 1))
    oracle = brute_force(inserts, criterion)
    assert {f.bits: e.genome_id for f, e in m} == oracle


@given(st.lists(st.tuples(st.integers(0, 15), st.floats(-50, 50), st.integers(0, 400)),
                max_size=60))
@settings(max_examples=100)
def test_insert_monotonicity(inserts):
    for criterion in (MAX, MIN):
        m = EliteMap(W10, criterion)
        prev_cells, prev = 0, {}
        for i, (bits, score, steps) in enumerate(inserts):
            m.try_insert(w10(bits), EliteEntry(i, score, steps, i + 1))
            assert len(m) >= prev_cells
            prev_cells = len(m)
            for f, e in m:
                if f.bits in prev:
                    if criterion is MAX:
                        assert e.score >= prev[f.bits].score
                    else:
                        assert e.timesteps <= prev[f.bits].timesteps
            prev = dict((f.bits, e) for f, e in m)


# ----------------------------------------------------------------- selection

def test_select_single_cell(rng):
    m = EliteMap()
    m.try_insert(w10(7), EliteEntry(42, 1.0, 1, 1))
    assert all(select_random_elite(m, rng).genome_id == 42 for _ in range(50))


def test_select_two_cells_uniform():
    m = EliteMap()
    m.try_insert(w10(1), EliteEntry(1, 1.0, 1, 1))
    m.try_insert(w10(2), EliteEntry(2, 9.0, 1, 2))
    rng = np.random.default_rng(0)
    picks = np.array([m.select_random_elite(rng).genome_id for _ in range(10_000)])
    assert 0.48 <= (picks == 1).mean() <= 0.52


def test_select_seeded():
    m = EliteMap()
    for b in range(20):
        m.try_insert(w10(b), EliteEntry(b + 1, 0.0, 1, 1))
    a = [m.select_random_elite(np.random.default_rng(4)).genome_id for _ in range(3)]
    assert len(set(a)) == 1


def test_select_empty(rng):
    with pytest.raises(EmptyMap):
        EliteMap().select_random_elite(rng)


# --------------------------------------------------------------------- stats

def test_stats():
    m = EliteMap()
    assert map_stats(m) == (0, 0, float("-inf"), float("inf"))
    m.try_insert(parse_feature("1-0-1-0-0-0-0-0-0-0"), EliteEntry(1, 22.0, 1500, 1))
    assert map_stats(m).most_levels_solved == 2
    m.try_insert(w10(0b111), EliteEntry(2, 3.0, 900, 2))
    m.try_insert(w10(0b1111111000), EliteEntry(3, 70.0, 1000, 3))
    s = map_stats(m)
    assert s == (3, 7, 70.0, 900)


def test_keywin_stats_count_wins_only():
    m = EliteMap(KW20, MAX)
    m.try_insert(parse_feature("kw-k-k-kw-0-0-0-0-0-0"), EliteEntry(1, 0.0, 1, 1))
    assert map_stats(m).most_levels_solved == 2


# ----------------------------------------------------------------- genomes

def make_result(bits_won, n=3, score=1.0):
    return EvaluationResult.from_episodes(
        [ep(won=i in bits_won, score=score, steps=7 + i) for i in range(n)], W10)


def test_store_refcounts(rng):
    store = GenomeStore()
    m = EliteMap(W10, MAX, n_levels=3)
    g1, g2 = init_genome(rng, 5), init_genome(rng, 5)
    assert insert_elite(m, store, g1, make_result({0}, score=1.0), 1)
    assert g1.id in store
    assert insert_elite(m, store, g2, make_result({0}, score=2.0), 2)
    assert g1.id not in store and g2.id in store
    assert not insert_elite(m, store, init_genome(rng, 5), make_result({0}, score=0.5), 3)
    assert len(store) == 1


# --------------------------------------------------------------- snapshots

def populated(rng, scheme=W10, criterion=MAX):
    store = GenomeStore()
    m = EliteMap(scheme, criterion, n_levels=3)
    for i in range(12):
        wins = {j for j in range(3) if rng.random() < 0.5}
        res = EvaluationResult.from_episodes(
            [ep(won=j in wins, score=float(rng.normal()), steps=int(rng.integers(1, 200)))
             for j in range(3)], scheme)
        insert_elite(m, store, init_genome(rng, 20), res, i + 1)
    return m, store


@pytest.mark.parametrize("scheme, criterion", [(W10, MAX), (KW20, MIN)])
def test_snapshot_round_trip(rng, scheme, criterion):
    m, store = populated(rng, scheme, criterion)
    text = archive_to_text(m, store, "abc")
    lines = text.splitlines()
    assert lines[0] == "# qdzelda archive v1"
    assert len(lines[2].split("\t")) == 6
    back, back_store, topo = archive_from_text(text)
    assert back == m and topo == "abc"
    assert back.genome_ids() == m.genome_ids()
    for gid in m.genome_ids():
        assert back_store[gid] == store[gid]
        assert back_store.results[gid] == store.results[gid]
    assert archive_to_text(back, back_store, "abc") == text


def test_snapshot_without_genomes(rng):
    m, _ = populated(rng)
    back, store, _ = archive_from_text(archive_to_text(m))
    assert back == m and store is None


def test_truncated_snapshot_reports_line(rng):
    m, store = populated(rng)
    text = archive_to_text(m, store)
    cut = "\n".join(text.splitlines()[:5]) + "\n"
    with pytest.raises(ArchiveFormatError) as info:
        archive_from_text(cut)
    assert info.value.line == 6


@pytest.mark.parametrize("mutilate", [
    lambda ls: ["# not an archive"] + ls[1:],
    lambda ls: ls[:2] + ["1\twin10\tx\t3\t1\t7"] + ls[3:],
    lambda ls: ls[:2] + ["1\twin10\t1.0"] + ls[3:],
    lambda ls: ls + ["junk"],
])
def test_corrupt_snapshot(rng, mutilate):
    m, store = populated(rng)
    lines = archive_to_text(m, store).splitlines()
    with pytest.raises(ArchiveFormatError):
        archive_from_text("\n".join(mutilate(lines)) + "\n")


def test_store_file_round_trip(rng):
    import io
    from qdzelda.archive import write_store
    _, store = populated(rng)
    buf = io.StringIO()
    write_store(buf, store)
    back, _ = store_from_text(buf.getvalue(), W10)
    assert set(back.genomes) == set(store.genomes)
    with pytest.raises(ArchiveFormatError):
        store_from_text(buf.getvalue()[: len(buf.getvalue()) // 2], W10)

