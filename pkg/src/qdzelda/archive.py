"""Behaviour features and elite maps.

An agent's behaviour feature is a bitmask over the levels of the level set.
``Win10`` sets bit ``i`` when level ``i`` was won. ``KeyWin20`` uses two bits
per level: bit ``2i`` for picking up the key, bit ``2i+1`` for winning.

Maps keep one elite per feature, either the highest-scoring agent
(``MaxScore``) or the one using the fewest total timesteps (``MinTimesteps``).
Ties keep the incumbent.
"""
from __future__ import annotations

import enum
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .env import EpisodeResult
from .policy import Genome, read_genome, write_genome


class SchemeMismatch(ValueError):
    pass


class SchemeLengthMismatch(ValueError):
    pass


class EmptyMap(LookupError):
    pass


class ArchiveFormatError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class FeatureScheme(enum.Enum):
    WIN10 = "win10"
    KEYWIN20 = "keywin20"

    @property
    def bits_per_level(self) -> int:
        return 1 if self is FeatureScheme.WIN10 else 2


class Criterion(enum.Enum):
    MAX_SCORE = "max_score"
    MIN_TIMESTEPS = "min_timesteps"


DEFAULT_LEVELS = 10


def addressable_cells(scheme: FeatureScheme, n_levels: int = DEFAULT_LEVELS) -> int:
    return 2 ** (FeatureScheme(scheme).bits_per_level * n_levels)


def _win_mask(scheme: FeatureScheme, n_levels: int) -> int:
    if scheme is FeatureScheme.WIN10:
        return (1 << n_levels) - 1
    return sum(1 << (2 * i + 1) for i in range(n_levels))


@dataclass(frozen=True)
class BehaviorFeature:
    scheme: FeatureScheme
    bits: int
    n_levels: int = DEFAULT_LEVELS

    def __post_init__(self):
        object.__setattr__(self, "scheme", FeatureScheme(self.scheme))
        if not 0 <= self.bits < addressable_cells(self.scheme, self.n_levels):
            raise ValueError(f"bits {self.bits} out of range for {self.scheme.value}"
                             f" with {self.n_levels} levels")
        if self.scheme is FeatureScheme.KEYWIN20:
            for i in range(self.n_levels):
                if self.bits >> (2 * i + 1) & 1 and not self.bits >> (2 * i) & 1:
                    raise ValueError(f"level {i + 1} won without its key")

    def won(self, level: int) -> bool:
        if self.scheme is FeatureScheme.WIN10:
            return bool(self.bits >> level & 1)
        return bool(self.bits >> (2 * level + 1) & 1)

    def got_key(self, level: int) -> bool:
        if self.scheme is FeatureScheme.WIN10:
            raise ValueError("win10 features do not record keys")
        return bool(self.bits >> (2 * level) & 1)

    @property
    def levels_solved(self) -> int:
        return bin(self.bits & _win_mask(self.scheme, self.n_levels)).count("1")

    def __str__(self):
        return feature_to_string(self)


def feature_from_results(per_level: Sequence[EpisodeResult], scheme: FeatureScheme,
                         n_levels: Optional[int] = None) -> BehaviorFeature:
    scheme = FeatureScheme(scheme)
    if n_levels is not None and len(per_level) != n_levels:
        raise SchemeLengthMismatch(
            f"{len(per_level)} level results for a {n_levels}-level scheme")
    bits = 0
    for i, r in enumerate(per_level):
        if scheme is FeatureScheme.WIN10:
            bits |= int(r.won) << i
        else:
            bits |= int(r.got_key) << (2 * i) | int(r.won) << (2 * i + 1)
    return BehaviorFeature(scheme, bits, len(per_level))


_KW_TOKENS = {(False, False): "0", (True, False): "k", (False, True): "w", (True, True): "kw"}


def feature_to_string(feature: BehaviorFeature) -> str:
    """Dash-separated per-level outcome, level 1 first: ``1-0-1-0-0-0-0-0-0-0``."""
    n = feature.n_levels
    if feature.scheme is FeatureScheme.WIN10:
        return "-".join(str(feature.bits >> i & 1) for i in range(n))
    return "-".join(
        _KW_TOKENS[bool(feature.bits >> (2 * i) & 1), bool(feature.bits >> (2 * i + 1) & 1)]
        for i in range(n))


def parse_feature(text: str, scheme: Optional[FeatureScheme] = None) -> BehaviorFeature:
    """Inverse of :func:`feature_to_string`. The scheme is guessed if not given."""
    tokens = text.strip().split("-")
    if scheme is None:
        scheme = FeatureScheme.WIN10 if set(tokens) <= {"0", "1"} else FeatureScheme.KEYWIN20
    scheme = FeatureScheme(scheme)
    bits = 0
    for i, tok in enumerate(tokens):
        if scheme is FeatureScheme.WIN10:
            if tok not in ("0", "1"):
                raise ValueError(f"bad token {tok!r} in {text!r}")
            bits |= int(tok) << i
        else:
            if tok not in ("0", "k", "w", "kw"):
                raise ValueError(f"bad token {tok!r} in {text!r}")
            bits |= int("k" in tok) << (2 * i) | int("w" in tok) << (2 * i + 1)
    return BehaviorFeature(scheme, bits, len(tokens))


@dataclass(frozen=True)
class EvaluationResult:
    per_level: Tuple[EpisodeResult, ...]
    feature: BehaviorFeature
    total_score: float
    total_timesteps: int

    @classmethod
    def from_episodes(cls, per_level: Sequence[EpisodeResult],
                      scheme: FeatureScheme) -> "EvaluationResult":
        per_level = tuple(per_level)
        return cls(
            per_level=per_level,
            feature=feature_from_results(per_level, scheme),
            total_score=float(sum(r.score for r in per_level)),
            total_timesteps=int(sum(r.steps_used for r in per_level)),
        )


@dataclass(frozen=True)
class EliteEntry:
    genome_id: int
    score: float
    timesteps: int
    found_at: int

    def __post_init__(self):
        if self.timesteps < 0:
            raise ValueError("timesteps must be non-negative")
        if self.found_at < 1:
            raise ValueError("found_at counts evaluations from 1")


class MapStats(NamedTuple):
    occupied_cells: int
    most_levels_solved: int
    best_score: float
    min_total_timesteps: float


class EliteMap:
    """Feature -> elite map. Only the owning algorithm driver mutates it."""

    def __init__(self, scheme: FeatureScheme = FeatureScheme.WIN10,
                 criterion: Criterion = Criterion.MAX_SCORE, n_levels: int = DEFAULT_LEVELS):
        self.scheme = FeatureScheme(scheme)
        self.criterion = Criterion(criterion)
        self.n_levels = n_levels
        self._cells: Dict[int, EliteEntry] = {}
        self._order: List[int] = []  # insertion order of first occupation

    def __len__(self):
        return len(self._cells)

    def __contains__(self, feature: BehaviorFeature):
        return feature.bits in self._cells

    def __iter__(self) -> Iterator[Tuple[BehaviorFeature, EliteEntry]]:
        for bits in self._order:
            yield BehaviorFeature(self.scheme, bits, self.n_levels), self._cells[bits]

    def __eq__(self, other):
        if not isinstance(other, EliteMap):
            return NotImplemented
        return (self.scheme, self.criterion, self.n_levels, self._order, self._cells) == (
            other.scheme, other.criterion, other.n_levels, other._order, other._cells)

    @property
    def cells(self) -> Dict[int, EliteEntry]:
        return dict(self._cells)

    def get(self, feature: BehaviorFeature) -> Optional[EliteEntry]:
        return self._cells.get(feature.bits)

    def _check(self, feature: BehaviorFeature):
        if feature.scheme is not self.scheme or feature.n_levels != self.n_levels:
            raise SchemeMismatch(
                f"{feature.scheme.value}/{feature.n_levels} feature for a "
                f"{self.scheme.value}/{self.n_levels} map")

    def beats(self, entry: EliteEntry, incumbent: Optional[EliteEntry]) -> bool:
        if incumbent is None:
            return True
        if self.criterion is Criterion.MAX_SCORE:
            return entry.score > incumbent.score
        return entry.timesteps < incumbent.timesteps

    def try_insert(self, feature: BehaviorFeature, entry: EliteEntry) -> bool:
        self._check(feature)
        incumbent = self._cells.get(feature.bits)
        if not self.beats(entry, incumbent):
            return False
        if incumbent is None:
            self._order.append(feature.bits)
        self._cells[feature.bits] = entry
        return True

    def select_random_elite(self, rng: np.random.Generator) -> EliteEntry:
        if not self._cells:
            raise EmptyMap("cannot select from an empty map")
        return self._cells[self._order[int(rng.integers(len(self._order)))]]

    def stats(self) -> MapStats:
        if not self._cells:
            return MapStats(0, 0, float("-inf"), float("inf"))
        mask = _win_mask(self.scheme, self.n_levels)
        return MapStats(
            occupied_cells=len(self._cells),
            most_levels_solved=max(bin(b & mask).count("1") for b in self._cells),
            best_score=max(e.score for e in self._cells.values()),
            min_total_timesteps=min(e.timesteps for e in self._cells.values()),
        )

    def genome_ids(self) -> List[int]:
        return [self._cells[b].genome_id for b in self._order]


def try_insert(elite_map: EliteMap, feature: BehaviorFeature, entry: EliteEntry) -> bool:
    return elite_map.try_insert(feature, entry)


def select_random_elite(elite_map: EliteMap, rng: np.random.Generator) -> EliteEntry:
    return elite_map.select_random_elite(rng)


def map_stats(elite_map: EliteMap) -> MapStats:
    return elite_map.stats()


class GenomeStore:
    """id -> Genome side store shared by the maps of one run.

    Genomes are reference counted so replaced elites are dropped; the
    evaluation result of each stored genome is kept alongside for replay checks.
    """

    def __init__(self):
        self.genomes: Dict[int, Genome] = {}
        self.results: Dict[int, EvaluationResult] = {}
        self._refs: Dict[int, int] = {}

    def __len__(self):
        return len(self.genomes)

    def __contains__(self, gid: int):
        return gid in self.genomes

    def __getitem__(self, gid: int) -> Genome:
        return self.genomes[gid]

    def retain(self, genome: Genome, result: Optional[EvaluationResult] = None):
        self.genomes[genome.id] = genome
        if result is not None:
            self.results[genome.id] = result
        self._refs[genome.id] = self._refs.get(genome.id, 0) + 1

    def release(self, gid: int):
        n = self._refs.get(gid, 0) - 1
        if n > 0:
            self._refs[gid] = n
        else:
            self._refs.pop(gid, None)
            self.genomes.pop(gid, None)
            self.results.pop(gid, None)

    def refcount(self, gid: int) -> int:
        return self._refs.get(gid, 0)


def insert_elite(elite_map: EliteMap, store: GenomeStore, genome: Genome,
                 result: EvaluationResult, found_at: int) -> bool:
    """try_insert plus genome-store bookkeeping."""
    entry = EliteEntry(genome.id, result.total_score, result.total_timesteps, found_at)
    old = elite_map.get(result.feature)
    if not elite_map.try_insert(result.feature, entry):
        return False
    store.retain(genome, result)
    if old is not None:
        store.release(old.genome_id)
    return True


# ---------------------------------------------------------------- snapshots

ARCHIVE_MAGIC = "# qdzelda archive v1"


def _fmt_float(x: float) -> str:
    return repr(float(x))


def write_archive(fh, elite_map: EliteMap, store: Optional[GenomeStore] = None,
                  topology_hash: str = "-") -> None:
    """Write a map snapshot.

    Layout: a magic line, a ``# key=value`` header, one tab-separated record
    per cell (``feature_bits scheme score timesteps found_at genome_id``), then,
    if a store is given, the genome section of :func:`write_store` restricted
    to the genomes the map references.
    """
    fh.write(ARCHIVE_MAGIC + "\n")
    fh.write(f"# scheme={elite_map.scheme.value} criterion={elite_map.criterion.value} "
             f"n_levels={elite_map.n_levels} cells={len(elite_map)}\n")
    for feature, e in elite_map:
        fh.write(f"{feature.bits}\t{feature.scheme.value}\t{_fmt_float(e.score)}\t"
                 f"{e.timesteps}\t{e.found_at}\t{e.genome_id}\n")
    if store is not None:
        write_store(fh, store, elite_map.genome_ids(), topology_hash)


def write_store(fh, store: GenomeStore, ids: Optional[Sequence[int]] = None,
                topology_hash: str = "-") -> None:
    """``# genomes N`` followed by genome snapshots, then ``# results N``
    followed by one tab-separated record per (genome, level):
    ``genome_id level won got_key score steps tiles kills``."""
    ids = list(store.genomes) if ids is None else [g for g in ids if g in store]
    fh.write(f"# genomes {len(ids)}\n")
    for gid in ids:
        write_genome(fh, store[gid], topology_hash)
    with_results = [gid for gid in ids if gid in store.results]
    fh.write(f"# results {len(with_results)}\n")
    for gid in with_results:
        for i, r in enumerate(store.results[gid].per_level):
            fh.write(f"{gid}\t{i}\t{int(r.won)}\t{int(r.got_key)}\t{_fmt_float(r.score)}\t"
                     f"{r.steps_used}\t{r.tiles_visited}\t{r.kills}\n")


def archive_to_text(elite_map: EliteMap, store: Optional[GenomeStore] = None,
                    topology_hash: str = "-") -> str:
    buf = io.StringIO()
    write_archive(buf, elite_map, store, topology_hash)
    return buf.getvalue()


class _Lines:
    """Line iterator that remembers the current (1-based) line number."""

    def __init__(self, text: str):
        self._lines = text.split("\n")
        if self._lines and self._lines[-1] == "":
            self._lines.pop()
        self.pos = 0

    def __iter__(self):
        return self

    def __next__(self) -> str:
        if self.pos >= len(self._lines):
            raise StopIteration
        self.pos += 1
        return self._lines[self.pos - 1]

    def peek(self) -> Optional[str]:
        return self._lines[self.pos] if self.pos < len(self._lines) else None


def _section_count(line: str, name: str, where: int) -> int:
    prefix = f"# {name} "
    if not line.startswith(prefix):
        raise ArchiveFormatError(f"expected '# {name} N' section", where)
    return int(line[len(prefix):])


def _read_store(lines: _Lines, scheme: FeatureScheme) -> Tuple[GenomeStore, str]:
    store = GenomeStore()
    topo = "-"
    for _ in range(_section_count(next(lines), "genomes", lines.pos)):
        genome, topo = read_genome(lines)
        store.genomes[genome.id] = genome
    per_gid: Dict[int, List[EpisodeResult]] = {}
    order: List[int] = []
    n = _section_count(next(lines), "results", lines.pos)
    while lines.peek() is not None and not lines.peek().startswith("#"):
        parts = next(lines).split("\t")
        if len(parts) != 8:
            raise ArchiveFormatError("expected 8 tab-separated fields", lines.pos)
        gid, lvl, won, key, score, steps, tiles, kills = parts
        gid = int(gid)
        if gid not in per_gid:
            if len(order) == n:
                raise ArchiveFormatError("more result records than declared", lines.pos)
            order.append(gid)
            per_gid[gid] = []
        if int(lvl) != len(per_gid[gid]):
            raise ArchiveFormatError("result levels out of order", lines.pos)
        per_gid[gid].append(EpisodeResult(
            won=won == "1", got_key=key == "1", score=float(score),
            steps_used=int(steps), tiles_visited=int(tiles), kills=int(kills)))
    if len(order) != n:
        raise ArchiveFormatError(f"expected results for {n} genomes, found {len(order)}",
                                 lines.pos)
    for gid in order:
        store.results[gid] = EvaluationResult.from_episodes(per_gid[gid], scheme)
    return store, topo


def _guard(lines: _Lines, fn):
    try:
        return fn()
    except ArchiveFormatError:
        raise
    except StopIteration:
        raise ArchiveFormatError("unexpected end of file", lines.pos + 1) from None
    except (ValueError, KeyError, IndexError) as err:
        raise ArchiveFormatError(str(err) or type(err).__name__, lines.pos) from None


def archive_from_text(text: str):
    """Parse a snapshot written by :func:`write_archive`.

    Returns ``(elite_map, store, topology_hash)``; ``store`` is ``None`` when
    the snapshot has no genome section.
    """
    lines = _Lines(text)

    def parse():
        if next(lines) != ARCHIVE_MAGIC:
            raise ArchiveFormatError("not an archive snapshot", 1)
        header = next(lines)
        if not header.startswith("# "):
            raise ArchiveFormatError("missing header", lines.pos)
        fields = dict(kv.split("=", 1) for kv in header[2:].split())
        elite_map = EliteMap(FeatureScheme(fields["scheme"]), Criterion(fields["criterion"]),
                             int(fields["n_levels"]))
        for _ in range(int(fields["cells"])):
            parts = next(lines).split("\t")
            if len(parts) != 6:
                raise ArchiveFormatError("expected 6 tab-separated fields", lines.pos)
            bits, scheme, score, steps, found, gid = parts
            if FeatureScheme(scheme) is not elite_map.scheme:
                raise ArchiveFormatError("record scheme differs from header", lines.pos)
            feature = BehaviorFeature(elite_map.scheme, int(bits), elite_map.n_levels)
            if feature in elite_map:
                raise ArchiveFormatError("duplicate feature", lines.pos)
            elite_map.try_insert(
                feature, EliteEntry(int(gid), float(score), int(steps), int(found)))
        if lines.peek() is None:
            return elite_map, None, "-"
        store, topo = _read_store(lines, elite_map.scheme)
        if lines.peek() is not None:
            raise ArchiveFormatError("trailing data", lines.pos + 1)
        for gid in elite_map.genome_ids():
            if gid not in store:
                raise ArchiveFormatError(f"genome {gid} referenced but not stored")
            store._refs[gid] = store._refs.get(gid, 0) + 1
        return elite_map, store, topo

    return _guard(lines, parse)


def read_archive(path: Union[str, Path]):
    return archive_from_text(Path(path).read_text())


def store_from_text(text: str, scheme: FeatureScheme) -> Tuple[GenomeStore, str]:
    """Parse a stand-alone :func:`write_store` file (reference counts start at zero)."""
    lines = _Lines(text)

    def parse():
        store, topo = _read_store(lines, scheme)
        if lines.peek() is not None:
            raise ArchiveFormatError("trailing data", lines.pos + 1)
        return store, topo

    return _guard(lines, parse)
