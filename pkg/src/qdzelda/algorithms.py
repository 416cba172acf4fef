"""MAP-Elites family search algorithms over policy genomes.

Each algorithm is a *driver* with an ask/tell interface::

    genome = driver.ask()
    result = evaluator(genome)
    accepted = driver.tell(genome, result)

Drivers own their maps, genome store and random generator; nothing else may
mutate them. Results may be told in a different order than genomes were
asked (the parallel runner does this).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .archive import (Criterion, EliteMap, EvaluationResult, FeatureScheme, GenomeStore,
                      insert_elite)
from .env import EnvConfig, Level, run_episode
from .policy import Genome, NetworkPolicy, NetworkTopology, ObsMode, init_genome, mutate, new_id


class BatchMismatch(ValueError):
    pass


class RestartTooEarly(RuntimeError):
    pass


# ------------------------------------------------------------------ configs

@dataclass(frozen=True)
class VmeConfig:
    change_prob: float = 0.7
    noise_std: float = 0.03
    init_std: float = 0.1
    mutation_mode: str = "additive"

    def __post_init__(self):
        if not 0.0 <= self.change_prob <= 1.0:
            raise ValueError("change_prob must lie in [0, 1]")
        if self.noise_std < 0 or self.init_std <= 0:
            raise ValueError("noise_std must be >= 0 and init_std > 0")
        if self.mutation_mode not in ("additive", "replace"):
            raise ValueError(f"unknown mutation_mode {self.mutation_mode!r}")


@dataclass(frozen=True)
class CmaConfig:
    sigma0: float = 0.1
    population: int = 0  # 0 = 4 + floor(3 ln n)
    restart_threshold: int = 20
    n_emitters: int = 1
    covariance: str = "diagonal"  # or "full"

    def __post_init__(self):
        if self.sigma0 <= 0:
            raise ValueError("sigma0 must be positive")
        if self.population == 1 or self.population < 0:
            raise ValueError("population must be >= 2 (or 0 for the default)")
        if self.restart_threshold < 1 or self.n_emitters < 1:
            raise ValueError("restart_threshold and n_emitters must be >= 1")
        if self.covariance not in ("diagonal", "full"):
            raise ValueError("covariance must be 'diagonal' or 'full'")


@dataclass(frozen=True)
class DmeConfig:
    F: float = 0.5
    CR: float = 0.9
    crossover_enabled: bool = True

    def __post_init__(self):
        if self.F <= 0:
            raise ValueError("F must be positive")
        if not 0.0 <= self.CR <= 1.0:
            raise ValueError("CR must lie in [0, 1]")


@dataclass(frozen=True)
class EfmeConfig:
    startup: int = 100
    explore_ratio: float = 1.0

    def __post_init__(self):
        if self.startup < 0:
            raise ValueError("startup must be >= 0")
        if not 0.0 <= self.explore_ratio <= 1.0:
            raise ValueError("explore_ratio must lie in [0, 1]")


# --------------------------------------------------------------- evaluation

class Evaluator:
    """Plays one genome on every level of a level set, in manifest order.

    Holds only immutable data, so a copy can live in every worker process.
    """

    def __init__(self, levels: Sequence[Level], env_config: EnvConfig,
                 topology: NetworkTopology, mode: ObsMode = ObsMode.ONE_HOT,
                 scheme: FeatureScheme = FeatureScheme.WIN10):
        self.levels = tuple(levels)
        self.env_config = env_config
        self.topology = topology
        self.mode = ObsMode(mode)
        self.scheme = FeatureScheme(scheme)

    def __call__(self, genome: Genome) -> EvaluationResult:
        policy = NetworkPolicy(genome, self.topology, self.mode)
        episodes = [run_episode(level, policy, self.env_config) for level in self.levels]
        return EvaluationResult.from_episodes(episodes, self.scheme)


def evaluate_candidate(genome: Genome, levels: Sequence[Level], env_config: EnvConfig,
                       topology: NetworkTopology, mode: ObsMode = ObsMode.ONE_HOT,
                       scheme: FeatureScheme = FeatureScheme.WIN10) -> EvaluationResult:
    return Evaluator(levels, env_config, topology, mode, scheme)(genome)


# ----------------------------------------------------------- vanilla ME step

def new_agent(elite_map: EliteMap, store: GenomeStore, rng: np.random.Generator,
              config: VmeConfig, topology) -> Genome:
    """Mutate a uniformly chosen elite, or draw a fresh genome if the map is empty."""
    if len(elite_map) == 0:
        return init_genome(rng, topology, config.init_std)
    parent = store[elite_map.select_random_elite(rng).genome_id]
    return mutate(parent, rng, config.change_prob, config.noise_std, config.mutation_mode)


vme_step = new_agent


# ------------------------------------------------------------------ CMA-ES

class Improvement(NamedTuple):
    """Sort key for CMA-ME ranking: new cell > replacement > rejected.

    ``value`` is the score for new cells and rejections and the score gain
    over the incumbent for replacements.
    """
    tier: int
    value: float

    NEW_CELL = 2
    REPLACED = 1
    REJECTED = 0

    @property
    def accepted(self) -> bool:
        return self.tier > 0


def rank_batch(items: Sequence[Tuple[Genome, Improvement]]) -> List[Tuple[Genome, Improvement]]:
    """Best first; ties keep sampling order."""
    return sorted(items, key=lambda gi: (gi[1].tier, gi[1].value), reverse=True)


class CmaEmitter:
    """CMA-ES sampling distribution (mean, step size, covariance, paths).

    ``covariance="full"`` keeps an n x n matrix; ``"diagonal"`` keeps only its
    diagonal and uses the separable-CMA learning rates, which is what makes
    ~7K-dimensional genomes tractable.
    """

    def __init__(self, mean, sigma: float, population: int = 0,
                 covariance: str = "diagonal", restart_threshold: int = 20):
        mean = np.array(mean, dtype=np.float64)
        n = mean.size
        self.n = n
        self.sigma0 = float(sigma)
        self.covariance = covariance
        self.restart_threshold = restart_threshold
        lam = population or 4 + int(3 * math.log(n))
        if lam < 2:
            raise ValueError("population must be >= 2")
        self.population = lam
        mu = lam // 2
        w = math.log((lam + 1) / 2) - np.log(np.arange(1, mu + 1))
        self.weights = w / w.sum()
        self.mueff = 1.0 / np.sum(self.weights ** 2)
        mueff = self.mueff
        self.cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
        self.cs = (mueff + 2) / (n + mueff + 5)
        c1 = 2 / ((n + 1.3) ** 2 + mueff)
        cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
        if covariance == "diagonal":
            c1, cmu = c1 * (n + 2) / 3, cmu * (n + 2) / 3
            cmu = min(cmu, 1 - c1)
        elif covariance != "full":
            raise ValueError("covariance must be 'diagonal' or 'full'")
        self.c1, self.cmu = c1, cmu
        self.damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + self.cs
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))
        self.reset(mean)

    def reset(self, mean):
        self.mean = np.array(mean, dtype=np.float64)
        self.sigma = self.sigma0
        n = self.n
        self.cov = np.eye(n) if self.covariance == "full" else np.ones(n)
        self.path_c = np.zeros(n)
        self.path_sigma = np.zeros(n)
        self.generation = 0
        self.gens_since_improvement = 0
        self._eig = None

    def copy(self) -> "CmaEmitter":
        other = object.__new__(CmaEmitter)
        other.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v)
                               for k, v in self.__dict__.items()})
        other._eig = None
        return other

    def _eigen(self):
        if self._eig is None:
            vals, vecs = np.linalg.eigh(self.cov)
            vals = np.maximum(vals, 1e-300)
            self._eig = (vecs, np.sqrt(vals))
        return self._eig

    def sample(self, rng: np.random.Generator) -> List[Genome]:
        z = rng.standard_normal((self.population, self.n))
        if self.covariance == "full":
            vecs, d = self._eigen()
            y = (z * d) @ vecs.T
        else:
            y = z * np.sqrt(self.cov)
        x = self.mean + self.sigma * y
        return [Genome(row, new_id(rng), None) for row in x]

    def update(self, ranked: Sequence[Tuple[Genome, Improvement]]) -> "CmaEmitter":
        """Rank-weighted CMA-ES update; ``ranked`` is the last batch, best first."""
        if len(ranked) != self.population:
            raise BatchMismatch(f"got {len(ranked)} candidates, population is {self.population}")
        mu = len(self.weights)
        xs = np.array([g.params for g, _ in ranked[:mu]])
        ys = (xs - self.mean) / self.sigma
        y_w = self.weights @ ys
        self.mean = self.mean + self.sigma * y_w

        cs, cc, mueff = self.cs, self.cc, self.mueff
        if self.covariance == "full":
            vecs, d = self._eigen()
            inv_sqrt_y = vecs @ ((vecs.T @ y_w) / d)
        else:
            inv_sqrt_y = y_w / np.sqrt(self.cov)
        self.path_sigma = (1 - cs) * self.path_sigma + math.sqrt(cs * (2 - cs) * mueff) * inv_sqrt_y
        norm_ps = float(np.linalg.norm(self.path_sigma))
        self.generation += 1
        hsig = (norm_ps / math.sqrt(1 - (1 - cs) ** (2 * self.generation)) / self.chi_n
                < 1.4 + 2 / (self.n + 1))
        self.path_c = (1 - cc) * self.path_c + hsig * math.sqrt(cc * (2 - cc) * mueff) * y_w

        c1, cmu = self.c1, self.cmu
        correction = (1 - hsig) * cc * (2 - cc)
        if self.covariance == "full":
            rank_mu = (ys.T * self.weights) @ ys
            self.cov = ((1 - c1 - cmu) * self.cov
                        + c1 * (np.outer(self.path_c, self.path_c) + correction * self.cov)
                        + cmu * rank_mu)
            self.cov = (self.cov + self.cov.T) / 2
            self._eig = None
        else:
            rank_mu = self.weights @ (ys * ys)
            self.cov = ((1 - c1 - cmu) * self.cov
                        + c1 * (self.path_c ** 2 + correction * self.cov)
                        + cmu * rank_mu)
        self.sigma *= math.exp((cs / self.damps) * (norm_ps / self.chi_n - 1))

        if any(imp.accepted for _, imp in ranked):
            self.gens_since_improvement = 0
        else:
            self.gens_since_improvement += 1
        return self

    def should_restart(self) -> bool:
        return self.gens_since_improvement >= self.restart_threshold

    def restart(self, mean) -> "CmaEmitter":
        if not self.should_restart():
            raise RestartTooEarly(
                f"{self.gens_since_improvement} generations without improvement, "
                f"threshold is {self.restart_threshold}")
        self.reset(mean)
        return self

    def state_dict(self) -> dict:
        arrays = ("mean", "cov", "path_c", "path_sigma")
        d = {k: getattr(self, k).tolist() for k in arrays}
        d.update(n=self.n, sigma0=self.sigma0, sigma=self.sigma, covariance=self.covariance,
                 restart_threshold=self.restart_threshold, population=self.population,
                 generation=self.generation, gens_since_improvement=self.gens_since_improvement)
        return d

    @classmethod
    def from_state(cls, d: dict) -> "CmaEmitter":
        em = cls(np.zeros(d["n"]), d["sigma0"], d["population"], d["covariance"],
                 d["restart_threshold"])
        for k in ("mean", "cov", "path_c", "path_sigma"):
            setattr(em, k, np.array(d[k], dtype=np.float64))
        em.sigma = d["sigma"]
        em.generation = d["generation"]
        em.gens_since_improvement = d["gens_since_improvement"]
        return em


def cma_sample(emitter: CmaEmitter, rng: np.random.Generator) -> List[Genome]:
    return emitter.sample(rng)


def cma_update(emitter: CmaEmitter, ranked) -> CmaEmitter:
    return emitter.update(ranked)


def cma_restart(emitter: CmaEmitter, elite_map: EliteMap, store: GenomeStore,
                rng: np.random.Generator, init_std: float = 0.1) -> CmaEmitter:
    """Recentre a stalled emitter on a random elite (fresh genome if the map is empty)."""
    if not emitter.should_restart():
        raise RestartTooEarly(
            f"{emitter.gens_since_improvement} generations without improvement, "
            f"threshold is {emitter.restart_threshold}")
    if len(elite_map):
        mean = store[elite_map.select_random_elite(rng).genome_id].params
    else:
        mean = init_genome(rng, emitter.n, init_std).params
    return emitter.restart(mean)


# ----------------------------------------------------- differential evolution

def de_donor(a: np.ndarray, b: np.ndarray, c: np.ndarray, F: float) -> np.ndarray:
    return a + F * (b - c)


def binomial_crossover(target: np.ndarray, donor: np.ndarray, CR: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Take each donor entry with probability CR; one random entry always comes from the donor."""
    n = target.size
    take = rng.random(n) < CR
    take[rng.integers(n)] = True
    return np.where(take, donor, target)


def dme_propose(elite_map: EliteMap, store: GenomeStore, rng: np.random.Generator,
                config: DmeConfig, vme_config: VmeConfig, topology) -> Genome:
    """rand/1 proposal from three distinct elites; plain mutation below three."""
    if len(elite_map) < 3:
        return new_agent(elite_map, store, rng, vme_config, topology)
    ids = elite_map.genome_ids()
    ia, ib, ic = rng.choice(len(ids), size=3, replace=False)
    a, b, c = (store[ids[i]] for i in (ia, ib, ic))
    donor = de_donor(a.params, b.params, c.params, config.F)
    if config.crossover_enabled:
        child = binomial_crossover(a.params, donor, config.CR, rng)
    else:
        child = donor
    return Genome(child, new_id(rng), a.id)


# ------------------------------------------------------ explorer / follower

EXPLORE, FOLLOW = "explore", "follow"


def efme_source(count_evaluated: int, rng: np.random.Generator, config: EfmeConfig) -> str:
    """Which map the next parent comes from. Draws from ``rng`` only after startup."""
    if count_evaluated < config.startup:
        return EXPLORE
    if rng.random() < config.explore_ratio:
        return EXPLORE
    return FOLLOW


def efme_next(explore: EliteMap, follow: EliteMap, store: GenomeStore, count_evaluated: int,
              rng: np.random.Generator, config: EfmeConfig, vme_config: VmeConfig,
              topology) -> Genome:
    source = efme_source(count_evaluated, rng, config)
    m = explore if source == EXPLORE else follow
    return new_agent(m, store, rng, vme_config, topology)


def efme_update(explore: EliteMap, follow: EliteMap, store: GenomeStore, genome: Genome,
                result: EvaluationResult, found_at: int) -> Tuple[bool, bool]:
    """Offer the agent to both maps; either, both or neither may take it."""
    return (insert_elite(explore, store, genome, result, found_at),
            insert_elite(follow, store, genome, result, found_at))


# ------------------------------------------------------------------ drivers

def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


def _genome_to_dict(g: Genome) -> dict:
    return {"id": g.id, "parent_id": g.parent_id, "params": g.params.tolist()}


def _genome_from_dict(d: dict) -> Genome:
    return Genome(np.array(d["params"], dtype=np.float64), d["id"], d["parent_id"])


class Driver:
    """Common state of every algorithm: maps, genome store, generator, counter."""

    name = "base"

    def __init__(self, topology, rng: np.random.Generator,
                 scheme: FeatureScheme = FeatureScheme.WIN10, n_levels: int = 10,
                 vme: VmeConfig = VmeConfig()):
        self.topology = topology
        self.rng = rng
        self.scheme = FeatureScheme(scheme)
        self.n_levels = n_levels
        self.vme = vme
        self.store = GenomeStore()
        self.evaluations = 0
        self.map = EliteMap(self.scheme, Criterion.MAX_SCORE, n_levels)

    @property
    def maps(self) -> Dict[str, EliteMap]:
        return {"archive": self.map}

    @property
    def primary_map(self) -> EliteMap:
        return self.map

    def ask(self) -> Genome:
        raise NotImplementedError

    def tell(self, genome: Genome, result: EvaluationResult) -> bool:
        self.evaluations += 1
        return insert_elite(self.map, self.store, genome, result, self.evaluations)

    def state_dict(self) -> dict:
        return {"evaluations": self.evaluations, "rng": _rng_state(self.rng)}

    def load_state_dict(self, state: dict, maps: Dict[str, EliteMap], store: GenomeStore):
        self.evaluations = state["evaluations"]
        self.rng = _rng_from_state(state["rng"])
        for name, m in maps.items():
            setattr(self, name if name != "archive" else "map", m)
        self.store = store


class VmeDriver(Driver):
    name = "VME"

    def ask(self) -> Genome:
        return new_agent(self.map, self.store, self.rng, self.vme, self.topology)


class DmeDriver(Driver):
    name = "DME"

    def __init__(self, *args, dme: DmeConfig = DmeConfig(), **kw):
        super().__init__(*args, **kw)
        self.dme = dme

    def ask(self) -> Genome:
        return dme_propose(self.map, self.store, self.rng, self.dme, self.vme, self.topology)


class EfmeDriver(Driver):
    name = "EFME"

    def __init__(self, *args, efme: EfmeConfig = EfmeConfig(), **kw):
        super().__init__(*args, **kw)
        self.efme = efme
        self.explore = self.map
        self.follow = EliteMap(self.scheme, Criterion.MIN_TIMESTEPS, self.n_levels)
        self.source_counts = {EXPLORE: 0, FOLLOW: 0}
        self.last_accepts = (False, False)

    @property
    def maps(self) -> Dict[str, EliteMap]:
        return {"explore": self.explore, "follow": self.follow}

    @property
    def primary_map(self) -> EliteMap:
        return self.explore

    def ask(self) -> Genome:
        # Counts results already applied, so in-flight candidates are not counted.
        source = efme_source(self.evaluations, self.rng, self.efme)
        self.source_counts[source] += 1
        m = self.explore if source == EXPLORE else self.follow
        return new_agent(m, self.store, self.rng, self.vme, self.topology)

    def tell(self, genome: Genome, result: EvaluationResult) -> bool:
        self.evaluations += 1
        self.last_accepts = efme_update(self.explore, self.follow, self.store, genome, result,
                                        self.evaluations)
        return any(self.last_accepts)

    def state_dict(self) -> dict:
        d = super().state_dict()
        d["source_counts"] = dict(self.source_counts)
        return d

    def load_state_dict(self, state, maps, store):
        super().load_state_dict(state, maps, store)
        self.map = self.explore
        self.source_counts = dict(state["source_counts"])


@dataclass
class _Batch:
    emitter: int
    version: int
    genomes: List[Genome]
    issued: int = 0
    outcomes: Dict[int, Improvement] = field(default_factory=dict)


class CmaMeDriver(Driver):
    """CMA-ME with improvement-ranked emitters, used round-robin.

    A batch sampled from an emitter is only used to update it if the emitter
    has not changed since sampling (possible when more candidates are in
    flight than one batch holds); stale batches still feed the archive.
    """

    name = "CMAME"

    def __init__(self, *args, cma: CmaConfig = CmaConfig(), **kw):
        super().__init__(*args, **kw)
        self.cma = cma
        n = self.topology if isinstance(self.topology, int) else self.topology.param_count
        self.emitters = [
            CmaEmitter(init_genome(self.rng, n, self.vme.init_std).params, cma.sigma0,
                       cma.population, cma.covariance, cma.restart_threshold)
            for _ in range(cma.n_emitters)]
        self.versions = [0] * len(self.emitters)
        self.open_batches: List[_Batch] = []
        self.next_emitter = 0
        self.restarts = 0
        self.stale_batches = 0

    def _current(self, k: int) -> Optional[_Batch]:
        for b in self.open_batches:
            if b.emitter == k and b.issued < len(b.genomes):
                return b
        return None

    def ask(self) -> Genome:
        k = self.next_emitter
        self.next_emitter = (k + 1) % len(self.emitters)
        batch = self._current(k)
        if batch is None:
            batch = _Batch(k, self.versions[k], self.emitters[k].sample(self.rng))
            self.open_batches.append(batch)
        g = batch.genomes[batch.issued]
        batch.issued += 1
        return g

    def _improvement(self, result: EvaluationResult) -> Improvement:
        incumbent = self.map.get(result.feature)
        if incumbent is None:
            return Improvement(Improvement.NEW_CELL, result.total_score)
        if result.total_score > incumbent.score:
            return Improvement(Improvement.REPLACED, result.total_score - incumbent.score)
        return Improvement(Improvement.REJECTED, result.total_score)

    def tell(self, genome: Genome, result: EvaluationResult) -> bool:
        imp = self._improvement(result)
        accepted = super().tell(genome, result)
        batch = next((b for b in self.open_batches
                      if any(g.id == genome.id for g in b.genomes[:b.issued])), None)
        if batch is None:
            return accepted
        batch.outcomes[genome.id] = imp
        if len(batch.outcomes) == len(batch.genomes):
            self.open_batches.remove(batch)
            k = batch.emitter
            if batch.version != self.versions[k]:
                self.stale_batches += 1
                return accepted
            ranked = rank_batch([(g, batch.outcomes[g.id]) for g in batch.genomes])
            emitter = self.emitters[k].update(ranked)
            self.versions[k] += 1
            if emitter.should_restart():
                cma_restart(emitter, self.map, self.store, self.rng, self.vme.init_std)
                self.restarts += 1
        return accepted

    def state_dict(self) -> dict:
        d = super().state_dict()
        d.update(
            emitters=[e.state_dict() for e in self.emitters],
            versions=list(self.versions),
            next_emitter=self.next_emitter,
            restarts=self.restarts,
            stale_batches=self.stale_batches,
            open_batches=[{
                "emitter": b.emitter, "version": b.version, "issued": b.issued,
                "genomes": [_genome_to_dict(g) for g in b.genomes],
                "outcomes": [[gid, imp.tier, imp.value] for gid, imp in b.outcomes.items()],
            } for b in self.open_batches])
        return d

    def load_state_dict(self, state, maps, store):
        super().load_state_dict(state, maps, store)
        self.emitters = [CmaEmitter.from_state(e) for e in state["emitters"]]
        self.versions = list(state["versions"])
        self.next_emitter = state["next_emitter"]
        self.restarts = state["restarts"]
        self.stale_batches = state["stale_batches"]
        self.open_batches = [
            _Batch(b["emitter"], b["version"], [_genome_from_dict(g) for g in b["genomes"]],
                   b["issued"], {gid: Improvement(t, v) for gid, t, v in b["outcomes"]})
            for b in state["open_batches"]]


DRIVERS = {cls.name: cls for cls in (VmeDriver, CmaMeDriver, DmeDriver, EfmeDriver)}
