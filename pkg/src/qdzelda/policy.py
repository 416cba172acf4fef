"""Fixed-topology convolutional policy and its genome.

A policy is three 'same'-padded convolutions with ReLU, an adaptive average
pool to a fixed grid, and a linear layer with one output per action. The pool
makes the parameter count independent of level size, so one genome plays
every level in a level set.

Genome layout (flat, in this order): for each conv layer weights
``(filters, in_channels, k, k)`` then bias ``(filters,)``; then dense weights
``(5, filters * pool_h * pool_w)`` and bias ``(5,)``.
"""
from __future__ import annotations

import enum
import functools
import hashlib
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np

from .env import N_ACTIONS, Action, GameState, Level, Tile


class ShapeMismatch(ValueError):
    pass


class ObsMode(enum.Enum):
    ONE_HOT = "onehot"
    CHAR_MAP = "charmap"


# Entity kinds, in channel order for one-hot observations.
ENTITIES = ("wall", "floor", "key", "door", "avatar", "monster")
WALL, FLOOR, KEY, DOOR, AVATAR, MONSTER = range(len(ENTITIES))
CHAR_CODES = np.linspace(0.0, 1.0, len(ENTITIES))


def channels_for(mode: ObsMode) -> int:
    return len(ENTITIES) if ObsMode(mode) is ObsMode.ONE_HOT else 1


@dataclass(frozen=True)
class NetworkTopology:
    input_channels: int = len(ENTITIES)
    conv_specs: Tuple[Tuple[int, int, int], ...] = ((16, 3, 1), (16, 3, 1), (16, 3, 1))
    pool: Tuple[int, int] = (4, 4)
    dense_out: int = N_ACTIONS
    # Nominal level size, informational only: the pool removes the dependency.
    input_h: int = 9
    input_w: int = 13

    def __post_init__(self):
        if len(self.conv_specs) != 3:
            raise ValueError("topology needs exactly three convolutional layers")
        if self.dense_out != N_ACTIONS:
            raise ValueError(f"dense_out must be {N_ACTIONS}")
        for filters, kernel, stride in self.conv_specs:
            if filters < 1 or kernel < 1 or kernel % 2 == 0 or stride < 1:
                raise ValueError(f"bad conv spec {(filters, kernel, stride)}")

    @classmethod
    def for_mode(cls, mode: ObsMode, **kw) -> "NetworkTopology":
        return cls(input_channels=channels_for(mode), **kw)

    @functools.cached_property
    def layout(self) -> List[Tuple[str, Tuple[int, ...]]]:
        shapes = []
        c = self.input_channels
        for i, (f, k, _) in enumerate(self.conv_specs):
            shapes.append((f"conv{i}.w", (f, c, k, k)))
            shapes.append((f"conv{i}.b", (f,)))
            c = f
        shapes.append(("dense.w", (self.dense_out, c * self.pool[0] * self.pool[1])))
        shapes.append(("dense.b", (self.dense_out,)))
        return shapes

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout)

    @property
    def hash(self) -> str:
        desc = f"{self.input_channels}|{self.conv_specs}|{self.pool}|{self.dense_out}"
        return hashlib.sha1(desc.encode()).hexdigest()[:12]

    def unpack(self, params: np.ndarray) -> List[np.ndarray]:
        if params.shape != (self.param_count,):
            raise ShapeMismatch(
                f"genome has {params.size} parameters, topology needs {self.param_count}")
        out, i = [], 0
        for _, shape in self.layout:
            n = int(np.prod(shape))
            out.append(params[i:i + n].reshape(shape))
            i += n
        return out


@dataclass(frozen=True, eq=False)
class Genome:
    params: np.ndarray
    id: int
    parent_id: Optional[int] = None

    def __post_init__(self):
        p = np.array(self.params, dtype=np.float64)  # private copy
        if p.ndim != 1:
            raise ShapeMismatch("genome parameters must be a flat vector")
        if not np.all(np.isfinite(p)):
            raise ValueError("genome parameters must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    def __len__(self):
        return self.params.size

    def __eq__(self, other):
        if not isinstance(other, Genome):
            return NotImplemented
        return (self.id == other.id and self.parent_id == other.parent_id
                and np.array_equal(self.params, other.params))

    __hash__ = None


def new_id(rng: np.random.Generator) -> int:
    return int(rng.integers(1, 2**63 - 1))


def init_genome(rng: np.random.Generator, topology: Union[NetworkTopology, int],
                init_std: float = 0.1) -> Genome:
    if init_std <= 0:
        raise ValueError("init_std must be positive")
    n = topology if isinstance(topology, int) else topology.param_count
    params = rng.normal(0.0, init_std, size=n)
    return Genome(params, new_id(rng), None)


def mutate(parent: Genome, rng: np.random.Generator, change_prob: float = 0.7,
           noise_std: float = 0.03, mode: str = "additive") -> Genome:
    """Perturb each parameter with probability ``change_prob``.

    ``mode="additive"`` adds N(0, noise_std^2) noise to the chosen entries;
    ``mode="replace"`` overwrites them with fresh N(0, noise_std^2) draws.
    """
    if not 0.0 <= change_prob <= 1.0:
        raise ValueError("change_prob must lie in [0, 1]")
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    n = parent.params.size
    mask = rng.random(n) < change_prob
    noise = rng.normal(0.0, noise_std, size=n)
    if mode == "additive":
        child = np.where(mask, parent.params + noise, parent.params)
    elif mode == "replace":
        child = np.where(mask, noise, parent.params)
    else:
        raise ValueError(f"unknown mutation mode {mode!r}")
    return Genome(child, new_id(rng), parent.id)


@dataclass(frozen=True)
class Observation:
    mode: ObsMode
    tensor: np.ndarray = field(repr=False)


@functools.lru_cache(maxsize=256)
def _base_planes(level: Level) -> np.ndarray:
    """One-hot planes of the static map with every key present."""
    g = level.grid
    planes = np.zeros((len(ENTITIES),) + g.shape)
    planes[WALL] = g == Tile.WALL
    planes[KEY] = g == Tile.KEY
    planes[DOOR] = g == Tile.DOOR
    planes[FLOOR] = (g == Tile.FLOOR) | (g == Tile.AVATAR_START) | (g == Tile.MONSTER_START)
    return planes


def _occupy(planes: np.ndarray, cell, channel: int):
    planes[:, cell[0], cell[1]] = 0.0
    planes[channel, cell[0], cell[1]] = 1.0


def encode(state: GameState, level: Level, mode: ObsMode = ObsMode.ONE_HOT) -> Observation:
    mode = ObsMode(mode)
    planes = _base_planes(level).copy()
    for cell in level.key_cells:
        if cell not in state.keys:
            _occupy(planes, cell, FLOOR)
    for cell, alive in state.monsters:
        if alive:
            _occupy(planes, cell, MONSTER)
    _occupy(planes, state.avatar_pos, AVATAR)
    if mode is ObsMode.ONE_HOT:
        return Observation(mode, planes)
    codes = np.tensordot(CHAR_CODES, planes, axes=1)
    return Observation(mode, codes[None])


def decode_occupancy(obs: Observation) -> np.ndarray:
    """Entity index per cell (inverse of the one-hot encoding)."""
    if obs.mode is ObsMode.ONE_HOT:
        return np.argmax(obs.tensor, axis=0)
    return np.rint(obs.tensor[0] * (len(ENTITIES) - 1)).astype(int)


@functools.lru_cache(maxsize=512)
def _pool_bins(size: int, out: int) -> Tuple[Tuple[int, int], ...]:
    # Same bin edges as torch's adaptive pooling; bins are never empty.
    return tuple((i * size // out, -(-(i + 1) * size // out)) for i in range(out))


@functools.lru_cache(maxsize=512)
def _pool_matrix(h: int, w: int, out_h: int, out_w: int) -> np.ndarray:
    """(out_h*out_w, h*w) averaging matrix."""
    m = np.zeros((out_h, out_w, h, w))
    for i, (r0, r1) in enumerate(_pool_bins(h, out_h)):
        for j, (c0, c1) in enumerate(_pool_bins(w, out_w)):
            m[i, j, r0:r1, c0:c1] = 1.0 / ((r1 - r0) * (c1 - c0))
    return m.reshape(out_h * out_w, h * w)


@functools.lru_cache(maxsize=512)
def _patch_index(h: int, w: int, k: int, stride: int) -> Tuple[np.ndarray, int, int]:
    """Gather index for 'same'-padded k x k patches of an (h*w + 1)-row matrix.

    Row ``h*w`` is the zero padding row.
    """
    p = k // 2
    rows = np.arange(0, h, stride)
    cols = np.arange(0, w, stride)
    r = rows[:, None, None, None] + np.arange(k)[None, None, :, None] - p
    c = cols[None, :, None, None] + np.arange(k)[None, None, None, :] - p
    inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
    flat = np.where(inside, r * w + c, h * w)
    return flat.reshape(len(rows) * len(cols), k * k), len(rows), len(cols)


def _prepare(weights: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Reorder conv kernels (F, C, k, k) into (k*k*C, F) matrices."""
    out = []
    for i in range(0, len(weights) - 2, 2):
        w = weights[i]
        f, c, k, _ = w.shape
        out.append(w.transpose(2, 3, 1, 0).reshape(k * k * c, f))
        out.append(weights[i + 1])
    return out + list(weights[-2:])


def _forward_prepared(prepared: Sequence[np.ndarray], topology: NetworkTopology,
                      x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    if c != topology.input_channels:
        raise ShapeMismatch(
            f"observation has {c} channels, topology expects {topology.input_channels}")
    act = x.reshape(c, h * w).T  # activations as (cells, channels)
    for i, (_, k, stride) in enumerate(topology.conv_specs):
        idx, h, w = _patch_index(h, w, k, stride)
        padded = np.concatenate([act, np.zeros((1, act.shape[1]))])
        cols = padded[idx].reshape(idx.shape[0], -1)
        act = cols @ prepared[2 * i] + prepared[2 * i + 1]
        np.maximum(act, 0.0, out=act)
    pooled = (_pool_matrix(h, w, *topology.pool) @ act).T.ravel()
    return prepared[-2] @ pooled + prepared[-1]


def forward(genome: Genome, obs: Observation, topology: NetworkTopology) -> np.ndarray:
    return _forward_prepared(_prepare(topology.unpack(genome.params)), topology, obs.tensor)


def select_action(logits: Sequence[float]) -> Action:
    # np.argmax returns the first maximum, which is the lowest action index.
    return Action(int(np.argmax(logits)))


class NetworkPolicy:
    """Callable ``(state, level) -> Action`` for one genome."""

    def __init__(self, genome: Genome, topology: NetworkTopology,
                 mode: ObsMode = ObsMode.ONE_HOT):
        self.genome = genome
        self.topology = topology
        self.mode = ObsMode(mode)
        self._prepared = _prepare(topology.unpack(genome.params))
        if channels_for(self.mode) != topology.input_channels:
            raise ShapeMismatch(f"{self.mode.value} observations do not fit this topology")

    def logits(self, state: GameState, level: Level) -> np.ndarray:
        obs = encode(state, level, self.mode)
        return _forward_prepared(self._prepared, self.topology, obs.tensor)

    def __call__(self, state: GameState, level: Level) -> Action:
        return select_action(self.logits(state, level))


# Genome snapshots: "genome <id> <parent_id|-> <param_count> <topology_hash>"
# followed by one parameter per line in shortest round-trip decimal form.

def write_genome(fh: TextIO, genome: Genome, topology_hash: str = "-") -> None:
    parent = "-" if genome.parent_id is None else str(genome.parent_id)
    fh.write(f"genome {genome.id} {parent} {genome.params.size} {topology_hash}\n")
    fh.write("".join(f"{float(v)!r}\n" for v in genome.params))


def read_genome(lines: Iterator[str]) -> Tuple[Genome, str]:
    header = next(lines).split()
    if len(header) != 5 or header[0] != "genome":
        raise ValueError(f"bad genome header: {' '.join(header)!r}")
    _, gid, parent, count, topo = header
    n = int(count)
    params = np.array([float(next(lines)) for _ in range(n)])
    return Genome(params, int(gid), None if parent == "-" else int(parent)), topo
