"""Deterministic Zelda-like grid world.

Levels are ASCII grids::

    wwwwwww
    wA.+.gw
    wwwwwww

``w`` wall, ``.`` floor, ``A`` avatar start, ``+`` key, ``g`` door (exit),
``3`` monster start. The avatar must pick up a key and then walk onto a door.
Monsters chase the avatar at half speed and kill it on contact; the ``Use``
action swings a sword at the cell in front of the avatar.

One call to :func:`step` applies these phases in order:

1. avatar action (move / turn, or sword swing)
2. pickups: key, then door (win)
3. monsters move (odd ticks only)
4. monster collision
5. visited-cell bookkeeping and optional explore bonus
6. tick increment and time limit

There is no random source anywhere in this module.
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

Cell = Tuple[int, int]  # (row, col)


class MalformedLevel(ValueError):
    def __init__(self, message: str, row: Optional[int] = None, col: Optional[int] = None):
        self.row = row
        self.col = col
        where = ""
        if row is not None:
            where = f" at row {row}" + (f", column {col}" if col is not None else "")
        super().__init__(message + where)


class SteppedTerminal(RuntimeError):
    pass


class Tile(enum.IntEnum):
    WALL = 0
    FLOOR = 1
    KEY = 2
    DOOR = 3
    AVATAR_START = 4
    MONSTER_START = 5


CHAR_TO_TILE = {
    "w": Tile.WALL,
    ".": Tile.FLOOR,
    "+": Tile.KEY,
    "g": Tile.DOOR,
    "A": Tile.AVATAR_START,
    "3": Tile.MONSTER_START,
}
TILE_TO_CHAR = {t: c for c, t in CHAR_TO_TILE.items()}

MIN_SIZE, MAX_SIZE = 3, 64


class Action(enum.IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    USE = 4


N_ACTIONS = len(Action)

# Movement actions double as facing directions.
DELTAS = {
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
}
MOVES = (Action.UP, Action.DOWN, Action.LEFT, Action.RIGHT)


class Terminal(enum.Enum):
    RUNNING = "Running"
    WON = "Won"
    DEAD = "Dead"
    TIMED_OUT = "TimedOut"


@dataclass(frozen=True)
class EnvConfig:
    step_limit: int = 200
    explore_reward: bool = False
    reward_key: float = 1.0
    reward_kill: float = 2.0
    reward_win: float = 10.0

    def __post_init__(self):
        if int(self.step_limit) != self.step_limit or self.step_limit < 1:
            raise ValueError(f"step_limit must be a positive integer, got {self.step_limit}")
        if not self.reward_key < self.reward_win:
            raise ValueError("reward_key must be smaller than reward_win")


@dataclass(frozen=True, eq=False)
class Level:
    """A parsed, immutable level. Safe to share between evaluators."""

    id: int
    rows: Tuple[str, ...]
    grid: np.ndarray
    avatar_start: Cell
    key_cells: Tuple[Cell, ...]
    door_cells: Tuple[Cell, ...]
    monster_starts: Tuple[Cell, ...]
    trailing_newline: bool = True
    name: str = ""

    @property
    def height(self) -> int:
        return len(self.rows)

    @property
    def width(self) -> int:
        return len(self.rows[0])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    def __eq__(self, other):
        if not isinstance(other, Level):
            return NotImplemented
        return (self.id, self.rows, self.trailing_newline) == (
            other.id, other.rows, other.trailing_newline)

    def __hash__(self):
        return hash((self.id, self.rows))

    def serialize(self) -> bytes:
        text = "\n".join(self.rows) + ("\n" if self.trailing_newline else "")
        return text.encode("ascii")

    @functools.cached_property
    def initial_state(self) -> "GameState":
        return GameState(
            avatar_pos=self.avatar_start,
            avatar_dir=Action.DOWN,
            has_key=False,
            keys=frozenset(self.key_cells),
            monsters=tuple((pos, True) for pos in self.monster_starts),
            visited=frozenset([self.avatar_start]),
            tick=0,
            score=0.0,
            terminal=Terminal.RUNNING,
        )

    def passable(self, cell: Cell) -> bool:
        return self.grid[cell] != Tile.WALL


def parse_level(text: Union[bytes, str], level_id: int = 0, name: str = "") -> Level:
    if isinstance(text, (bytes, bytearray)):
        try:
            text = text.decode("ascii")
        except UnicodeDecodeError as err:
            raise MalformedLevel(f"non-ASCII byte at offset {err.start}") from None
    trailing = text.endswith("\n")
    body = text[:-1] if trailing else text
    if not body:
        raise MalformedLevel("empty level")
    rows = body.split("\n")

    width = len(rows[0])
    for r, row in enumerate(rows):
        if len(row) != width:
            raise MalformedLevel(f"ragged row: length {len(row)}, expected {width}", r)
        for c, ch in enumerate(row):
            if ch not in CHAR_TO_TILE:
                raise MalformedLevel(f"unknown character {ch!r}", r, c)
    height = len(rows)
    if not (MIN_SIZE <= height <= MAX_SIZE and MIN_SIZE <= width <= MAX_SIZE):
        raise MalformedLevel(f"size {height}x{width} outside [{MIN_SIZE}, {MAX_SIZE}]")

    grid = np.array([[CHAR_TO_TILE[ch] for ch in row] for row in rows], dtype=np.int8)
    for r in range(height):
        for c in range(width):
            on_border = r in (0, height - 1) or c in (0, width - 1)
            if on_border and grid[r, c] != Tile.WALL:
                raise MalformedLevel("open border", r, c)

    def cells(tile):
        return tuple((int(r), int(c)) for r, c in zip(*np.nonzero(grid == tile)))

    avatars = cells(Tile.AVATAR_START)
    if not avatars:
        raise MalformedLevel("missing avatar")
    if len(avatars) > 1:
        raise MalformedLevel("more than one avatar", *avatars[1])
    keys = cells(Tile.KEY)
    if not keys:
        raise MalformedLevel("missing key")
    doors = cells(Tile.DOOR)
    if not doors:
        raise MalformedLevel("missing door")

    grid.setflags(write=False)
    return Level(
        id=level_id,
        rows=tuple(rows),
        grid=grid,
        avatar_start=avatars[0],
        key_cells=keys,
        door_cells=doors,
        monster_starts=cells(Tile.MONSTER_START),
        trailing_newline=trailing,
        name=name,
    )


def load_level(path: Union[str, Path], level_id: int = 0) -> Level:
    path = Path(path)
    return parse_level(path.read_bytes(), level_id=level_id, name=path.stem)


def read_manifest(path: Union[str, Path]) -> List[Path]:
    """Level file paths listed in a manifest, resolved relative to it.

    Blank lines and ``#`` comments are skipped. List position is the level index.
    """
    path = Path(path)
    out = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            p = Path(line)
            out.append(p if p.is_absolute() else path.parent / p)
    return out


def load_level_set(manifest: Union[str, Path]) -> List[Level]:
    return [load_level(p, level_id=i) for i, p in enumerate(read_manifest(manifest))]


@dataclass(frozen=True)
class GameState:
    avatar_pos: Cell
    avatar_dir: Action
    has_key: bool
    keys: frozenset
    monsters: Tuple[Tuple[Cell, bool], ...]
    visited: frozenset
    tick: int
    score: float
    terminal: Terminal

    @property
    def running(self) -> bool:
        return self.terminal is Terminal.RUNNING

    @property
    def kills(self) -> int:
        return sum(1 for _, alive in self.monsters if not alive)


@dataclass(frozen=True)
class EpisodeResult:
    won: bool
    got_key: bool
    score: float
    steps_used: int
    tiles_visited: int
    kills: int = field(default=0, compare=True)


def reset(level: Level, config: Optional[EnvConfig] = None) -> GameState:
    # The initial state is immutable and cached on the level, so a reset is free.
    return level.initial_state


def _manhattan(a: Cell, b: Cell) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def _chase(level: Level, pos: Cell, target: Cell) -> Cell:
    d0 = _manhattan(pos, target)
    for move in MOVES:
        dr, dc = DELTAS[move]
        cand = (pos[0] + dr, pos[1] + dc)
        tile = level.grid[cand]
        if tile == Tile.WALL or tile == Tile.DOOR:
            continue
        if _manhattan(cand, target) < d0:
            return cand
    return pos


def step(level: Level, state: GameState, action: Action, config: EnvConfig) -> GameState:
    if state.terminal is not Terminal.RUNNING:
        raise SteppedTerminal(f"step() called on a {state.terminal.value} state")
    action = Action(action)
    pos, facing = state.avatar_pos, state.avatar_dir
    has_key, keys, monsters = state.has_key, state.keys, state.monsters
    score, terminal = state.score, Terminal.RUNNING
    grid = level.grid

    # 1. avatar
    if action is Action.USE:
        dr, dc = DELTAS[facing]
        target = (pos[0] + dr, pos[1] + dc)
        for i, (mpos, alive) in enumerate(monsters):
            if alive and mpos == target:
                monsters = monsters[:i] + ((mpos, False),) + monsters[i + 1:]
                score += config.reward_kill
                break
    else:
        facing = action
        dr, dc = DELTAS[action]
        target = (pos[0] + dr, pos[1] + dc)
        tile = grid[target]
        if tile != Tile.WALL and not (tile == Tile.DOOR and not has_key):
            pos = target

    # 2. pickups
    if pos in keys:
        keys = keys - {pos}
        if not has_key:
            score += config.reward_key
        has_key = True
    if grid[pos] == Tile.DOOR and has_key:
        terminal = Terminal.WON
        score += config.reward_win

    if terminal is Terminal.RUNNING:
        # 3. monsters, half speed
        if state.tick % 2 == 1 and monsters:
            monsters = tuple(
                (_chase(level, mpos, pos), True) if alive else (mpos, False)
                for mpos, alive in monsters
            )
        # 4. collision
        if any(alive and mpos == pos for mpos, alive in monsters):
            terminal = Terminal.DEAD

    # 5. visited set
    visited = state.visited
    if pos not in visited:
        visited = visited | {pos}
        if config.explore_reward:
            score += 1.0

    # 6. clock
    tick = state.tick + 1
    if tick >= config.step_limit and terminal is Terminal.RUNNING:
        terminal = Terminal.TIMED_OUT

    return GameState(pos, facing, has_key, keys, monsters, visited, tick, score, terminal)


PolicyFn = Callable[[GameState, Level], Action]


def _result(state: GameState) -> EpisodeResult:
    return EpisodeResult(
        won=state.terminal is Terminal.WON,
        got_key=state.has_key,
        score=state.score,
        steps_used=state.tick,
        tiles_visited=len(state.visited),
        kills=state.kills,
    )


def run_episode(
    level: Level,
    policy_fn: PolicyFn,
    config: EnvConfig,
    trace: Optional[list] = None,
    fast_forward: bool = True,
) -> EpisodeResult:
    """Play one episode to termination.

    ``policy_fn(state, level)`` must be a pure function of what it observes.
    If ``trace`` is a list, ``(action, state_after)`` pairs are appended to it
    and every tick is simulated.

    With ``fast_forward`` a state that recurs two ticks later (ignoring the
    tick counter) is recognised as a period-2 cycle: nothing can change until
    the time limit, so the episode jumps straight to it. Monster moves depend
    on tick parity only, and observations never include the tick, so the jump
    is exact.
    """
    state = reset(level, config)
    prev: Optional[GameState] = None
    record = trace is not None
    if record:
        fast_forward = False
    while state.terminal is Terminal.RUNNING:
        action = policy_fn(state, level)
        new = step(level, state, action, config)
        if record:
            trace.append((Action(action), new))
        if fast_forward and new.terminal is Terminal.RUNNING and prev is not None:
            if replace(new, tick=0) == replace(prev, tick=0):
                # prev -> state -> new == prev: loop until the limit
                remaining = config.step_limit - new.tick
                final = new if remaining % 2 == 0 else state
                new = replace(final, tick=config.step_limit, terminal=Terminal.TIMED_OUT)
        prev, state = state, new
    return _result(state)


def run_actions(level: Level, actions: Sequence[Action], config: EnvConfig) -> List[GameState]:
    """States visited by a fixed action sequence (stops at a terminal state)."""
    state = reset(level, config)
    states = [state]
    for a in actions:
        if not state.running:
            break
        state = step(level, state, a, config)
        states.append(state)
    return states
