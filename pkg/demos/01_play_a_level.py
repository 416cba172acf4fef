"""Playing the grid game by hand: parse a level, step it, watch the monster chase."""
import numpy as np

from qdzelda.env import Action, EnvConfig, load_level_set, parse_level, run_actions, step
from qdzelda.config import LEVELS_DIR


def draw(level, state):
    # overlay the moving pieces on the static map
    rows = [list(r.replace("A", ".").replace("+", ".").replace("3", ".")) for r in level.rows]
    for r, c in state.keys:
        rows[r][c] = "+"
    for (r, c), alive in state.monsters:
        if alive:
            rows[r][c] = "3"
    r, c = state.avatar_pos
    rows[r][c] = "A"
    return "\n".join("".join(row) for row in rows)


# A corridor: avatar A, key +, door g, monster 3 three cells to the left.
level = parse_level("wwwwwwwww\nw3..A.+gw\nwwwwwwwww\n")
cfg = EnvConfig(step_limit=20)
state = level.initial_state
print(draw(level, state), "\n")

# Monsters move every second tick; the avatar picks up the key and walks into the door.
for action in (Action.RIGHT, Action.RIGHT, Action.RIGHT):
    state = step(level, state, action, cfg)
    print(f"tick {state.tick} after {action.name}: score {state.score}, {state.terminal.name}")
    print(draw(level, state), "\n")

# The same action list always gives the same trajectory.
trace = run_actions(level, [Action.LEFT, Action.USE, Action.USE], cfg)
print("fighting back:", [(s.tick, s.score, s.kills, s.terminal.name) for s in trace])

# The shipped level set.
levels = load_level_set(LEVELS_DIR / "default.txt")
print(f"\n{len(levels)} shipped levels, sizes", [lv.shape for lv in levels])
print(levels[4].serialize().decode())

# A random walker on every level, for 200 steps.
rng = np.random.default_rng(0)
for lv in levels:
    end = run_actions(lv, [Action(a) for a in rng.integers(0, 5, 200)], EnvConfig())[-1]
    print(f"level {lv.id}: {end.terminal.name:<8} score {end.score:5.1f} visited {len(end.visited)}")
