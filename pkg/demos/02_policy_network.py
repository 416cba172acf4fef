"""The convolutional policy as a flat genome: encode, forward, act, mutate."""
import numpy as np

from qdzelda.config import LEVELS_DIR
from qdzelda.env import EnvConfig, load_level_set, run_episode
from qdzelda.policy import (NetworkPolicy, NetworkTopology, ObsMode, encode, forward,
                            init_genome, mutate)

levels = load_level_set(LEVELS_DIR / "default.txt")
level = levels[0]

# Two observation views of the same state.
onehot = encode(level.initial_state, level, ObsMode.ONE_HOT)
charmap = encode(level.initial_state, level, ObsMode.CHAR_MAP)
print("one-hot planes", onehot.tensor.shape, "char map", charmap.tensor.shape)
print(np.round(charmap.tensor[0], 2))

topo = NetworkTopology()
print("\nparameters per genome:", topo.param_count)

rng = np.random.default_rng(1)
g = init_genome(rng, topo, init_std=0.1)
print("init mean %.4f std %.4f" % (g.params.mean(), g.params.std()))
print("logits at reset:", np.round(forward(g, onehot, topo), 4))

# Roll the genome out on every level.
policy = NetworkPolicy(g, topo)
for lv in levels[:4]:
    res = run_episode(lv, policy, EnvConfig())
    print(f"level {lv.id}: won={res.won} key={res.got_key} score={res.score} steps={res.steps_used}")

# Mutation touches ~70% of the weights with N(0, 0.03^2) noise.
child = mutate(g, rng, change_prob=0.7, noise_std=0.03)
delta = child.params - g.params
print("\nchanged %.3f, delta std %.4f, parent id kept: %s"
      % ((delta != 0).mean(), delta[delta != 0].std(), child.parent_id == g.id))
