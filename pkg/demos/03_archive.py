"""Behaviour features and elite maps, with the two replacement rules."""
import numpy as np

from qdzelda.archive import (Criterion, EliteEntry, EliteMap, FeatureScheme, addressable_cells,
                             feature_from_results, feature_to_string, parse_feature)
from qdzelda.env import EpisodeResult

# Won levels 1 and 3 of ten.
per_level = [EpisodeResult(i in (0, 2), i in (0, 2), 10.0, 40, 12) for i in range(10)]
f = feature_from_results(per_level, FeatureScheme.WIN10)
print(feature_to_string(f), "->", f.levels_solved, "levels solved, bits", f.bits)

# Recording keys separately: 'k' key only, 'kw' key and win.
per_level[5] = EpisodeResult(False, True, 1.0, 200, 30)
kw = feature_from_results(per_level, FeatureScheme.KEYWIN20)
print(feature_to_string(kw), "round trips:", parse_feature(feature_to_string(kw)) == kw)
print("cells:", addressable_cells(FeatureScheme.WIN10), addressable_cells(FeatureScheme.KEYWIN20))

# Same feature offered three times to each kind of map.
best = EliteMap(FeatureScheme.WIN10, Criterion.MAX_SCORE)
fast = EliteMap(FeatureScheme.WIN10, Criterion.MIN_TIMESTEPS)
for gid, (score, steps) in enumerate([(12.0, 900), (15.0, 1200), (15.0, 300)], start=1):
    e = EliteEntry(gid, score, steps, gid)
    print(f"agent {gid} score {score} steps {steps}: "
          f"max-score map {best.try_insert(f, e)}, min-steps map {fast.try_insert(f, e)}")
print("kept:", best.get(f).genome_id, "and", fast.get(f).genome_id)

rng = np.random.default_rng(0)
for bits in rng.integers(0, 1024, 50):
    best.try_insert(parse_feature("-".join(format(int(bits), "010b")[::-1])),
                    EliteEntry(int(bits) + 10, float(rng.normal()), 5, 4))
print(best.stats())
