"""Named random substreams derived from one root seed.

Every source of randomness in the package (batch sampling, weight init,
dropout masks, tree init) draws from its own substream so that staged
training can reproduce any single component without replaying the rest.
"""

import numpy as np

STREAMS = {"data": 0, "init": 1, "dropout": 2, "tree-init": 3}


def substream(root_seed, name, *indices):
    """Generator for stream `name`, optionally indexed (step, layer, head...).

    Deterministic in (root_seed, name, indices) and independent across
    distinct paths.
    """
    if name not in STREAMS:
        raise ValueError(f"substream: unknown stream {name!r}, "
                         f"expected one of {sorted(STREAMS)}")
    key = (STREAMS[name],) + tuple(int(i) for i in indices)
    return np.random.default_rng(np.random.SeedSequence(int(root_seed), spawn_key=key))
