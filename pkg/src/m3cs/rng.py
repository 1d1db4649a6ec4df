"""Seeded counter-based RNG helpers. No global RNG state anywhere in the package."""

import numpy as np


def make_rng(seed, *streams):
    """Philox generator keyed by (seed, *streams); distinct stream tuples are independent."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, streams)])))
