"""
Sub-seed derivation. Every random stream of a run is
derived from the single run seed and a fixed counter.
"""

import numpy as np

MODEL_INIT = 0
DATA_ORDER = 1
TRAIN_DRAWS = 2
TEST_DRAWS = 3
LATENT_SAMPLING = 4


def derive_seed(seed: int, counter: int) -> np.random.SeedSequence:
    """SeedSequence of the stream ``counter`` of run ``seed``"""
    return np.random.SeedSequence([int(seed), int(counter)])


def derive_rng(seed: int, counter: int) -> np.random.Generator:
    """Generator of the stream ``counter`` of run ``seed``"""
    return np.random.default_rng(derive_seed(seed, counter))
