"""Deterministic seed derivation shared across the package.

All stochastic components draw from numpy Generators seeded through
derive_seed, so a single master seed reproduces every stream regardless of
call order or platform.
"""

import numpy as np


def derive_seed(*parts):
    """Collapse integer tags into one 32-bit seed via SeedSequence."""
    entropy = [int(p) & 0xFFFFFFFF for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])
