"""Seed derivation.

Every random draw in the package comes from numpy's PCG64 generator seeded
through ``numpy.random.SeedSequence([seed, stream, *extra])``. Stream ids
below are fixed; adding a new consumer means adding a new id, never reusing
one, so existing corpora and checkpoints stay reproducible.
"""

import numpy as np

INIT_BACKBONE = 1
INIT_ADAPTER = 2
SCENES = 10
TASKS = 11
CLIPS = 12
HELDOUT = 13
HELDOUT_CLIPS = 14
PRETRAIN_BATCH = 20
PRETRAIN_NOISE = 21
EDIT_SHUFFLE = 30
EDIT_NOISE = 31
EVAL_NOISE = 40
PRETRAIN_EVAL = 41
GRADCHECK = 50


def generator(seed: int, stream: int, *extra: int) -> np.random.Generator:
    """Return an independent PCG64 generator for ``(seed, stream, *extra)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream), *map(int, extra)])))
