"""Seeded substream discipline.

Every random draw in a trial comes from one of these substreams, derived
from the trial seed with a fixed purpose index. Adding draws to one
purpose never perturbs another, and coupled comparisons (same trial seed,
different config) see identical draws per purpose.
"""

from __future__ import annotations

import numpy as np

RENDER = 0
DROPOUT = 1
WORLD = 2
PROMPTS = 3
SEGCORRUPT = 4
POSE_NOISE = 5
EXEC = 6
CALIB = 7


def substream(trial_seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(trial_seed), int(purpose)]))


def trial_seed(base_seed: int, trial_index: int) -> int:
    return int(base_seed) + int(trial_index)
