"""Counter-based random streams for reproducible, schedule-independent sampling.

Every random draw in a filter run comes from a Philox stream addressed by
(key, time step, purpose). Draws are made as whole arrays indexed by particle
slot, so results do not depend on evaluation order or thread count.
"""
from __future__ import annotations

import numpy as np

# purpose lanes within one time step
STP = 0         # state-transition sampling
PROPOSAL = 1    # Gaussian proposal draws
RESAMPLE = 2    # resampling offsets / multinomial draws
OBS_FAIL = 3    # failure indicator draws in simulation
OBS_VALUE = 4   # sensor reading draws in simulation
INIT = 5        # initial particle cloud


def run_key(seed: int, run: int) -> int:
    """128-bit Philox key unique per (experiment seed, Monte Carlo run)."""
    if seed < 0 or run < 0:
        raise ValueError("seed and run index must be nonnegative")
    return ((seed & 0xFFFFFFFFFFFFFFFF) << 64) | (run & 0xFFFFFFFFFFFFFFFF)


def stream(key: int, t: int, purpose: int) -> np.random.Generator:
    """Fresh generator for one (key, step, purpose) address."""
    bitgen = np.random.Philox(key=key, counter=[0, t, purpose, 0])
    return np.random.Generator(bitgen)
