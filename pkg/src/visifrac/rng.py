"""Seeded random streams, one per job index."""
from __future__ import annotations

import numpy as np


def job_rng(seed: int, job_index: int) -> np.random.Generator:
    """Independent PCG64 stream for (seed, job index) via SeedSequence spawning keys."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(job_index),)))
