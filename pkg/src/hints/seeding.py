"""Seed splitting.

Every consumer of randomness asks for a generator by stage name. The stream
for ``(seed, name)`` is ``numpy.random.default_rng([seed, crc32(name)])``, so
each stage is reproducible on its own and adding a stage never shifts
another stage's draws.
"""

from __future__ import annotations

import zlib

import numpy as np


def stage_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])
