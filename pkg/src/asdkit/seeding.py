"""Named deterministic random substreams.

Every run derives all randomness from one root seed; each consumer
(sampler, mixup, crops, init, roles, gmm) gets its own named stream so
toggling one component never perturbs the draws of another.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream_seed(root_seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([root_seed, zlib.crc32(name.encode("utf-8"))])


def substream(root_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(root_seed, name))
