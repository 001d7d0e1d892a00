"""Balanced mini-batch construction.

Each batch is half normal data and half pseudo-anomalous data; when real
anomalous clips are available exactly one replaces a pseudo-anomalous slot.
An epoch is one full pass over the normal pool.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import RoleAssignment
from .errors import ConfigurationError

ROLE_NORMAL = "normal"
ROLE_PSEUDO = "pseudo"
ROLE_ANOMALOUS = "anomalous"

BatchEntry = tuple[str, str]  # (clip_id, role)


@dataclass(frozen=True)
class BatchLayout:
    batch_size: int = 128

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ConfigurationError(f"batch_size must be even and >= 2, got {self.batch_size}")

    @property
    def normal_slots(self) -> int:
        return self.batch_size // 2


def make_epoch(
    roles: RoleAssignment, batch_size: int, rng: np.random.Generator
) -> list[list[BatchEntry]]:
    """Build one epoch of fixed-size batches.

    The normal pool (including contaminated clips, believed normal) is
    shuffled and consumed exactly once; the ragged final batch is topped up
    by resampling normal clips already used earlier in the epoch. Pseudo
    slots are drawn uniformly with replacement; when the real-anomalous pool
    is non-empty every batch carries exactly one uniformly drawn anomalous
    clip in place of one pseudo slot.
    """
    layout = BatchLayout(batch_size)
    half = layout.normal_slots
    normal_pool = roles.training_normal_ids()
    pseudo_pool = roles.pseudo_anomalous_ids
    anomalous_pool = roles.real_anomalous_ids
    if len(normal_pool) < half:
        raise ConfigurationError(
            f"normal pool ({len(normal_pool)} clips) smaller than batch_size/2 ({half})"
        )
    if not pseudo_pool:
        raise ConfigurationError("pseudo-anomalous pool is empty")

    order = rng.permutation(len(normal_pool))
    n_batches = -(-len(normal_pool) // half)
    pseudo_per_batch = half - (1 if anomalous_pool else 0)

    batches: list[list[BatchEntry]] = []
    for b in range(n_batches):
        chunk = order[b * half : (b + 1) * half]
        normals = [normal_pool[i] for i in chunk]
        if len(normals) < half:
            used = order[: b * half]
            fill = rng.integers(0, len(used), size=half - len(normals))
            normals += [normal_pool[used[i]] for i in fill]
        entries: list[BatchEntry] = [(cid, ROLE_NORMAL) for cid in normals]
        pseudo_idx = rng.integers(0, len(pseudo_pool), size=pseudo_per_batch)
        entries += [(pseudo_pool[i], ROLE_PSEUDO) for i in pseudo_idx]
        if anomalous_pool:
            entries.append((anomalous_pool[int(rng.integers(0, len(anomalous_pool)))], ROLE_ANOMALOUS))
        batches.append(entries)
    return batches
