"""Multi-label Mixup over (input, type label, masked id target) triples.

Per-sample mixing coefficients are Beta(beta, beta) distributed, realized
as a ratio of two gamma draws from the supplied generator so the draw
algorithm is pinned. Partners come from one shared permutation of the
batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ShapeError


@dataclass(frozen=True)
class MixupConfig:
    beta: float = 0.2
    enabled: bool = True

    def __post_init__(self):
        if self.beta <= 0:
            raise ConfigurationError(f"beta must be > 0, got {self.beta}")


def mixup_batch(
    x: np.ndarray,
    y: np.ndarray,
    t_masked: np.ndarray,
    config: MixupConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mix a batch with its shuffled self; disabled config is the identity.

    Rows of ``t_masked`` must already be the type-label-masked id targets,
    so each row sums to its ``y``; mixing preserves that identity.
    """
    if not config.enabled:
        return x, y, t_masked
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.float64)
    t_masked = np.asarray(t_masked, dtype=np.float64)
    n = len(y)
    if len(x) != n or len(t_masked) != n:
        raise ShapeError(
            f"batch length mismatch: x={len(x)}, y={n}, t_masked={len(t_masked)}"
        )
    perm = rng.permutation(n)
    g1 = rng.standard_gamma(config.beta, size=n)
    g2 = rng.standard_gamma(config.beta, size=n)
    denom = g1 + g2
    lam = np.where(denom > 0, g1 / np.where(denom > 0, denom, 1.0), 0.5)

    lam_x = lam.astype(x.dtype).reshape((n,) + (1,) * (x.ndim - 1))
    x_mix = lam_x * x + (1 - lam_x) * x[perm]
    y_mix = lam * y + (1 - lam) * y[perm]
    t_mix = lam[:, None] * t_masked + (1 - lam)[:, None] * t_masked[perm]
    return x_mix, y_mix, t_mix
