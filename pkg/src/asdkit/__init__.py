"""Machine-sound anomaly detection toolkit.

Trains a discriminative feature extractor on normal and pseudo-anomalous
machine recordings (with optional small amounts of real anomalous data),
fits per-machine Gaussian-mixture detectors on the embeddings, and scores
clips by aggregated chunk negative log-likelihood.
"""

__version__ = "0.1.0"

from .dataset import (  # noqa: F401
    AudioClip,
    MachineKey,
    RoleAssignment,
    SynthSpec,
    assign_roles,
    load_dcase_layout,
    synth_generate,
)
from .dsp import DspConfig, NormStats, fit_norm_stats, logmel, overlap_chunks  # noqa: F401
from .extractor import ExtractorConfig, LossConfig, TrainConfig, train_extractor  # noqa: F401
from .gmm import GmmFitConfig, GmmModel, fit, nll  # noqa: F401
from .mixup import MixupConfig, mixup_batch  # noqa: F401
from .sampler import BatchLayout, make_epoch  # noqa: F401
from .scoring import aggregate, auc, pauc, rollup  # noqa: F401
