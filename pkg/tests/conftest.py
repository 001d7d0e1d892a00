import numpy as np
import pytest

from asdkit.dataset import SynthSpec, synth_generate
from asdkit.dsp import DspConfig
from asdkit.extractor import ExtractorConfig, LossConfig, TrainConfig
from asdkit.gmm import GmmFitConfig
from asdkit.mixup import MixupConfig


@pytest.fixture(scope="session")
def tiny_spec() -> SynthSpec:
    """Smallest corpus that still exercises every pool."""
    return SynthSpec(
        machine_types=2,
        ids_per_type=2,
        clips_per_id=6,
        clip_seconds=3.0,
        noise_level=0.05,
        seed=7,
        test_normal_per_id=3,
        test_anomalous_per_id=3,
        train_anomalous_per_id=4,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tiny_spec):
    return synth_generate(tiny_spec)


@pytest.fixture(scope="session")
def tiny_dsp() -> DspConfig:
    return DspConfig(chunk_seconds=2.0, n_mels=32, window_ms=32.0, hop_ms=16.0, fmin=50.0, fmax=7000.0)


@pytest.fixture(scope="session")
def tiny_extractor() -> ExtractorConfig:
    return ExtractorConfig(embed_dim=8, conv_stack=((4, 3, 2), (8, 3, 2)), hidden_dim=16)


@pytest.fixture(scope="session")
def tiny_train() -> TrainConfig:
    return TrainConfig(epochs=2, batch_size=8, peak_lr=1e-3, weight_decay=1e-4)


@pytest.fixture(scope="session")
def tiny_loss() -> LossConfig:
    return LossConfig()


@pytest.fixture(scope="session")
def tiny_mixup() -> MixupConfig:
    return MixupConfig()


@pytest.fixture(scope="session")
def tiny_gmm() -> GmmFitConfig:
    return GmmFitConfig(max_iters=50, n_init=2, seed=3)


class StubRng:
    """Deterministic stand-in for a numpy Generator in mixing tests."""

    def __init__(self, permutation=None, gammas=None):
        self._permutation = permutation
        self._gammas = list(gammas or [])

    def permutation(self, n):
        if self._permutation is None:
            return np.arange(n)
        assert len(self._permutation) == n
        return np.asarray(self._permutation)

    def standard_gamma(self, shape, size=None):
        out = np.asarray(self._gammas.pop(0), dtype=np.float64)
        assert out.shape == (size,)
        return out


@pytest.fixture
def stub_rng_factory():
    return StubRng
