import math

import numpy as np
import pytest

from asdkit.dataset import assign_roles
from asdkit.errors import ArtifactError, IllConditioningError, ValidationError
from asdkit.extractor import TrainConfig, train_extractor
from asdkit.gmm import (
    GmmFitConfig,
    GmmModel,
    embed_clip_chunks,
    fit,
    load_detector,
    nll,
    nll_batch,
    save_detector,
    train_detectors,
)


def standard_normal_1d():
    return GmmModel(
        weights=np.array([1.0]),
        means=np.zeros((1, 1)),
        covariances=np.ones((1, 1, 1)),
    )


class TestFit:
    def test_single_component_matches_closed_form(self):
        # oracle: maximum-likelihood mean and biased covariance (+ the same
        # diagonal regularization the fitter applies)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(400, 3)) @ np.diag([1.0, 2.0, 0.5]) + [1.0, -2.0, 0.2]
        config = GmmFitConfig(seed=1)
        model = fit(x, k=1, config=config)
        mean = x.mean(axis=0)
        centered = x - mean
        cov = centered.T @ centered / len(x)
        cov[np.diag_indices_from(cov)] += config.reg_scale * float(np.mean(np.diag(cov)))
        np.testing.assert_allclose(model.means[0], mean, atol=1e-6)
        np.testing.assert_allclose(model.covariances[0], cov, atol=1e-6)
        np.testing.assert_allclose(model.weights, [1.0])

    def test_two_separated_clusters_recovered(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(500, 2)) * 0.3 + [4.0, 4.0]
        b = rng.normal(size=(500, 2)) * 0.3 + [-4.0, -4.0]
        x = np.vstack([a, b])
        model = fit(x, k=2, config=GmmFitConfig(seed=2))
        centers = sorted(tuple(m) for m in model.means)
        np.testing.assert_allclose(centers[0], [-4.0, -4.0], atol=0.1)
        np.testing.assert_allclose(centers[1], [4.0, 4.0], atol=0.1)
        assert abs(model.weights.sum() - 1.0) < 1e-12

    def test_log_likelihood_never_decreases(self):
        rng = np.random.default_rng(3)
        for trial in range(20):
            n = int(rng.integers(30, 120))
            d = int(rng.integers(1, 5))
            k = int(rng.integers(1, 4))
            x = rng.normal(size=(n, d)) + rng.normal(scale=3.0, size=(1, d))
            model = fit(x, k=k, config=GmmFitConfig(seed=trial, n_init=1))
            history = model.fit_log_likelihoods
            assert history, "fit must record its likelihood trajectory"
            for prev, cur in zip(history, history[1:]):
                assert cur >= prev - 1e-8

    def test_covariances_symmetric_and_factorizable(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(200, 4))
        model = fit(x, k=2, config=GmmFitConfig(seed=5))
        for cov, chol in zip(model.covariances, model.chol):
            assert np.max(np.abs(cov - cov.T)) <= 1e-9
            np.testing.assert_allclose(chol @ chol.T, cov, atol=1e-9)

    def test_more_dims_than_points_rejected(self):
        with pytest.raises(IllConditioningError):
            fit(np.random.default_rng(0).normal(size=(5, 8)), k=1)

    def test_non_finite_rejected(self):
        x = np.zeros((10, 2))
        x[3, 1] = np.inf
        with pytest.raises(ValidationError):
            fit(x, k=1)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(150, 3))
        m1 = fit(x, k=2, config=GmmFitConfig(seed=7))
        m2 = fit(x, k=2, config=GmmFitConfig(seed=7))
        np.testing.assert_array_equal(m1.means, m2.means)
        np.testing.assert_array_equal(m1.covariances, m2.covariances)


class TestNll:
    def test_standard_normal_at_origin(self):
        # oracle: closed-form Gaussian density, 0.5 * ln(2*pi)
        model = standard_normal_1d()
        assert nll(model, np.array([0.0])) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-9)
        assert nll(model, np.array([0.0])) == pytest.approx(0.918939, abs=1e-6)

    def test_quadratic_growth_in_one_dimension(self):
        model = standard_normal_1d()
        for x in (0.5, 1.0, 2.0, 3.5):
            delta = nll(model, np.array([x])) - nll(model, np.array([0.0]))
            assert delta == pytest.approx(x * x / 2.0, abs=1e-9)

    def test_score_at_mean_not_greater_than_far_away(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(100, 2))
        model = fit(x, k=1, config=GmmFitConfig(seed=0))
        near = nll(model, model.means[0])
        far = nll(model, model.means[0] + 50.0)
        assert near < far

    def test_invariant_under_component_reordering(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(120, 2))
        model = fit(x, k=2, config=GmmFitConfig(seed=1))
        flipped = GmmModel(
            weights=model.weights[::-1].copy(),
            means=model.means[::-1].copy(),
            covariances=model.covariances[::-1].copy(),
        )
        probes = rng.normal(size=(20, 2))
        np.testing.assert_allclose(nll_batch(model, probes), nll_batch(flipped, probes), atol=1e-12)

    def test_density_integrates_to_one(self):
        # quadrature oracle over [-8, 8] standard deviations
        model = standard_normal_1d()
        grid = np.linspace(-8.0, 8.0, 20001)
        density = np.exp(-nll_batch(model, grid[:, None]))
        integral = np.trapezoid(density, grid)
        assert integral == pytest.approx(1.0, abs=1e-6)

    def test_non_finite_feature_rejected(self):
        with pytest.raises(ValidationError):
            nll(standard_normal_1d(), np.array([np.nan]))


class TestGmmModelValidation:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValidationError):
            GmmModel(
                weights=np.array([0.5, 0.2]),
                means=np.zeros((2, 1)),
                covariances=np.ones((2, 1, 1)),
            )

    def test_non_positive_definite_covariance_rejected(self):
        from asdkit.errors import NumericFault

        with pytest.raises(NumericFault):
            GmmModel(
                weights=np.array([1.0]),
                means=np.zeros((1, 2)),
                covariances=np.array([[[1.0, 2.0], [2.0, 1.0]]]),  # indefinite
            )


@pytest.fixture(scope="module")
def tiny_model(tiny_dataset, tiny_dsp, tiny_extractor, tiny_loss, tiny_mixup):
    roles = assign_roles(tiny_dataset, "type00", seed=0)
    model, _ = train_extractor(
        tiny_dataset, roles, tiny_dsp, tiny_extractor, tiny_loss,
        TrainConfig(epochs=1, batch_size=8), tiny_mixup, seed=11,
    )
    return model, roles


class TestTrainDetectors:
    def test_one_detector_per_machine_id(self, tiny_model, tiny_dataset, tiny_gmm):
        model, roles = tiny_model
        detectors = train_detectors(model, tiny_dataset, roles, k=1, config=tiny_gmm)
        assert sorted(detectors) == [0, 1]
        for det in detectors.values():
            assert det.dim == model.config.embed_dim

    def test_chunk_expansion_counts(self, tiny_model, tiny_dataset):
        model, roles = tiny_model
        clips_by_id = {c.clip_id: c for c in tiny_dataset}
        clips = [clips_by_id[cid] for cid in roles.normal_ids[:3]]
        feats = embed_clip_chunks(model, clips)
        # each 3 s clip at 2 s chunks: ceil(2*3/2) = 3 half-overlap chunks
        assert feats.shape == (9, model.config.embed_dim)

    def test_type_level_detector(self, tiny_model, tiny_dataset, tiny_gmm):
        model, roles = tiny_model
        detectors = train_detectors(
            model, tiny_dataset, roles, k=1, config=tiny_gmm, per_machine_id=False
        )
        assert list(detectors) == [None]


class TestDetectorFiles:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(10)
        model = fit(rng.normal(size=(100, 3)), k=2, config=GmmFitConfig(seed=2))
        path = tmp_path / "detector_id_00.gmm"
        save_detector(model, path, "fan", 0, "abc123")
        loaded, meta = load_detector(path)
        assert meta["machine_type"] == "fan"
        assert meta["machine_id"] == 0
        assert meta["extractor_sha256"] == "abc123"
        np.testing.assert_array_equal(loaded.weights, model.weights)
        np.testing.assert_array_equal(loaded.means, model.means)
        np.testing.assert_array_equal(loaded.covariances, model.covariances)
        probes = rng.normal(size=(5, 3))
        np.testing.assert_array_equal(nll_batch(loaded, probes), nll_batch(model, probes))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.gmm"
        path.write_bytes(b"WRONG!!!" + b"\x00" * 32)
        with pytest.raises(ArtifactError):
            load_detector(path)
