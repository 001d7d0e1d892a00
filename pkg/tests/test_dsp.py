import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asdkit.dataset import AudioClip, MachineKey
from asdkit.dsp import (
    ClipMelCache,
    DspConfig,
    MelChunk,
    NormStats,
    apply_norm,
    fit_norm_stats,
    hann_window,
    load_mel_chunk,
    logmel,
    mel_filterbank,
    overlap_chunks,
    random_crop,
    save_mel_chunk,
    signal_logmel,
)
from asdkit.errors import ShapeError, ValidationError

SR = 16000


def make_clip(samples, clip_id="c0", sr=SR):
    return AudioClip(
        key=MachineKey("fan", 0),
        condition="normal",
        split="train",
        samples=np.asarray(samples, dtype=np.float64),
        sample_rate=sr,
        clip_id=clip_id,
    )


class TestNormStats:
    def test_all_zero_clips_guard_std(self):
        with pytest.warns(UserWarning):
            stats = fit_norm_stats([make_clip(np.zeros(100))])
        assert stats.mean == 0.0
        assert stats.std == 1.0

    def test_alternating_unit_clip(self):
        stats = fit_norm_stats([make_clip([1.0, -1.0, 1.0, -1.0])])
        assert stats.mean == pytest.approx(0.0, abs=1e-15)
        assert stats.std == pytest.approx(1.0, abs=1e-15)

    def test_two_clips_direct_computation(self):
        # oracle: direct mean/std over the concatenated samples
        a, b = [0.0, 2.0], [0.0, 2.0]
        merged = np.array(a + b)
        stats = fit_norm_stats([make_clip(a), make_clip(b, "c1")])
        assert stats.mean == pytest.approx(float(merged.mean()), abs=1e-15)
        assert stats.std == pytest.approx(float(merged.std()), abs=1e-15)
        assert stats.mean == pytest.approx(1.0)
        assert stats.std == pytest.approx(1.0)

    def test_empty_pool_rejected(self):
        with pytest.raises(ValidationError):
            fit_norm_stats([])


class TestApplyNorm:
    def test_identity_for_unit_stats(self):
        clip = make_clip([0.5, -0.5, 0.25])
        out = apply_norm(clip, NormStats(0.0, 1.0))
        np.testing.assert_array_equal(out.samples, clip.samples)

    def test_affine_example(self):
        out = apply_norm(make_clip([1.0, 3.0]), NormStats(1.0, 2.0))
        np.testing.assert_allclose(out.samples, [0.0, 1.0])

    def test_renormalized_corpus_has_unit_stats(self):
        rng = np.random.default_rng(0)
        clips = [make_clip(rng.normal(3.0, 2.5, size=5000), f"c{i}") for i in range(4)]
        stats = fit_norm_stats(clips)
        normalized = [apply_norm(c, stats) for c in clips]
        refit = fit_norm_stats(normalized)
        assert abs(refit.mean) < 1e-9
        assert abs(refit.std - 1.0) < 1e-6


class TestRandomCrop:
    def test_offset_stays_in_range(self):
        clip = make_clip(np.zeros(10 * SR))
        rng = np.random.default_rng(1)
        for _ in range(200):
            start, window = random_crop(clip, 2.0, rng)
            assert 0 <= start <= 8 * SR
            assert len(window) == 2 * SR

    def test_full_length_chunk_gives_zero_offset(self):
        clip = make_clip(np.zeros(2 * SR))
        start, _ = random_crop(clip, 2.0, np.random.default_rng(2))
        assert start == 0

    def test_reproducible_given_seed(self):
        clip = make_clip(np.zeros(5 * SR))
        a = [random_crop(clip, 2.0, np.random.default_rng(9))[0] for _ in range(20)]
        b = [random_crop(clip, 2.0, np.random.default_rng(9))[0] for _ in range(20)]
        assert a == b

    def test_short_clip_is_hard_error(self):
        with pytest.raises(ValidationError):
            random_crop(make_clip(np.zeros(SR)), 2.0, np.random.default_rng(0))

    def test_aligned_offsets_land_on_grid(self):
        clip = make_clip(np.zeros(10 * SR))
        rng = np.random.default_rng(3)
        starts = {random_crop(clip, 2.0, rng, align_samples=256)[0] for _ in range(300)}
        assert all(s % 256 == 0 for s in starts)
        assert max(starts) <= 8 * SR


class TestOverlapChunks:
    def test_ten_second_clip_gives_ten_chunks(self):
        plan = overlap_chunks(make_clip(np.zeros(10 * SR)), 2.0)
        assert plan.m == 10
        assert plan.offsets_seconds == (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 8.0)

    def test_clip_equal_to_chunk(self):
        plan = overlap_chunks(make_clip(np.zeros(2 * SR)), 2.0)
        assert plan.m == 2
        assert plan.offsets_samples == (0, 0)

    def test_nine_second_clip_clamps_final_offset(self):
        # oracle: enumerate stride-S/2 offsets and clamp by hand
        n, chunk = 9 * SR, 2 * SR
        m = math.ceil(2 * n / chunk)
        expected = tuple(min(i * chunk // 2, n - chunk) for i in range(m))
        plan = overlap_chunks(make_clip(np.zeros(n)), 2.0)
        assert plan.m == m == 9
        assert plan.offsets_samples == expected
        assert plan.offsets_seconds[-1] == 7.0

    @given(dur=st.floats(min_value=2.0, max_value=30.0))
    @settings(max_examples=50, deadline=None)
    def test_formula_and_bounds(self, dur):
        n = int(round(dur * SR))
        clip = make_clip(np.zeros(n))
        plan = overlap_chunks(clip, 2.0)
        assert plan.m == math.ceil(2 * n / (2 * SR))
        assert all(0 <= o <= n - 2 * SR for o in plan.offsets_samples)


class TestLogmel:
    def test_frame_count_matches_arithmetic(self):
        config = DspConfig()
        mel = logmel(np.zeros(2 * SR), SR, config)
        expected = (2 * SR - 2048) // 256 + 1
        assert mel.shape == (expected, 224)
        assert expected == 118

    def test_silence_hits_log_floor(self):
        config = DspConfig(n_mels=16)
        mel = logmel(np.zeros(2 * SR), SR, config)
        np.testing.assert_allclose(mel, math.log(config.log_floor), rtol=0, atol=1e-12)

    def test_peak_band_matches_naive_dft(self):
        # oracle: O(N^2) DFT of one Hann-windowed frame, same filterbank
        config = DspConfig(n_mels=48, window_ms=32.0, hop_ms=16.0, fmax=7000.0)
        t = np.arange(2 * SR) / SR
        tone = np.sin(2 * np.pi * 1000.0 * t)
        mel = logmel(tone, SR, config)

        win = config.window_samples(SR)
        frame = tone[:win] * hann_window(win)
        k = np.arange(win // 2 + 1)
        dft = np.exp(-2j * np.pi * np.outer(k, np.arange(win)) / win) @ frame
        fb = mel_filterbank(SR, win, config.n_mels, config.fmin, config.fmax)
        oracle_mel = np.log(np.abs(dft) ** 2 @ fb + config.log_floor)

        assert int(np.argmax(mel[0])) == int(np.argmax(oracle_mel))
        np.testing.assert_allclose(mel[0], oracle_mel, rtol=1e-8, atol=1e-8)
        # the dominant band is stable across frames
        assert len({int(np.argmax(row)) for row in mel}) == 1

    def test_scaling_shifts_energies_by_2_log_c(self):
        config = DspConfig(n_mels=32, fmax=7000.0)
        rng = np.random.default_rng(5)
        x = rng.normal(size=2 * SR)
        c = 3.7
        base = logmel(x, SR, config)
        scaled = logmel(c * x, SR, config)
        mask = base > math.log(config.log_floor) + 14.0  # far from the floor
        assert mask.any()
        np.testing.assert_allclose(
            (scaled - base)[mask], 2.0 * math.log(c), rtol=0, atol=1e-6
        )

    def test_wrong_window_length_rejected(self):
        with pytest.raises(ShapeError):
            logmel(np.zeros(100), SR, DspConfig())

    def test_non_finite_samples_rejected(self):
        x = np.zeros(2 * SR)
        x[5] = np.nan
        with pytest.raises(ValidationError):
            logmel(x, SR, DspConfig())

    def test_deterministic(self):
        x = np.random.default_rng(11).normal(size=2 * SR)
        config = DspConfig(n_mels=24)
        np.testing.assert_array_equal(logmel(x, SR, config), logmel(x, SR, config))


class TestMelCache:
    def test_hop_aligned_crop_equals_direct_logmel(self, tiny_dsp):
        rng = np.random.default_rng(13)
        clip = make_clip(rng.normal(size=4 * SR))
        stats = NormStats(0.0, 1.0)
        cache = ClipMelCache({clip.clip_id: clip}, stats, tiny_dsp)
        hop = tiny_dsp.hop_samples(SR)
        for frame_offset in (0, 7, cache.crop_positions(clip.clip_id) - 1):
            window = clip.samples[frame_offset * hop : frame_offset * hop + 2 * SR]
            direct = logmel(window, SR, tiny_dsp).astype(np.float32)
            np.testing.assert_allclose(cache.crop(clip.clip_id, frame_offset), direct, rtol=1e-5, atol=1e-5)

    def test_crop_positions_counts_grid(self, tiny_dsp):
        clip = make_clip(np.zeros(4 * SR))
        cache = ClipMelCache({clip.clip_id: clip}, NormStats(0.0, 1.0), tiny_dsp)
        full_frames = signal_logmel(clip.samples, SR, tiny_dsp).shape[0]
        assert cache.crop_positions(clip.clip_id) == full_frames - tiny_dsp.frames_per_chunk(SR) + 1


class TestChunkCacheFiles:
    def test_roundtrip(self, tmp_path):
        values = np.random.default_rng(3).normal(size=(7, 5)).astype(np.float32)
        chunk = MelChunk(values=values, clip_id="a/b", chunk_index=2, chunk_offset_seconds=1.5)
        save_mel_chunk(tmp_path / "chunk_0002", chunk)
        loaded = load_mel_chunk(tmp_path / "chunk_0002")
        np.testing.assert_array_equal(loaded.values, values)
        assert loaded.clip_id == "a/b"
        assert loaded.chunk_index == 2
        assert loaded.chunk_offset_seconds == 1.5


class TestDspConfigValidation:
    def test_band_limits(self):
        with pytest.raises(ValidationError):
            DspConfig(fmin=100.0, fmax=50.0).validate()

    def test_fmax_above_nyquist(self):
        with pytest.raises(ValidationError):
            DspConfig(fmax=9000.0).validate(SR)

    def test_hop_larger_than_window(self):
        with pytest.raises(ValidationError):
            DspConfig(window_ms=16.0, hop_ms=32.0).validate()
