"""Amplitude normalization, chunking, and log-mel spectrogram extraction.

All transforms are pure functions of (input, config) and deterministic.
Frequency band limiting is realized through the mel filterbank edges, and
the mel scale is the HTK one, ``2595 * log10(1 + f/700)``, so results are
bit-stable across platforms.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .dataset import AudioClip
from .errors import ShapeError, ValidationError


@dataclass(frozen=True)
class DspConfig:
    chunk_seconds: float = 2.0
    n_mels: int = 224
    window_ms: float = 128.0
    hop_ms: float = 16.0
    fmin: float = 50.0
    fmax: float = 7800.0
    log_floor: float = 1e-10  # added to mel power before the log

    def validate(self, sample_rate: int | None = None) -> None:
        if self.chunk_seconds <= 0:
            raise ValidationError("chunk_seconds must be > 0")
        if self.n_mels < 1:
            raise ValidationError("n_mels must be >= 1")
        if not (0 < self.fmin < self.fmax):
            raise ValidationError("need 0 < fmin < fmax")
        if self.hop_ms > self.window_ms:
            raise ValidationError("hop_ms must be <= window_ms")
        if self.log_floor <= 0:
            raise ValidationError("log_floor must be > 0")
        if sample_rate is not None and self.fmax > sample_rate / 2:
            raise ValidationError(
                f"fmax {self.fmax} exceeds Nyquist {sample_rate / 2}"
            )

    def window_samples(self, sample_rate: int) -> int:
        return int(round(self.window_ms * sample_rate / 1000.0))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(self.hop_ms * sample_rate / 1000.0))

    def chunk_samples(self, sample_rate: int) -> int:
        return int(round(self.chunk_seconds * sample_rate))

    def frames_per_chunk(self, sample_rate: int) -> int:
        win = self.window_samples(sample_rate)
        hop = self.hop_samples(sample_rate)
        return (self.chunk_samples(sample_rate) - win) // hop + 1


@dataclass(frozen=True)
class NormStats:
    """Corpus amplitude statistics of the believed-normal training pool."""

    mean: float
    std: float


@dataclass
class MelChunk:
    values: np.ndarray  # [n_frames, n_mels]
    clip_id: str
    chunk_index: int
    chunk_offset_seconds: float


@dataclass(frozen=True)
class ChunkPlan:
    """Half-overlapping chunk starts covering one clip."""

    m: int
    offsets_samples: tuple[int, ...]
    offsets_seconds: tuple[float, ...]


def fit_norm_stats(normal_clips: list[AudioClip]) -> NormStats:
    """Mean and standard deviation over all samples of all believed-normal clips.

    A standard deviation below 1e-12 (constant signal) is replaced by 1.0
    with a warning.
    """
    if not normal_clips:
        raise ValidationError("need at least one normal clip to fit statistics")
    n = sum(len(c.samples) for c in normal_clips)
    total = sum(float(np.sum(np.asarray(c.samples, dtype=np.float64))) for c in normal_clips)
    mean = total / n
    sq = sum(
        float(np.sum((np.asarray(c.samples, dtype=np.float64) - mean) ** 2))
        for c in normal_clips
    )
    std = math.sqrt(sq / n)
    if std < 1e-12:
        warnings.warn("constant-amplitude corpus: replacing std with 1.0", stacklevel=2)
        std = 1.0
    return NormStats(mean=mean, std=std)


def normalize_samples(samples: np.ndarray, stats: NormStats) -> np.ndarray:
    return (np.asarray(samples, dtype=np.float64) - stats.mean) / stats.std


def apply_norm(clip: AudioClip, stats: NormStats) -> AudioClip:
    """Return a copy of the clip with sample-wise normalized amplitude."""
    return replace(clip, samples=normalize_samples(clip.samples, stats))


def random_crop(
    clip: AudioClip,
    chunk_seconds: float,
    rng: np.random.Generator,
    align_samples: int = 1,
) -> tuple[int, np.ndarray]:
    """Pick one uniform random window of ``chunk_seconds`` from the clip.

    Returns (start_sample, window). With ``align_samples`` > 1 the start is
    drawn uniformly over the aligned grid covering [0, len - chunk].
    """
    chunk = int(round(chunk_seconds * clip.sample_rate))
    n = len(clip.samples)
    if n < chunk:
        raise ValidationError(
            f"clip {clip.clip_id!r} is shorter ({n} samples) than one chunk ({chunk})"
        )
    max_start = n - chunk
    n_positions = max_start // align_samples + 1
    start = int(rng.integers(0, n_positions)) * align_samples
    return start, clip.samples[start : start + chunk]


def overlap_chunks(clip: AudioClip, chunk_seconds: float) -> ChunkPlan:
    """Plan ceil(2L/S) chunk starts at stride S/2, final start clamped.

    The count follows the formula even when the clamped final offset
    duplicates an earlier one.
    """
    chunk = int(round(chunk_seconds * clip.sample_rate))
    n = len(clip.samples)
    if n < chunk:
        raise ValidationError(
            f"clip {clip.clip_id!r} is shorter ({n} samples) than one chunk ({chunk})"
        )
    m = -(-2 * n // chunk)  # ceil(2L/S) in sample units
    offsets = tuple(min(int(round(i * chunk / 2)), n - chunk) for i in range(m))
    seconds = tuple(o / clip.sample_rate for o in offsets)
    return ChunkPlan(m=m, offsets_samples=offsets, offsets_seconds=seconds)


def chunk_windows(clip: AudioClip, plan: ChunkPlan, chunk_seconds: float):
    """Yield (chunk_index, offset_samples, window) per planned chunk."""
    chunk = int(round(chunk_seconds * clip.sample_rate))
    for i, off in enumerate(plan.offsets_samples):
        yield i, off, clip.samples[off : off + chunk]


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


@lru_cache(maxsize=8)
def _hann_cached(n: int) -> np.ndarray:
    return hann_window(n)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(
    sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float
) -> np.ndarray:
    """Triangular mel filters (peak 1.0) on rFFT bins, shape [n_fft//2+1, n_mels].

    Band limiting happens here: edges span [fmin, fmax] on the HTK mel scale.
    """
    edges_mel = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    edges_hz = mel_to_hz(edges_mel)
    bins_hz = np.arange(n_fft // 2 + 1, dtype=np.float64) * sample_rate / n_fft
    fb = np.zeros((len(bins_hz), n_mels))
    for j in range(n_mels):
        lo, center, hi = edges_hz[j], edges_hz[j + 1], edges_hz[j + 2]
        rising = (bins_hz - lo) / (center - lo)
        falling = (hi - bins_hz) / (hi - center)
        fb[:, j] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def _frame_signal(samples: np.ndarray, win: int, hop: int) -> np.ndarray:
    n_frames = (len(samples) - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    return samples[idx]


def signal_logmel(samples: np.ndarray, sample_rate: int, config: DspConfig) -> np.ndarray:
    """Log-mel spectrogram of an arbitrary-length signal, [n_frames, n_mels].

    Pipeline: periodic-Hann STFT (FFT size = window size) -> power ->
    triangular mel filterbank -> natural log of (power + log_floor).
    """
    config.validate(sample_rate)
    x = np.asarray(samples, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValidationError("input samples contain non-finite values")
    win = config.window_samples(sample_rate)
    hop = config.hop_samples(sample_rate)
    if len(x) < win:
        raise ShapeError(f"signal ({len(x)} samples) shorter than the window ({win})")
    frames = _frame_signal(x, win, hop) * _hann_cached(win)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    fb = mel_filterbank(sample_rate, win, config.n_mels, config.fmin, config.fmax)
    return np.log(power @ fb + config.log_floor)


def logmel(window: np.ndarray, sample_rate: int, config: DspConfig) -> np.ndarray:
    """Log-mel spectrogram of exactly one chunk-length window."""
    expected = config.chunk_samples(sample_rate)
    if len(window) != expected:
        raise ShapeError(
            f"window must be chunk_seconds*sample_rate={expected} samples, got {len(window)}"
        )
    return signal_logmel(window, sample_rate, config)


class ClipMelCache:
    """Lazy per-clip cache of normalized full-clip log-mels (float32).

    Supports the training loop: crop starts aligned to the STFT hop make a
    chunk's log-mel an exact row slice of the full-clip log-mel, so each
    clip's spectrogram is computed once per run instead of once per epoch.
    """

    def __init__(self, clips_by_id: dict[str, AudioClip], stats: NormStats, config: DspConfig):
        self.clips_by_id = clips_by_id
        self.stats = stats
        self.config = config
        self._cache: dict[str, np.ndarray] = {}

    def full(self, clip_id: str) -> np.ndarray:
        mel = self._cache.get(clip_id)
        if mel is None:
            clip = self.clips_by_id[clip_id]
            x = normalize_samples(clip.samples, self.stats)
            mel = signal_logmel(x, clip.sample_rate, self.config).astype(np.float32)
            self._cache[clip_id] = mel
        return mel

    def crop_positions(self, clip_id: str) -> int:
        """Number of valid chunk-sized frame offsets in the full-clip mel."""
        clip = self.clips_by_id[clip_id]
        n_frames_full = self.full(clip_id).shape[0]
        n_frames_chunk = self.config.frames_per_chunk(clip.sample_rate)
        if n_frames_full < n_frames_chunk:
            raise ValidationError(f"clip {clip_id!r} is shorter than one chunk")
        return n_frames_full - n_frames_chunk + 1

    def crop(self, clip_id: str, frame_offset: int) -> np.ndarray:
        clip = self.clips_by_id[clip_id]
        n_frames_chunk = self.config.frames_per_chunk(clip.sample_rate)
        return self.full(clip_id)[frame_offset : frame_offset + n_frames_chunk]


def save_mel_chunk(stem: str | Path, chunk: MelChunk) -> tuple[Path, Path]:
    """Write a chunk as raw little-endian float32 plus a JSON sidecar."""
    stem = Path(stem)
    bin_path = stem.with_suffix(".f32")
    meta_path = stem.with_suffix(".json")
    values = np.ascontiguousarray(chunk.values, dtype="<f4")
    bin_path.write_bytes(values.tobytes())
    meta = {
        "clip_id": chunk.clip_id,
        "chunk_index": chunk.chunk_index,
        "n_frames": int(values.shape[0]),
        "n_mels": int(values.shape[1]),
        "chunk_offset_seconds": chunk.chunk_offset_seconds,
    }
    meta_path.write_text(json.dumps(meta) + "\n", encoding="utf-8")
    return bin_path, meta_path


def load_mel_chunk(stem: str | Path) -> MelChunk:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
    raw = np.frombuffer(stem.with_suffix(".f32").read_bytes(), dtype="<f4")
    values = raw.reshape(meta["n_frames"], meta["n_mels"]).copy()
    return MelChunk(
        values=values,
        clip_id=meta["clip_id"],
        chunk_index=meta["chunk_index"],
        chunk_offset_seconds=meta.get("chunk_offset_seconds", 0.0),
    )
