"""Data model, DCASE-style directory ingestion, role assignment, and synthetic data.

A dataset is a flat list of :class:`AudioClip`. Training roles (normal,
pseudo-anomalous, real-anomalous, contaminated) are assigned per target
machine type by :func:`assign_roles`; the synthetic generator produces a
desk-scale corpus with tunable anomaly separability.
"""

from __future__ import annotations

import json
import math
import re
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    FileError,
    FilenameError,
    FormatError,
    QuotaError,
    ValidationError,
)

EXPECTED_SAMPLE_RATE = 16000

CONDITION_NORMAL = "normal"
CONDITION_ANOMALOUS = "anomalous"
SPLIT_TRAIN = "train"
SPLIT_TEST = "test"

ANOMALY_KINDS = ("pitch_shift", "transient_bursts", "harmonic_drop")

_WAV_NAME_RE = re.compile(r"^(normal|anomaly)_id_(\d{2})_(\d{8})\.wav$")


@dataclass(frozen=True, order=True)
class MachineKey:
    """Identifies one machine unit: a product category plus a unit index."""

    machine_type: str
    machine_id: int

    def __post_init__(self):
        if not self.machine_type:
            raise ValidationError("machine_type must be non-empty")
        if self.machine_id < 0:
            raise ValidationError(f"machine_id must be >= 0, got {self.machine_id}")


@dataclass
class AudioClip:
    """One labeled mono recording."""

    key: MachineKey
    condition: str  # CONDITION_NORMAL | CONDITION_ANOMALOUS
    split: str  # SPLIT_TRAIN | SPLIT_TEST
    samples: np.ndarray  # float, mono
    sample_rate: int
    clip_id: str
    path: str | None = None

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValidationError(f"sample_rate must be > 0, got {self.sample_rate}")
        if len(self.samples) == 0:
            raise ValidationError(f"clip {self.clip_id!r} has no samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class RoleAssignment:
    """Training-role pools for one target machine type.

    The four clip-id lists are pairwise disjoint. Contaminated clips are
    anomalous recordings mislabeled into the normal pool; everything that
    treats them as believed-normal should use :meth:`training_normal_ids`.
    """

    target_type: str
    normal_ids: list[str]
    pseudo_anomalous_ids: list[str]
    real_anomalous_ids: list[str]
    contaminated_ids: list[str]
    seed: int

    def training_normal_ids(self) -> list[str]:
        """Clips treated as normal (y=1) during training."""
        return self.normal_ids + self.contaminated_ids

    def excluded_from_eval(self) -> set[str]:
        """Clip ids consumed by training draws; never scored at evaluation."""
        return set(self.real_anomalous_ids) | set(self.contaminated_ids)

    def validate(self, dataset: list[AudioClip]) -> None:
        by_id = {c.clip_id: c for c in dataset}
        pools = [
            self.normal_ids,
            self.pseudo_anomalous_ids,
            self.real_anomalous_ids,
            self.contaminated_ids,
        ]
        seen: set[str] = set()
        total = 0
        for pool in pools:
            total += len(pool)
            seen.update(pool)
            for cid in pool:
                if cid not in by_id:
                    raise ValidationError(f"role pool references unknown clip {cid!r}")
        if len(seen) != total:
            raise ValidationError("role pools are not pairwise disjoint")
        for cid in self.normal_ids:
            clip = by_id[cid]
            if clip.condition != CONDITION_NORMAL or clip.key.machine_type != self.target_type:
                raise ValidationError(f"clip {cid!r} is not a normal clip of {self.target_type!r}")
        for cid in self.pseudo_anomalous_ids:
            if by_id[cid].key.machine_type == self.target_type:
                raise ValidationError(f"pseudo-anomalous clip {cid!r} has the target type")
        for cid in self.real_anomalous_ids + self.contaminated_ids:
            clip = by_id[cid]
            if clip.condition != CONDITION_ANOMALOUS or clip.key.machine_type != self.target_type:
                raise ValidationError(f"clip {cid!r} is not an anomalous clip of {self.target_type!r}")


@dataclass
class SynthSpec:
    """Parameters of the synthetic machine-sound corpus.

    ``clips_per_id`` counts train-split normal clips. The test split gets
    ``test_normal_per_id`` + ``test_anomalous_per_id`` clips per machine ID,
    and ``train_anomalous_per_id`` anomalous clips per ID are emitted into
    the train split as a dedicated pool for training-time draws, so that
    role assignment never consumes evaluation clips.
    """

    machine_types: int = 3
    ids_per_type: int = 3
    clips_per_id: int = 100
    clip_seconds: float = 10.0
    sample_rate: int = EXPECTED_SAMPLE_RATE
    base_frequencies: tuple[float, ...] | None = None
    # calibrated so a whole-clip Mahalanobis-on-log-mel baseline lands
    # around 0.75 aAUC, leaving headroom for the trained pipeline
    noise_level: float = 0.2
    anomaly_kinds: tuple[str, ...] = ANOMALY_KINDS
    seed: int = 0
    test_normal_per_id: int = 40
    test_anomalous_per_id: int = 40
    train_anomalous_per_id: int = 40

    def validate(self) -> None:
        for name in ("machine_types", "ids_per_type", "clips_per_id"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("test_normal_per_id", "test_anomalous_per_id", "train_anomalous_per_id"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.clip_seconds <= 0:
            raise ValidationError("clip_seconds must be > 0")
        if self.sample_rate <= 0:
            raise ValidationError("sample_rate must be > 0")
        if self.noise_level < 0:
            raise ValidationError("noise_level must be >= 0")
        unknown = set(self.anomaly_kinds) - set(ANOMALY_KINDS)
        if unknown:
            raise ValidationError(f"unknown anomaly kinds: {sorted(unknown)}")
        if not self.anomaly_kinds:
            raise ValidationError("anomaly_kinds must be non-empty")
        freqs = self.resolved_base_frequencies()
        for t in range(self.machine_types):
            per_type = freqs[t * self.ids_per_type : (t + 1) * self.ids_per_type]
            if len(set(per_type)) != len(per_type):
                raise ValidationError(f"base frequencies not distinct within type index {t}")

    def resolved_base_frequencies(self) -> tuple[float, ...]:
        """One fundamental per (type, id), flattened type-major."""
        if self.base_frequencies is not None:
            expected = self.machine_types * self.ids_per_type
            if len(self.base_frequencies) != expected:
                raise ValidationError(
                    f"base_frequencies must have machine_types*ids_per_type={expected} "
                    f"entries, got {len(self.base_frequencies)}"
                )
            return tuple(self.base_frequencies)
        out = []
        for t in range(self.machine_types):
            base = 130.0 * (1.5**t)
            for d in range(self.ids_per_type):
                # ~2 semitones between adjacent ids of one type
                out.append(base * (1.1225**d))
        return tuple(out)


def machine_type_name(index: int) -> str:
    return f"type{index:02d}"


def _clip_rng(spec: SynthSpec, type_idx: int, id_idx: int, split: str, condition: str, n: int):
    split_code = 0 if split == SPLIT_TRAIN else 1
    cond_code = 0 if condition == CONDITION_NORMAL else 1
    seq = np.random.SeedSequence([spec.seed, type_idx, id_idx, split_code, cond_code, n])
    return np.random.default_rng(seq)


def _synth_clip_samples(spec: SynthSpec, type_idx: int, f0: float, rng, anomaly: str | None):
    sr = spec.sample_rate
    n = int(round(spec.clip_seconds * sr))
    tau = np.arange(n, dtype=np.float64) / sr

    n_harm = max(1, min(8, int(0.45 * sr / f0)))
    profile = type_idx % 3
    harmonics = np.arange(1, n_harm + 1)
    if profile == 0:
        amps = harmonics**-0.8
    elif profile == 1:
        amps = np.where(harmonics % 2 == 1, harmonics**-1.0, 0.05 * harmonics**-1.0)
    else:
        amps = harmonics**-1.6

    f0_clip = f0 * (1.0 + 0.004 * rng.standard_normal())
    if anomaly == "pitch_shift":
        f0_clip *= 1.0 + 0.15 * rng.choice([-1.0, 1.0])
    if anomaly == "harmonic_drop":
        amps = amps.copy()
        amps[2:] = 0.0  # keep harmonics 1 and 2 only

    tone = np.zeros(n)
    for h, a in zip(harmonics, amps):
        if a == 0.0:
            continue
        phase = rng.uniform(0.0, 2.0 * np.pi)
        tone += a * np.sin(2.0 * np.pi * h * f0_clip * tau + phase)
    # gentle amplitude modulation, rate fixed per type
    am_rate = 2.0 + 1.7 * type_idx
    tone *= 1.0 + 0.15 * np.sin(2.0 * np.pi * am_rate * tau + rng.uniform(0.0, 2.0 * np.pi))
    rms = math.sqrt(float(np.mean(tone**2)))
    tone *= 0.1 / max(rms, 1e-12)

    noise_gain = spec.noise_level * 10.0 ** (rng.uniform(-3.0, 3.0) / 20.0)
    x = tone + noise_gain * rng.standard_normal(n)

    if anomaly == "transient_bursts":
        burst_len = int(round(0.05 * sr))
        target_rms = 4.0 * math.sqrt(float(np.mean(x**2)))
        for _ in range(3):
            start = int(rng.integers(0, n - burst_len + 1))
            x[start : start + burst_len] += target_rms * rng.standard_normal(burst_len)

    limit = 1.0 - 2.0**-15
    return np.clip(x, -limit, limit).astype(np.float32)


def synth_generate(spec: SynthSpec) -> list[AudioClip]:
    """Generate the synthetic corpus; byte-identical across runs for one spec."""
    spec.validate()
    freqs = spec.resolved_base_frequencies()
    clips: list[AudioClip] = []
    groups = [
        (SPLIT_TRAIN, CONDITION_NORMAL, spec.clips_per_id),
        (SPLIT_TRAIN, CONDITION_ANOMALOUS, spec.train_anomalous_per_id),
        (SPLIT_TEST, CONDITION_NORMAL, spec.test_normal_per_id),
        (SPLIT_TEST, CONDITION_ANOMALOUS, spec.test_anomalous_per_id),
    ]
    for t in range(spec.machine_types):
        mtype = machine_type_name(t)
        for d in range(spec.ids_per_type):
            f0 = freqs[t * spec.ids_per_type + d]
            for split, condition, count in groups:
                for i in range(count):
                    rng = _clip_rng(spec, t, d, split, condition, i)
                    anomaly = None
                    if condition == CONDITION_ANOMALOUS:
                        anomaly = str(rng.choice(list(spec.anomaly_kinds)))
                    samples = _synth_clip_samples(spec, t, f0, rng, anomaly)
                    token = "normal" if condition == CONDITION_NORMAL else "anomaly"
                    clip_id = f"{mtype}/{split}/{token}_id_{d:02d}_{i:08d}"
                    clips.append(
                        AudioClip(
                            key=MachineKey(mtype, d),
                            condition=condition,
                            split=split,
                            samples=samples,
                            sample_rate=spec.sample_rate,
                            clip_id=clip_id,
                        )
                    )
    clips.sort(key=lambda c: c.clip_id)
    return clips


def _read_wav(path: Path) -> tuple[np.ndarray, int]:
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            sampwidth = wf.getsampwidth()
            framerate = wf.getframerate()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except (OSError, EOFError) as exc:
        raise FileError(f"cannot read WAV file {path}: {exc}") from exc
    except wave.Error as exc:
        raise FormatError(f"not a readable RIFF PCM WAV file {path}: {exc}") from exc
    if n_channels != 1:
        raise FormatError(f"{path}: expected mono audio, got {n_channels} channels")
    if sampwidth != 2:
        raise FormatError(f"{path}: expected 16-bit PCM, got {8 * sampwidth}-bit")
    if framerate != EXPECTED_SAMPLE_RATE:
        raise FormatError(
            f"{path}: expected {EXPECTED_SAMPLE_RATE} Hz, got {framerate} Hz (no resampling)"
        )
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    if len(samples) == 0:
        raise FormatError(f"{path}: WAV file contains no samples")
    return samples, framerate


def load_dcase_layout(root: str | Path) -> list[AudioClip]:
    """Load ``<machine_type>/<train|test>/*.wav`` into AudioClips.

    File names must match ``normal_id_NN_NNNNNNNN.wav`` or
    ``anomaly_id_NN_NNNNNNNN.wav``; anything else is rejected rather than
    guessed. Clips are returned sorted by relative path.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileError(f"dataset root {root} is not a directory")
    clips: list[AudioClip] = []
    for type_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        mtype = type_dir.name
        for split in (SPLIT_TRAIN, SPLIT_TEST):
            split_dir = type_dir / split
            if not split_dir.is_dir():
                continue
            for wav_path in sorted(split_dir.glob("*.wav")):
                m = _WAV_NAME_RE.match(wav_path.name)
                if m is None:
                    raise FilenameError(
                        f"{wav_path}: name does not match "
                        "'(normal|anomaly)_id_NN_NNNNNNNN.wav'"
                    )
                condition = CONDITION_NORMAL if m.group(1) == "normal" else CONDITION_ANOMALOUS
                machine_id = int(m.group(2))
                samples, sr = _read_wav(wav_path)
                rel = wav_path.relative_to(root).as_posix()
                clips.append(
                    AudioClip(
                        key=MachineKey(mtype, machine_id),
                        condition=condition,
                        split=split,
                        samples=samples,
                        sample_rate=sr,
                        clip_id=rel[:-4],
                        path=str(wav_path),
                    )
                )
    if not clips:
        raise ValidationError(f"no WAV files found under {root}")
    clips.sort(key=lambda c: c.clip_id)
    return clips


def write_dcase_layout(dataset: list[AudioClip], root: str | Path) -> list[Path]:
    """Materialize clips as 16-bit PCM WAVs in the directory layout above."""
    root = Path(root)
    written = []
    counters: dict[tuple[str, str, str, int], int] = {}
    for clip in sorted(dataset, key=lambda c: c.clip_id):
        token = "normal" if clip.condition == CONDITION_NORMAL else "anomaly"
        key = (clip.key.machine_type, clip.split, token, clip.key.machine_id)
        n = counters.get(key, 0)
        counters[key] = n + 1
        out_dir = root / clip.key.machine_type / clip.split
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{token}_id_{clip.key.machine_id:02d}_{n:08d}.wav"
        pcm = np.clip(np.round(np.asarray(clip.samples, dtype=np.float64) * 32768.0), -32768, 32767)
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(2)
            wf.setframerate(clip.sample_rate)
            wf.writeframes(pcm.astype("<i2").tobytes())
        written.append(path)
    return written


def assign_roles(
    dataset: list[AudioClip],
    target_type: str,
    n_real_anomalous: int = 0,
    n_contaminated: int = 0,
    seed: int = 0,
) -> RoleAssignment:
    """Assign training roles for one target machine type.

    Anomalous draws come from the target type's train-split anomalous pool
    when the dataset provides one (synthetic corpora do); otherwise they are
    drawn from the test split and excluded from evaluation. Draws are
    without replacement and deterministic given the seed.
    """
    if n_real_anomalous < 0 or n_contaminated < 0:
        raise ValidationError("anomalous/contamination counts must be >= 0")
    types = {c.key.machine_type for c in dataset}
    if target_type not in types:
        raise ValidationError(f"machine type {target_type!r} not present in dataset")

    normal_ids = sorted(
        c.clip_id
        for c in dataset
        if c.key.machine_type == target_type
        and c.split == SPLIT_TRAIN
        and c.condition == CONDITION_NORMAL
    )
    pseudo_ids = sorted(
        c.clip_id
        for c in dataset
        if c.key.machine_type != target_type
        and c.split == SPLIT_TRAIN
        and c.condition == CONDITION_NORMAL
    )
    train_anom = sorted(
        c.clip_id
        for c in dataset
        if c.key.machine_type == target_type
        and c.split == SPLIT_TRAIN
        and c.condition == CONDITION_ANOMALOUS
    )
    test_anom = sorted(
        c.clip_id
        for c in dataset
        if c.key.machine_type == target_type
        and c.split == SPLIT_TEST
        and c.condition == CONDITION_ANOMALOUS
    )
    pool = train_anom if train_anom else test_anom

    need = n_real_anomalous + n_contaminated
    if need > len(pool):
        raise QuotaError(
            f"requested {need} anomalous clips of {target_type!r} for training "
            f"but only {len(pool)} are available"
        )
    drawn: list[str] = []
    if need:
        rng = np.random.default_rng(np.random.SeedSequence([seed]))
        idx = rng.choice(len(pool), size=need, replace=False)
        drawn = [pool[i] for i in idx]
    return RoleAssignment(
        target_type=target_type,
        normal_ids=normal_ids,
        pseudo_anomalous_ids=pseudo_ids,
        real_anomalous_ids=drawn[:n_real_anomalous],
        contaminated_ids=drawn[n_real_anomalous:],
        seed=seed,
    )


def clip_roles(dataset: list[AudioClip], roles: RoleAssignment) -> dict[str, str]:
    """Map every clip id to its manifest role string."""
    mapping: dict[str, str] = {}
    tagged = {
        **{cid: "normal" for cid in roles.normal_ids},
        **{cid: "pseudo_anomalous" for cid in roles.pseudo_anomalous_ids},
        **{cid: "real_anomalous" for cid in roles.real_anomalous_ids},
        **{cid: "contaminated" for cid in roles.contaminated_ids},
    }
    for clip in dataset:
        role = tagged.get(clip.clip_id)
        if role is None:
            if clip.split == SPLIT_TEST and clip.key.machine_type == roles.target_type:
                role = "eval"
            else:
                role = "unused"
        mapping[clip.clip_id] = role
    return mapping


def write_manifest(path: str | Path, dataset: list[AudioClip], roles: RoleAssignment) -> None:
    """Write one JSON record per clip describing its identity and role."""
    mapping = clip_roles(dataset, roles)
    with open(path, "w", encoding="utf-8") as fh:
        for clip in sorted(dataset, key=lambda c: c.clip_id):
            record = {
                "clip_id": clip.clip_id,
                "machine_type": clip.key.machine_type,
                "machine_id": clip.key.machine_id,
                "condition": clip.condition,
                "split": clip.split,
                "role": mapping[clip.clip_id],
                "path": clip.path,
            }
            fh.write(json.dumps(record) + "\n")


def read_manifest(path: str | Path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
