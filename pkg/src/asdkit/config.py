"""Experiment configuration: defaults, plain-text key/value parsing, dumping.

The config file format is one ``section.key = value`` pair per line with
``#`` comments. Every key has a default, so an empty config runs the
standard recipe; unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import SynthSpec
from .dsp import DspConfig
from .errors import ConfigurationError
from .extractor import ExtractorConfig, LossConfig, TrainConfig
from .gmm import GmmFitConfig
from .mixup import MixupConfig


@dataclass
class ExperimentConfig:
    dataset_source: str = "synth"  # "synth" | "dcase"
    dcase_root: str | None = None
    target_types: list[str] | None = None  # None: every type in the dataset
    synth: SynthSpec = field(default_factory=SynthSpec)
    dsp: DspConfig = field(default_factory=DspConfig)
    mixup: MixupConfig = field(default_factory=MixupConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    gmm: GmmFitConfig = field(default_factory=GmmFitConfig)
    gmm_k: int = 2
    use_machine_ids: bool = True
    n_real_anomalous: int = 0
    n_contaminated: int = 0
    anomalous_counts: list[int] = field(default_factory=lambda: [0, 1, 2, 4, 8, 16, 32])
    contamination_counts: list[int] = field(default_factory=lambda: [0, 1, 2, 4, 8, 16, 32])
    seeds: list[int] = field(default_factory=lambda: [0])

    def __post_init__(self):
        if self.dataset_source not in ("synth", "dcase"):
            raise ConfigurationError(f"dataset.source must be synth or dcase, got {self.dataset_source!r}")
        if not self.seeds:
            raise ConfigurationError("need at least one seed")

    def root_seed(self) -> int:
        return self.seeds[0]


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ConfigurationError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip() != ""]


def _parse_str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip() != ""]


def _parse_float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip() != ""]


def _parse_conv_stack(text: str) -> tuple[tuple[int, int, int], ...]:
    stages = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        fields = part.split(":")
        if len(fields) != 3:
            raise ConfigurationError(
                f"conv stage must be channels:kernel:stride, got {part!r}"
            )
        stages.append(tuple(int(v) for v in fields))
    if not stages:
        raise ConfigurationError("extractor.conv_stack must list at least one stage")
    return tuple(stages)


# key -> (section attribute or None for top level, field name, parser)
_KEYS: dict[str, tuple[str | None, str, object]] = {
    "dataset.source": (None, "dataset_source", str),
    "dataset.dcase_root": (None, "dcase_root", str),
    "dataset.target_types": (None, "target_types", _parse_str_list),
    "synth.machine_types": ("synth", "machine_types", int),
    "synth.ids_per_type": ("synth", "ids_per_type", int),
    "synth.clips_per_id": ("synth", "clips_per_id", int),
    "synth.clip_seconds": ("synth", "clip_seconds", float),
    "synth.sample_rate": ("synth", "sample_rate", int),
    "synth.base_frequencies": ("synth", "base_frequencies", lambda t: tuple(_parse_float_list(t))),
    "synth.noise_level": ("synth", "noise_level", float),
    "synth.anomaly_kinds": ("synth", "anomaly_kinds", lambda t: tuple(_parse_str_list(t))),
    "synth.seed": ("synth", "seed", int),
    "synth.test_normal_per_id": ("synth", "test_normal_per_id", int),
    "synth.test_anomalous_per_id": ("synth", "test_anomalous_per_id", int),
    "synth.train_anomalous_per_id": ("synth", "train_anomalous_per_id", int),
    "dsp.chunk_seconds": ("dsp", "chunk_seconds", float),
    "dsp.n_mels": ("dsp", "n_mels", int),
    "dsp.window_ms": ("dsp", "window_ms", float),
    "dsp.hop_ms": ("dsp", "hop_ms", float),
    "dsp.fmin": ("dsp", "fmin", float),
    "dsp.fmax": ("dsp", "fmax", float),
    "dsp.log_floor": ("dsp", "log_floor", float),
    "mixup.beta": ("mixup", "beta", float),
    "mixup.enabled": ("mixup", "enabled", _parse_bool),
    "loss.alpha": ("loss", "alpha", float),
    "loss.id_loss_kind": ("loss", "id_loss_kind", str),
    "loss.type_loss_enabled": ("loss", "type_loss_enabled", _parse_bool),
    "loss.eps": ("loss", "eps", float),
    "train.epochs": ("train", "epochs", int),
    "train.batch_size": ("train", "batch_size", int),
    "train.peak_lr": ("train", "peak_lr", float),
    "train.weight_decay": ("train", "weight_decay", float),
    "train.warmup_frac": ("train", "warmup_frac", float),
    "train.final_lr_frac": ("train", "final_lr_frac", float),
    "extractor.embed_dim": ("extractor", "embed_dim", int),
    "extractor.conv_stack": ("extractor", "conv_stack", _parse_conv_stack),
    "extractor.hidden_dim": ("extractor", "hidden_dim", int),
    "extractor.dtype": ("extractor", "dtype", str),
    "gmm.k": (None, "gmm_k", int),
    "gmm.max_iters": ("gmm", "max_iters", int),
    "gmm.rel_tol": ("gmm", "rel_tol", float),
    "gmm.reg_scale": ("gmm", "reg_scale", float),
    "gmm.n_init": ("gmm", "n_init", int),
    "ablation.use_machine_ids": (None, "use_machine_ids", _parse_bool),
    "roles.n_real_anomalous": (None, "n_real_anomalous", int),
    "roles.n_contaminated": (None, "n_contaminated", int),
    "sweep.anomalous_counts": (None, "anomalous_counts", _parse_int_list),
    "sweep.contamination_counts": (None, "contamination_counts", _parse_int_list),
    "seeds": (None, "seeds", _parse_int_list),
}


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def build_config(values: dict[str, str]) -> ExperimentConfig:
    unknown = sorted(set(values) - set(_KEYS))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    top: dict[str, object] = {}
    sections: dict[str, dict[str, object]] = {}
    for key, raw in values.items():
        section, attr, parser = _KEYS[key]
        try:
            parsed = parser(raw)
        except ConfigurationError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"bad value for {key}: {raw!r} ({exc})") from exc
        if section is None:
            top[attr] = parsed
        else:
            sections.setdefault(section, {})[attr] = parsed
    kwargs: dict[str, object] = dict(top)
    defaults = ExperimentConfig()
    for section, overrides in sections.items():
        base = getattr(defaults, section)
        kwargs[section] = dataclasses.replace(base, **overrides)
    return ExperimentConfig(**kwargs)


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Load a config file; a missing path gives pure defaults."""
    if path is None:
        return ExperimentConfig()
    text = Path(path).read_text(encoding="utf-8")
    return build_config(parse_config_text(text))


def dump_config(config: ExperimentConfig) -> str:
    """Render the fully resolved configuration in the config-file format."""
    lines = []
    for key, (section, attr, _) in _KEYS.items():
        obj = config if section is None else getattr(config, section)
        value = getattr(obj, attr)
        if value is None:
            continue
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, (list, tuple)):
            if attr == "conv_stack":
                text = ",".join(":".join(str(v) for v in stage) for stage in value)
            else:
                text = ",".join(str(v) for v in value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
