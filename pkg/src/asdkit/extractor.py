"""Trainable feature extractor, its two heads, losses, and the training loop.

The extractor maps a log-mel chunk to a D-dimensional embedding through a
small strided conv stack with global average pooling. Two heads sit on
top: a scalar affine-plus-sigmoid on the squared embedding norm that
separates normal from pseudo-anomalous data, and an affine-plus-sigmoid
per machine-id class whose targets are masked so only (believed-)normal
data drives it. Training uses AdamW with a one-cycle learning-rate shape.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .dataset import AudioClip, RoleAssignment
from .dsp import ClipMelCache, DspConfig, NormStats, fit_norm_stats
from .errors import ArtifactError, ConfigurationError, NumericFault, ValidationError
from .mixup import MixupConfig, mixup_batch
from .sampler import ROLE_NORMAL, make_epoch
from .seeding import substream

CHECKPOINT_MAGIC = b"ASDXTR01"


@dataclass(frozen=True)
class ExtractorConfig:
    embed_dim: int = 128
    conv_stack: tuple[tuple[int, int, int], ...] = ((16, 5, 2), (32, 3, 2), (64, 3, 2))
    hidden_dim: int = 128
    activation: str = "relu"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim < 2:
            raise ConfigurationError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if not self.conv_stack:
            raise ConfigurationError("conv_stack needs at least one stage")
        if self.activation != "relu":
            raise ConfigurationError(f"unsupported activation {self.activation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float32 if self.dtype == "float32" else torch.float64


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 10.0
    id_loss_kind: str = "bce"  # "bce" | "cross_entropy"
    type_loss_enabled: bool = True
    eps: float = 1e-7  # clamp for log arguments

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if self.id_loss_kind not in ("bce", "cross_entropy"):
            raise ConfigurationError(f"unknown id_loss_kind {self.id_loss_kind!r}")
        if not (0 < self.eps < 0.5):
            raise ConfigurationError(f"eps must be in (0, 0.5), got {self.eps}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    peak_lr: float = 1e-3
    weight_decay: float = 1e-4
    warmup_frac: float = 0.3
    final_lr_frac: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.peak_lr <= 0:
            raise ConfigurationError(f"peak_lr must be > 0, got {self.peak_lr}")
        if not (0 <= self.warmup_frac < 1):
            raise ConfigurationError("warmup_frac must be in [0, 1)")


class ExtractorNet(nn.Module):
    """Conv stack -> global average pool -> hidden affine -> embedding, plus heads."""

    def __init__(self, config: ExtractorConfig, n_classes: int):
        super().__init__()
        self.config = config
        self.n_classes = n_classes
        convs = []
        in_ch = 1
        for out_ch, kernel, stride in config.conv_stack:
            convs.append(nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2))
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        self.hidden = nn.Linear(in_ch, config.hidden_dim)
        self.project = nn.Linear(config.hidden_dim, config.embed_dim)
        self.type_weight = nn.Parameter(torch.ones(1))
        self.type_bias = nn.Parameter(torch.zeros(1))
        self.id_head = nn.Linear(config.embed_dim, n_classes)
        self.to(config.torch_dtype)

    def features(self, x: torch.Tensor, check_finite: bool = True) -> torch.Tensor:
        """Map [B, 1, n_frames, n_mels] chunks to [B, D] embeddings."""
        for i, conv in enumerate(self.convs):
            x = torch.relu(conv(x))
            if check_finite and not torch.isfinite(x).all():
                raise NumericFault(f"non-finite activations after conv stage {i}")
        x = x.mean(dim=(2, 3))
        x = torch.relu(self.hidden(x))
        x = self.project(x)
        if check_finite and not torch.isfinite(x).all():
            raise NumericFault("non-finite activations in the embedding head")
        return x

    def type_prob(self, features: torch.Tensor) -> torch.Tensor:
        sqnorm = (features**2).sum(dim=1)
        return torch.sigmoid(self.type_weight * sqnorm + self.type_bias)

    def id_logits(self, features: torch.Tensor) -> torch.Tensor:
        return self.id_head(features)


def init_parameters(net: ExtractorNet, rng: np.random.Generator) -> None:
    """Fan-in-scaled uniform init drawn from a numpy stream (platform-pinned).

    The norm head starts at weight 1, bias 0 so the embedding norm drives
    the type score from the first step.
    """
    with torch.no_grad():
        for module in list(net.convs) + [net.hidden, net.project, net.id_head]:
            w = module.weight
            fan_in = int(np.prod(w.shape[1:]))
            bound = 1.0 / math.sqrt(fan_in)
            w.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(w.shape))))
            if module.bias is not None:
                module.bias.copy_(
                    torch.from_numpy(rng.uniform(-bound, bound, size=tuple(module.bias.shape)))
                )
        net.type_weight.fill_(1.0)
        net.type_bias.fill_(0.0)


def build_extractor(config: ExtractorConfig, n_classes: int, seed: int | None = None) -> ExtractorNet:
    net = ExtractorNet(config, n_classes)
    init_parameters(net, np.random.default_rng(config.seed if seed is None else seed))
    return net


def mask_targets(y: np.ndarray, t_onehot: np.ndarray) -> np.ndarray:
    """Zero the one-hot id targets of non-normal rows: row i becomes y_i * t_i."""
    y = np.asarray(y, dtype=np.float64)
    t_onehot = np.asarray(t_onehot, dtype=np.float64)
    return y[:, None] * t_onehot


def _clamped_log(p: torch.Tensor, eps: float) -> torch.Tensor:
    return torch.log(torch.clamp(p, min=eps))


def loss_type(net: ExtractorNet, features: torch.Tensor, y: torch.Tensor, eps: float) -> torch.Tensor:
    """Binary cross-entropy of the norm-based type head, averaged over the batch."""
    p = net.type_prob(features)
    return -(y * _clamped_log(p, eps) + (1 - y) * _clamped_log(1 - p, eps)).mean()


def loss_id(
    net: ExtractorNet,
    features: torch.Tensor,
    y: torch.Tensor,
    t_masked: torch.Tensor,
    eps: float,
    kind: str = "bce",
) -> torch.Tensor:
    """Per-class id loss over masked targets, normalized by n_classes * sum(y).

    With soft labels (after Mixup) the normalizer uses the soft sum. A batch
    with sum(y) == 0 contributes zero loss and zero gradient. The
    ``cross_entropy`` variant swaps the element-wise BCE for softmax
    cross-entropy against the same masked targets.
    """
    y_sum = y.sum()
    if float(y_sum) == 0.0:
        return features.sum() * 0.0
    logits = net.id_logits(features)
    if kind == "bce":
        p = torch.sigmoid(logits)
        terms = t_masked * _clamped_log(p, eps) + (1 - t_masked) * _clamped_log(1 - p, eps)
        return -terms.sum() / (net.n_classes * y_sum)
    if kind == "cross_entropy":
        logp = torch.log_softmax(logits, dim=1)
        return -(t_masked * logp).sum() / y_sum
    raise ConfigurationError(f"unknown id_loss_kind {kind!r}")


def total_loss(
    net: ExtractorNet,
    features: torch.Tensor,
    y: torch.Tensor,
    t_masked: torch.Tensor,
    config: LossConfig,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Combined loss: type term (when enabled) plus alpha times the id term."""
    l_id = loss_id(net, features, y, t_masked, config.eps, config.id_loss_kind)
    if config.type_loss_enabled:
        l_type = loss_type(net, features, y, config.eps)
    else:
        l_type = features.sum() * 0.0
    return l_type + config.alpha * l_id, l_type, l_id


def compute_gradients(
    net: ExtractorNet,
    x: torch.Tensor,
    y: torch.Tensor,
    t_masked: torch.Tensor,
    config: LossConfig,
) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of the combined loss for every parameter."""
    net.zero_grad(set_to_none=True)
    total, _, _ = total_loss(net, net.features(x), y, t_masked, config)
    total.backward()
    grads = {}
    for name, param in net.named_parameters():
        g = param.grad
        g = torch.zeros_like(param) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericFault(f"non-finite gradient for parameter {name!r}")
        grads[name] = g.detach().cpu().numpy().copy()
    return grads


def one_cycle_lr(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup to peak_lr then cosine decay to peak_lr * final_lr_frac."""
    warm = max(1, int(round(total_steps * config.warmup_frac)))
    if step < warm:
        return config.peak_lr * (step + 1) / warm
    final = config.peak_lr * config.final_lr_frac
    span = max(1, total_steps - warm)
    tau = (step - warm) / span
    return final + (config.peak_lr - final) * 0.5 * (1.0 + math.cos(math.pi * tau))


@dataclass
class ExtractorModel:
    """A trained extractor plus everything needed to reuse it consistently."""

    net: ExtractorNet
    config: ExtractorConfig
    machine_type: str
    class_ids: list[int]
    norm_stats: NormStats
    dsp: DspConfig
    loss: LossConfig
    train: TrainConfig
    mixup: MixupConfig
    seed: int

    def embed(self, chunks: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Embed [N, n_frames, n_mels] log-mel chunks into [N, D] float64."""
        chunks = np.asarray(chunks)
        if chunks.ndim != 3:
            raise ValidationError(f"expected [N, n_frames, n_mels] chunks, got shape {chunks.shape}")
        outputs = []
        self.net.eval()
        with torch.no_grad():
            for i in range(0, len(chunks), batch_size):
                batch = torch.from_numpy(
                    np.ascontiguousarray(chunks[i : i + batch_size])
                ).to(self.config.torch_dtype)
                outputs.append(self.net.features(batch[:, None]).cpu().numpy())
        return np.concatenate(outputs, axis=0).astype(np.float64)


def _build_batch(
    entries,
    cache: ClipMelCache,
    clips_by_id: dict[str, AudioClip],
    class_index: dict[int, int],
    n_frames: int,
    n_mels: int,
    rng_crop: np.random.Generator,
):
    n = len(entries)
    x = np.empty((n, n_frames, n_mels), dtype=np.float32)
    y = np.zeros(n, dtype=np.float64)
    t = np.zeros((n, len(class_index)), dtype=np.float64)
    for i, (clip_id, role) in enumerate(entries):
        offset = int(rng_crop.integers(0, cache.crop_positions(clip_id)))
        x[i] = cache.crop(clip_id, offset)
        if role == ROLE_NORMAL:
            y[i] = 1.0
            t[i, class_index[clips_by_id[clip_id].key.machine_id]] = 1.0
    return x, y, t


def train_extractor(
    dataset: list[AudioClip],
    roles: RoleAssignment,
    dsp_config: DspConfig,
    extractor_config: ExtractorConfig,
    loss_config: LossConfig,
    train_config: TrainConfig,
    mixup_config: MixupConfig,
    seed: int = 0,
) -> tuple[ExtractorModel, list[dict]]:
    """Train one extractor for the role assignment's target type.

    All randomness (init, batch order, crops, mixing) derives from ``seed``
    through named substreams; two runs with the same inputs and seed produce
    identical parameters. Returns the model and a per-epoch loss history.
    """
    clips_by_id = {c.clip_id: c for c in dataset}
    class_ids = sorted(
        {c.key.machine_id for c in dataset if c.key.machine_type == roles.target_type}
    )
    class_index = {mid: i for i, mid in enumerate(class_ids)}

    normal_clips = [clips_by_id[cid] for cid in roles.training_normal_ids()]
    stats = fit_norm_stats(normal_clips)
    cache = ClipMelCache(clips_by_id, stats, dsp_config)

    sample_rate = normal_clips[0].sample_rate
    n_frames = dsp_config.frames_per_chunk(sample_rate)

    rng_init = substream(seed, "init")
    rng_sampler = substream(seed, "sampler")
    rng_mixup = substream(seed, "mixup")
    rng_crop = substream(seed, "crop")

    net = ExtractorNet(extractor_config, n_classes=len(class_ids))
    init_parameters(net, rng_init)
    net.train()

    half = train_config.batch_size // 2
    batches_per_epoch = -(-len(roles.training_normal_ids()) // half)
    total_steps = train_config.epochs * batches_per_epoch
    optimizer = torch.optim.AdamW(
        net.parameters(), lr=train_config.peak_lr, weight_decay=train_config.weight_decay
    )

    dtype = extractor_config.torch_dtype
    history: list[dict] = []
    step = 0
    for epoch in range(train_config.epochs):
        epoch_losses = {"loss": 0.0, "loss_type": 0.0, "loss_id": 0.0}
        batches = make_epoch(roles, train_config.batch_size, rng_sampler)
        for batch_idx, entries in enumerate(batches):
            x, y, t = _build_batch(
                entries, cache, clips_by_id, class_index, n_frames, dsp_config.n_mels, rng_crop
            )
            t_masked = mask_targets(y, t)
            x, y, t_masked = mixup_batch(x, y, t_masked, mixup_config, rng_mixup)

            lr = one_cycle_lr(step, total_steps, train_config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            xt = torch.from_numpy(np.ascontiguousarray(x)).to(dtype)[:, None]
            yt = torch.from_numpy(y).to(dtype)
            tt = torch.from_numpy(t_masked).to(dtype)

            optimizer.zero_grad(set_to_none=True)
            total, l_type, l_id = total_loss(net, net.features(xt), yt, tt, loss_config)
            if not torch.isfinite(total):
                raise NumericFault(
                    f"loss diverged at epoch {epoch}, batch {batch_idx}: {float(total.detach())}"
                )
            total.backward()
            optimizer.step()
            step += 1

            epoch_losses["loss"] += float(total.detach())
            epoch_losses["loss_type"] += float(l_type.detach())
            epoch_losses["loss_id"] += float(l_id.detach())
        n_b = len(batches)
        history.append(
            {
                "epoch": epoch,
                "loss": epoch_losses["loss"] / n_b,
                "loss_type": epoch_losses["loss_type"] / n_b,
                "loss_id": epoch_losses["loss_id"] / n_b,
                "lr": one_cycle_lr(step - 1, total_steps, train_config),
            }
        )
    net.eval()
    model = ExtractorModel(
        net=net,
        config=extractor_config,
        machine_type=roles.target_type,
        class_ids=class_ids,
        norm_stats=stats,
        dsp=dsp_config,
        loss=loss_config,
        train=train_config,
        mixup=mixup_config,
        seed=seed,
    )
    return model, history


def _config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def save_checkpoint(model: ExtractorModel, path) -> None:
    """Versioned binary: magic, JSON header, float64 LE parameter blocks.

    Parameters are stored in ``named_parameters`` order, which follows the
    module definition order and is recorded in the header.
    """
    params = list(model.net.named_parameters())
    header = {
        "format_version": 1,
        "machine_type": model.machine_type,
        "class_ids": model.class_ids,
        "norm_mean": model.norm_stats.mean,
        "norm_std": model.norm_stats.std,
        "seed": model.seed,
        "extractor": _config_to_dict(model.config),
        "dsp": _config_to_dict(model.dsp),
        "loss": _config_to_dict(model.loss),
        "train": _config_to_dict(model.train),
        "mixup": _config_to_dict(model.mixup),
        "params": [{"name": n, "shape": list(p.shape)} for n, p in params],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, p in params:
            fh.write(np.ascontiguousarray(p.detach().cpu().numpy(), dtype="<f8").tobytes())


def load_checkpoint(path) -> ExtractorModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ArtifactError(f"{path}: not an extractor checkpoint (bad magic)")
        (length,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(length).decode("utf-8"))
        if header.get("format_version") != 1:
            raise ArtifactError(f"{path}: unsupported checkpoint version")
        ext_dict = dict(header["extractor"])
        ext_dict["conv_stack"] = tuple(tuple(s) for s in ext_dict["conv_stack"])
        config = ExtractorConfig(**ext_dict)
        net = ExtractorNet(config, n_classes=len(header["class_ids"]))
        with torch.no_grad():
            for spec_entry, (name, param) in zip(header["params"], net.named_parameters()):
                if spec_entry["name"] != name or list(param.shape) != spec_entry["shape"]:
                    raise ArtifactError(f"{path}: parameter layout mismatch at {name!r}")
                count = int(np.prod(spec_entry["shape"])) if spec_entry["shape"] else 1
                raw = fh.read(8 * count)
                if len(raw) != 8 * count:
                    raise ArtifactError(f"{path}: truncated parameter block {name!r}")
                values = np.frombuffer(raw, dtype="<f8").reshape(spec_entry["shape"])
                param.copy_(torch.from_numpy(values.copy()).to(config.torch_dtype))
        if fh.read(1):
            raise ArtifactError(f"{path}: trailing bytes after parameter blocks")
    net.eval()
    return ExtractorModel(
        net=net,
        config=config,
        machine_type=header["machine_type"],
        class_ids=list(header["class_ids"]),
        norm_stats=NormStats(mean=header["norm_mean"], std=header["norm_std"]),
        dsp=DspConfig(**header["dsp"]),
        loss=LossConfig(**header["loss"]),
        train=TrainConfig(**header["train"]),
        mixup=MixupConfig(**header["mixup"]),
        seed=header["seed"],
    )


def checkpoint_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
