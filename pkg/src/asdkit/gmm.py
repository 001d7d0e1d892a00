"""Per-machine Gaussian-mixture anomaly detectors.

Full-covariance mixtures are fit by EM from a k-means initialization with
restarts; scoring is the negative log-likelihood via Cholesky factors and
log-sum-exp. One detector is fit per machine id (or per machine type when
id information is withheld) on the embeddings of every half-overlapping
chunk of the believed-normal training clips.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.special import logsumexp

from .dataset import AudioClip, RoleAssignment
from .dsp import apply_norm, chunk_windows, logmel, overlap_chunks
from .errors import (
    ArtifactError,
    ConfigurationError,
    IllConditioningError,
    NumericFault,
    ValidationError,
)

DETECTOR_MAGIC = b"ASDGMM01"

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GmmFitConfig:
    max_iters: int = 200
    rel_tol: float = 1e-6  # on the mean log-likelihood between iterations
    reg_scale: float = 1e-6  # epsilon = reg_scale * mean covariance diagonal
    n_init: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1")
        if self.reg_scale <= 0:
            raise ConfigurationError("reg_scale must be > 0")
        if self.n_init < 1:
            raise ConfigurationError("n_init must be >= 1")


@dataclass
class GmmModel:
    """Weights, means, and full covariances with cached Cholesky factors."""

    weights: np.ndarray  # [K]
    means: np.ndarray  # [K, D]
    covariances: np.ndarray  # [K, D, D]
    chol: np.ndarray = field(init=False, repr=False)  # lower factors, [K, D, D]
    half_log_dets: np.ndarray = field(init=False, repr=False)  # [K]
    fit_log_likelihoods: list[float] | None = None  # mean LL per EM iteration

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ValidationError("mixture weights must sum to 1")
        k, d = self.means.shape
        chols = np.empty((k, d, d))
        for j in range(k):
            try:
                chols[j] = cholesky(self.covariances[j], lower=True)
            except np.linalg.LinAlgError as exc:
                raise NumericFault(f"covariance of component {j} is not positive definite") from exc
        self.chol = chols
        self.half_log_dets = np.array(
            [float(np.sum(np.log(np.diag(chols[j])))) for j in range(k)]
        )

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def _component_log_densities(model: GmmModel, x: np.ndarray) -> np.ndarray:
    """Per-point, per-component Gaussian log densities, [N, K]."""
    n, d = x.shape
    out = np.empty((n, model.k))
    for j in range(model.k):
        diff = (x - model.means[j]).T
        z = solve_triangular(model.chol[j], diff, lower=True)
        quad = np.sum(z**2, axis=0)
        out[:, j] = -0.5 * (d * _LOG_2PI + quad) - model.half_log_dets[j]
    return out


def log_likelihoods(model: GmmModel, x: np.ndarray) -> np.ndarray:
    """Mixture log density per point, [N]."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    log_dens = _component_log_densities(model, x)
    with np.errstate(divide="ignore"):
        log_weights = np.log(model.weights)
    return logsumexp(log_dens + log_weights[None, :], axis=1)


def nll(model: GmmModel, feature: np.ndarray) -> float:
    """Anomaly score of one D-vector: negative mixture log-likelihood."""
    feature = np.asarray(feature, dtype=np.float64)
    if not np.all(np.isfinite(feature)):
        raise ValidationError("feature vector contains non-finite values")
    return float(-log_likelihoods(model, feature[None, :])[0])


def nll_batch(model: GmmModel, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise ValidationError("feature matrix contains non-finite values")
    return -log_likelihoods(model, features)


def _kmeans(x: np.ndarray, k: int, rng: np.random.Generator, iters: int = 10) -> np.ndarray:
    """k-means++ seeding plus a few Lloyd rounds; returns [K, D] centers."""
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[int(rng.integers(0, n))]
    closest = np.full(n, np.inf)
    for j in range(1, k):
        closest = np.minimum(closest, np.sum((x - centers[j - 1]) ** 2, axis=1))
        total = float(closest.sum())
        if total <= 0:
            centers[j] = x[int(rng.integers(0, n))]
            continue
        r = rng.uniform(0, total)
        centers[j] = x[int(np.searchsorted(np.cumsum(closest), r))]
    for _ in range(iters):
        d2 = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        assign = np.argmin(d2, axis=1)
        for j in range(k):
            members = x[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                centers[j] = x[int(np.argmax(np.min(d2, axis=1)))]
    return centers


def _regularized_cov(diffs: np.ndarray, resp: np.ndarray | None, reg_scale: float) -> np.ndarray:
    """Biased (soft-count) covariance plus epsilon * I on the diagonal."""
    if resp is None:
        cov = diffs.T @ diffs / len(diffs)
    else:
        total = float(resp.sum())
        cov = (diffs * resp[:, None]).T @ diffs / total
    cov = 0.5 * (cov + cov.T)
    eps = reg_scale * float(np.mean(np.diag(cov)))
    eps = max(eps, 1e-12)
    cov[np.diag_indices_from(cov)] += eps
    return cov


def _em_once(
    x: np.ndarray, k: int, config: GmmFitConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[float]]:
    n, d = x.shape
    centers = _kmeans(x, k, rng)
    d2 = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    assign = np.argmin(d2, axis=1)
    weights = np.empty(k)
    means = np.empty((k, d))
    covs = np.empty((k, d, d))
    global_cov = _regularized_cov(x - x.mean(axis=0), None, config.reg_scale)
    for j in range(k):
        members = x[assign == j]
        if len(members) >= 2:
            means[j] = members.mean(axis=0)
            covs[j] = _regularized_cov(members - means[j], None, config.reg_scale)
        else:
            means[j] = centers[j]
            covs[j] = global_cov
        weights[j] = max(len(members), 1) / n
    weights = weights / weights.sum()

    history: list[float] = []
    prev_params = None
    for _ in range(config.max_iters):
        model = GmmModel(weights=weights, means=means, covariances=covs)
        log_dens = _component_log_densities(model, x) + np.log(weights)[None, :]
        point_ll = logsumexp(log_dens, axis=1)
        mean_ll = float(point_ll.mean())
        if history and mean_ll < history[-1] - 1e-12:
            # Regularization can nudge the likelihood down near a fixed
            # point; keep the previous (better) parameters and stop.
            weights, means, covs = prev_params
            break
        history.append(mean_ll)
        if len(history) >= 2:
            delta = abs(history[-1] - history[-2])
            if delta <= config.rel_tol * max(1.0, abs(history[-2])):
                break
        prev_params = (weights.copy(), means.copy(), covs.copy())

        resp = np.exp(log_dens - point_ll[:, None])
        counts = resp.sum(axis=0)
        new_weights = counts / n
        for j in range(k):
            if counts[j] <= 0:
                continue  # dead component: keep its previous parameters
            mu = resp[:, j] @ x / counts[j]
            means[j] = mu
            covs[j] = _regularized_cov(x - mu, resp[:, j], config.reg_scale)
        dead = counts <= 0
        new_weights[dead] = weights[dead]
        weights = new_weights / new_weights.sum()
    return weights, means, covs, history


def fit(features: np.ndarray, k: int, config: GmmFitConfig | None = None) -> GmmModel:
    """Fit a K-component full-covariance mixture by EM, best of n_init restarts.

    Requires more points than feature dimensions. The returned model carries
    the winning restart's per-iteration mean log-likelihood history.
    """
    config = config or GmmFitConfig()
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"features must be a 2-D matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("features contain non-finite values")
    n, d = x.shape
    if n <= d:
        raise IllConditioningError(
            f"need more points than dimensions for a full covariance fit: {n} points, {d} dims"
        )
    if k < 1:
        raise ConfigurationError("k must be >= 1")

    best: tuple[float, GmmModel] | None = None
    for restart in range(config.n_init):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, restart]))
        weights, means, covs, history = _em_once(x, k, config, rng)
        model = GmmModel(weights=weights, means=means, covariances=covs)
        model.fit_log_likelihoods = history
        final = history[-1]
        if best is None or final > best[0]:
            best = (final, model)
    return best[1]


def train_detectors(
    model,
    dataset: list[AudioClip],
    roles: RoleAssignment,
    k: int = 2,
    config: GmmFitConfig | None = None,
    per_machine_id: bool = True,
) -> dict[int | None, GmmModel]:
    """Fit one detector per machine id of the target type (or one per type).

    Every believed-normal training clip is expanded into its half-overlap
    chunk plan, embedded, and pooled into that id's training matrix.
    Returns a mapping machine_id -> detector; the type-level detector uses
    key ``None``.
    """
    config = config or GmmFitConfig()
    clips_by_id = {c.clip_id: c for c in dataset}
    pool = [clips_by_id[cid] for cid in roles.training_normal_ids()]

    groups: dict[int | None, list[AudioClip]] = {}
    if per_machine_id:
        for clip in pool:
            groups.setdefault(clip.key.machine_id, []).append(clip)
    else:
        groups[None] = pool

    detectors: dict[int | None, GmmModel] = {}
    for key in sorted(groups, key=lambda v: (v is None, v)):
        clips = groups[key]
        if not clips:
            warnings.warn(f"machine id {key!r}: no normal clips, skipping detector")
            continue
        features = embed_clip_chunks(model, clips)
        fit_seed = np.random.SeedSequence([config.seed, 0 if key is None else key + 1])
        per_key_config = GmmFitConfig(
            max_iters=config.max_iters,
            rel_tol=config.rel_tol,
            reg_scale=config.reg_scale,
            n_init=config.n_init,
            seed=int(fit_seed.generate_state(1)[0]),
        )
        detectors[key] = fit(features, k, per_key_config)
    return detectors


def iter_clip_features(model, clips: list[AudioClip], clips_per_batch: int = 32):
    """Yield (clip, [M x D] embeddings) pairs: normalize, plan half-overlap
    chunks, log-mel, embed. Clips are processed in bounded groups so chunk
    spectrograms never pile up in memory."""
    for start in range(0, len(clips), clips_per_batch):
        group = clips[start : start + clips_per_batch]
        chunks = []
        counts = []
        for clip in group:
            normalized = apply_norm(clip, model.norm_stats)
            plan = overlap_chunks(normalized, model.dsp.chunk_seconds)
            n = 0
            for _, _, window in chunk_windows(normalized, plan, model.dsp.chunk_seconds):
                chunks.append(logmel(window, clip.sample_rate, model.dsp).astype(np.float32))
                n += 1
            counts.append(n)
        features = model.embed(np.stack(chunks))
        cursor = 0
        for clip, n in zip(group, counts):
            yield clip, features[cursor : cursor + n]
            cursor += n


def embed_clip_chunks(model, clips: list[AudioClip]) -> np.ndarray:
    """All half-overlap chunk embeddings of the clips, stacked [sum(M) x D]."""
    return np.concatenate([f for _, f in iter_clip_features(model, clips)], axis=0)


def save_detector(
    detector: GmmModel,
    path,
    machine_type: str,
    machine_id: int | None,
    extractor_sha256: str,
) -> None:
    """Versioned binary: magic, JSON metadata, float64 LE parameter blocks."""
    header = {
        "format_version": 1,
        "machine_type": machine_type,
        "machine_id": machine_id,
        "k": detector.k,
        "d": detector.dim,
        "extractor_sha256": extractor_sha256,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DETECTOR_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(detector.weights, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(detector.means, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(detector.covariances, dtype="<f8").tobytes())


def load_detector(path) -> tuple[GmmModel, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(DETECTOR_MAGIC))
        if magic != DETECTOR_MAGIC:
            raise ArtifactError(f"{path}: not a detector file (bad magic)")
        (length,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(length).decode("utf-8"))
        if header.get("format_version") != 1:
            raise ArtifactError(f"{path}: unsupported detector version")
        k, d = header["k"], header["d"]
        need = 8 * (k + k * d + k * d * d)
        raw = fh.read(need)
        if len(raw) != need or fh.read(1):
            raise ArtifactError(f"{path}: detector parameter blocks are the wrong size")
    weights = np.frombuffer(raw[: 8 * k], dtype="<f8").copy()
    means = np.frombuffer(raw[8 * k : 8 * (k + k * d)], dtype="<f8").reshape(k, d).copy()
    covs = np.frombuffer(raw[8 * (k + k * d) :], dtype="<f8").reshape(k, d, d).copy()
    return GmmModel(weights=weights, means=means, covariances=covs), header


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
