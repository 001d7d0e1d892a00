"""Experiment orchestration: full training runs, evaluation, sweeps, export.

Artifacts for one run live under an output directory, one subdirectory per
machine type holding the extractor checkpoint, detector files, and the role
manifest. Sweep commands retrain from scratch per grid point and emit
long-form CSV tables; every emitted file is reproducible bit for bit from
(config, seed, dataset).
"""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import math
import multiprocessing
import os
import warnings
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import gmm as gmm_mod
from .config import ExperimentConfig, dump_config
from .dataset import AudioClip, RoleAssignment, assign_roles
from .errors import ArtifactError, FileError, ValidationError
from .extractor import (
    ExtractorModel,
    checkpoint_sha256,
    load_checkpoint,
    save_checkpoint,
    train_extractor,
)
from .scoring import (
    ClipScore,
    EvalReport,
    MetricRow,
    aggregate,
    metric_row,
    rollup,
    write_metrics_csv,
    write_scores_csv,
)
from .seeding import substream_seed


def build_dataset(config: ExperimentConfig) -> list[AudioClip]:
    if config.dataset_source == "synth":
        return ds.synth_generate(config.synth)
    if config.dcase_root is None:
        raise FileError("dataset.source is 'dcase' but dataset.dcase_root is not set")
    return ds.load_dcase_layout(config.dcase_root)


def resolve_target_types(config: ExperimentConfig, dataset: list[AudioClip]) -> list[str]:
    present = sorted({c.key.machine_type for c in dataset})
    if config.target_types is None:
        return present
    missing = sorted(set(config.target_types) - set(present))
    if missing:
        raise ValidationError(f"target types not in dataset: {', '.join(missing)}")
    return sorted(config.target_types)


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _detector_filename(machine_id: int | None) -> str:
    return "detector_type.gmm" if machine_id is None else f"detector_id_{machine_id:02d}.gmm"


def train_one_type(
    config: ExperimentConfig,
    dataset: list[AudioClip],
    target_type: str,
    seed: int,
) -> tuple[ExtractorModel, dict[int | None, gmm_mod.GmmModel], RoleAssignment, list[dict]]:
    """Roles -> extractor training -> per-id detector fitting, in memory."""
    roles = assign_roles(
        dataset,
        target_type,
        n_real_anomalous=config.n_real_anomalous,
        n_contaminated=config.n_contaminated,
        seed=int(substream_seed(seed, "roles").generate_state(1)[0]),
    )
    loss_config = config.loss
    if not config.use_machine_ids:
        # Without id information the id loss has no target classes.
        loss_config = dataclasses.replace(loss_config, alpha=0.0)
    model, history = train_extractor(
        dataset,
        roles,
        dsp_config=config.dsp,
        extractor_config=config.extractor,
        loss_config=loss_config,
        train_config=config.train,
        mixup_config=config.mixup,
        seed=seed,
    )
    fit_config = dataclasses.replace(
        config.gmm, seed=int(substream_seed(seed, "gmm").generate_state(1)[0])
    )
    detectors = gmm_mod.train_detectors(
        model,
        dataset,
        roles,
        k=config.gmm_k,
        config=fit_config,
        per_machine_id=config.use_machine_ids,
    )
    return model, detectors, roles, history


def run_train(
    config: ExperimentConfig,
    out_dir: str | Path,
    seed: int | None = None,
    target_types: list[str] | None = None,
    dataset: list[AudioClip] | None = None,
) -> dict:
    """Train artifacts for every target type and write them under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = config.root_seed() if seed is None else seed
    if dataset is None:
        dataset = build_dataset(config)
    types = target_types or resolve_target_types(config, dataset)

    _atomic_write_text(out / "config.txt", dump_config(config) + f"# root seed: {seed}\n")
    summary = {"types": {}, "seed": seed}
    for mtype in types:
        model, detectors, roles, history = train_one_type(config, dataset, mtype, seed)
        type_dir = out / mtype
        type_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = type_dir / "extractor.ckpt"
        save_checkpoint(model, ckpt_path)
        sha = checkpoint_sha256(ckpt_path)
        detector_files = []
        for machine_id, detector in detectors.items():
            det_path = type_dir / _detector_filename(machine_id)
            gmm_mod.save_detector(detector, det_path, mtype, machine_id, sha)
            detector_files.append(det_path.name)
        ds.write_manifest(type_dir / "manifest.jsonl", dataset, roles)
        history_lines = ["epoch,loss,loss_type,loss_id,lr"] + [
            f"{h['epoch']},{h['loss']!r},{h['loss_type']!r},{h['loss_id']!r},{h['lr']!r}"
            for h in history
        ]
        _atomic_write_text(type_dir / "train_history.csv", "\n".join(history_lines) + "\n")
        summary["types"][mtype] = {
            "checkpoint": str(ckpt_path),
            "detectors": sorted(detector_files),
            "final_loss": history[-1]["loss"],
        }
    return summary


def load_artifacts(
    artifacts_dir: str | Path, target_type: str
) -> tuple[ExtractorModel, dict[int | None, gmm_mod.GmmModel], set[str]]:
    """Load the checkpoint, detectors, and eval exclusions for one type.

    Raises if any detector was fit against a different checkpoint than the
    one on disk.
    """
    type_dir = Path(artifacts_dir) / target_type
    ckpt_path = type_dir / "extractor.ckpt"
    if not ckpt_path.is_file():
        raise ArtifactError(f"missing checkpoint {ckpt_path}")
    model = load_checkpoint(ckpt_path)
    sha = checkpoint_sha256(ckpt_path)
    detectors: dict[int | None, gmm_mod.GmmModel] = {}
    for det_path in sorted(type_dir.glob("detector_*.gmm")):
        detector, meta = gmm_mod.load_detector(det_path)
        if meta["extractor_sha256"] != sha:
            raise ArtifactError(
                f"{det_path}: detector was fit against a different extractor checkpoint"
            )
        detectors[meta["machine_id"]] = detector
    if not detectors:
        raise ArtifactError(f"no detector files under {type_dir}")
    excluded: set[str] = set()
    manifest_path = type_dir / "manifest.jsonl"
    if manifest_path.is_file():
        for record in ds.read_manifest(manifest_path):
            if record["role"] in ("real_anomalous", "contaminated"):
                excluded.add(record["clip_id"])
    return model, detectors, excluded


def evaluate_type(
    dataset: list[AudioClip],
    target_type: str,
    model: ExtractorModel,
    detectors: dict[int | None, gmm_mod.GmmModel],
    excluded: set[str] | None = None,
) -> tuple[list[ClipScore], list[MetricRow]]:
    """Score every eligible test clip of the type and compute per-id metrics."""
    excluded = excluded or set()
    test_clips = [
        c
        for c in dataset
        if c.key.machine_type == target_type
        and c.split == ds.SPLIT_TEST
        and c.clip_id not in excluded
    ]
    if not test_clips:
        raise ValidationError(f"no evaluation clips for machine type {target_type!r}")

    clip_scores: list[ClipScore] = []
    for clip, feats in gmm_mod.iter_clip_features(model, test_clips):
        detector = detectors.get(clip.key.machine_id, detectors.get(None))
        if detector is None:
            raise ArtifactError(
                f"no detector for machine id {clip.key.machine_id} of {target_type!r}"
            )
        scores = [float(s) for s in gmm_mod.nll_batch(detector, feats)]
        clip_scores.append(
            ClipScore(
                clip_id=clip.clip_id,
                machine_type=target_type,
                machine_id=clip.key.machine_id,
                truth=clip.condition,
                chunk_scores=scores,
                aggregated=aggregate(scores),
            )
        )

    rows: list[MetricRow] = []
    for machine_id in sorted({c.machine_id for c in clip_scores}):
        group = [c for c in clip_scores if c.machine_id == machine_id]
        labels = [1 if c.truth == ds.CONDITION_ANOMALOUS else 0 for c in group]
        scores = [c.aggregated for c in group]
        if len(set(labels)) < 2:
            # training draws can exhaust an id's test anomalies
            warnings.warn(
                f"{target_type} id {machine_id}: single-class evaluation set, skipping metrics"
            )
            continue
        rows.append(metric_row(target_type, machine_id, scores, labels))
    if not rows:
        raise ValidationError(f"no machine id of {target_type!r} has a two-class evaluation set")
    return clip_scores, rows


def run_eval(
    config: ExperimentConfig,
    artifacts_dir: str | Path,
    out_dir: str | Path | None = None,
    target_types: list[str] | None = None,
    dataset: list[AudioClip] | None = None,
) -> EvalReport:
    """Evaluate stored artifacts on the test split; write scores/metrics CSVs."""
    if dataset is None:
        dataset = build_dataset(config)
    types = target_types or resolve_target_types(config, dataset)
    all_scores: list[ClipScore] = []
    all_rows: list[MetricRow] = []
    for mtype in types:
        model, detectors, excluded = load_artifacts(artifacts_dir, mtype)
        clip_scores, rows = evaluate_type(dataset, mtype, model, detectors, excluded)
        all_scores.extend(clip_scores)
        all_rows.extend(rows)
    report = EvalReport(clip_scores=all_scores, metrics=all_rows, rollups=rollup(all_rows))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_scores_csv(out / "scores.csv", report.clip_scores)
        write_metrics_csv(out / "metrics.csv", report.metrics, report.rollups)
    return report


def run_point(
    config: ExperimentConfig,
    dataset: list[AudioClip],
    target_type: str,
    seed: int,
) -> dict:
    """One in-memory train+eval for a sweep grid point; returns its row."""
    model, detectors, roles, _ = train_one_type(config, dataset, target_type, seed)
    _, rows = evaluate_type(dataset, target_type, model, detectors, roles.excluded_from_eval())
    ru = rollup(rows)[target_type]
    return {
        "machine_type": target_type,
        "seed": seed,
        "aauc": ru.aauc_mean,
        "mauc": ru.auc_min,
    }


def _sweep_job(args) -> list[dict]:
    config_text, field_name, count, seed = args
    from .config import build_config, parse_config_text

    config = build_config(parse_config_text(config_text))
    config = dataclasses.replace(config, **{field_name: count})
    dataset = build_dataset(config)
    rows = []
    for mtype in resolve_target_types(config, dataset):
        row = run_point(config, dataset, mtype, seed)
        row["count"] = count
        rows.append(row)
    return rows


def _run_sweep(
    config: ExperimentConfig,
    counts: list[int],
    field_name: str,
    out_path: Path,
    jobs: int = 1,
) -> list[dict]:
    if not counts:
        raise ValidationError("sweep grid is empty")
    config_text = dump_config(config)
    tasks = [(config_text, field_name, count, seed) for count in counts for seed in config.seeds]
    results: list[dict] = []
    if jobs > 1:
        # spawn, not fork: forked children inherit the parent's BLAS/torch
        # thread state and can deadlock
        ctx = multiprocessing.get_context("spawn")
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            for rows in pool.map(_sweep_job, tasks):
                results.extend(rows)
    else:
        for task in tasks:
            results.extend(_sweep_job(task))
    results.sort(key=lambda r: (r["count"], r["seed"], r["machine_type"]))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["count,seed,machine_type,aauc,mauc"]
    lines += [
        f"{r['count']},{r['seed']},{r['machine_type']},{r['aauc']!r},{r['mauc']!r}"
        for r in results
    ]
    _atomic_write_text(out_path, "\n".join(lines) + "\n")
    return results


def sweep_anomalous(config: ExperimentConfig, out_dir: str | Path, jobs: int = 1) -> list[dict]:
    """Retrain per (real-anomalous count, seed) and tabulate aAUC/mAUC."""
    return _run_sweep(
        config,
        config.anomalous_counts,
        "n_real_anomalous",
        Path(out_dir) / "sweep_anomalous.csv",
        jobs,
    )


def sweep_contamination(config: ExperimentConfig, out_dir: str | Path, jobs: int = 1) -> list[dict]:
    """Retrain per (contamination count, seed) and tabulate aAUC/mAUC."""
    return _run_sweep(
        config,
        config.contamination_counts,
        "n_contaminated",
        Path(out_dir) / "sweep_contamination.csv",
        jobs,
    )


def contamination_trend_note(results: list[dict]) -> str:
    """Soft diagnostic: does mean aAUC degrade as contamination grows?"""
    by_count: dict[int, list[float]] = {}
    for r in results:
        by_count.setdefault(r["count"], []).append(r["aauc"])
    counts = sorted(by_count)
    means = [float(np.mean(by_count[c])) for c in counts]
    degrading = all(b <= a + 1e-9 for a, b in zip(means, means[1:]))
    path = " -> ".join(f"{c}:{m:.4f}" for c, m in zip(counts, means))
    if degrading:
        return f"trend: mean aAUC degrades monotonically with contamination ({path})"
    return f"note: mean aAUC is not monotone in contamination ({path})"


def summarize_sweep(results: list[dict]) -> str:
    """mean +/- standard error of aAUC and mAUC per (count, machine type)."""
    keys = sorted({(r["count"], r["machine_type"]) for r in results})
    lines = [f"{'count':>6} {'machine_type':>14} {'aauc':>16} {'mauc':>16}"]
    for count, mtype in keys:
        group = [r for r in results if r["count"] == count and r["machine_type"] == mtype]
        lines.append(
            f"{count:>6} {mtype:>14} "
            f"{_mean_stderr([r['aauc'] for r in group]):>16} "
            f"{_mean_stderr([r['mauc'] for r in group]):>16}"
        )
    return "\n".join(lines)


def _mean_stderr(values: list[float]) -> str:
    mean = float(np.mean(values))
    if len(values) < 2:
        return f"{mean:.4f}"
    stderr = float(np.std(values, ddof=1) / math.sqrt(len(values)))
    return f"{mean:.4f}±{stderr:.4f}"


def export_embeddings(
    config: ExperimentConfig,
    artifacts_dir: str | Path,
    out_path: str | Path,
    split: str = "test",
    target_types: list[str] | None = None,
    dataset: list[AudioClip] | None = None,
) -> int:
    """Write one CSV row per (clip, chunk) with the embedding coordinates."""
    if split not in ("train", "test", "all"):
        raise ValidationError(f"split must be train, test, or all, got {split!r}")
    if dataset is None:
        dataset = build_dataset(config)
    types = target_types or resolve_target_types(config, dataset)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    n_rows = 0
    header_written = False
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for mtype in types:
            model, _, _ = load_artifacts(artifacts_dir, mtype)
            if not header_written:
                dims = [f"e_{i + 1}" for i in range(model.config.embed_dim)]
                writer.writerow(["clip_id", "chunk_index", "truth", "machine_id"] + dims)
                header_written = True
            clips = [
                c
                for c in dataset
                if c.key.machine_type == mtype and (split == "all" or c.split == split)
            ]
            for clip, feats in gmm_mod.iter_clip_features(model, clips):
                for idx, row in enumerate(feats):
                    writer.writerow(
                        [clip.clip_id, idx, clip.condition, clip.key.machine_id]
                        + [repr(float(v)) for v in row]
                    )
                    n_rows += 1
    return n_rows
