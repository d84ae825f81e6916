"""Ablation sweeps: label efficiency, pretext class count and augmentation toggles.

Each sweep returns long-form rows ``(sweep, case, stage, class, accuracy, auc)``
suitable for plotting accuracy and AUC per case and class; ``write_rows``
stores them as CSV.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .arrangements import generate_arrangement_set
from .datakit import ClipVolume, DatasetManifest, ManifestEntry, subset_for_label_efficiency
from .evalkit import LABELS, UndefinedMetricError, accuracy_score, auc_score
from .framekit import AugmentationSpec
from .skidnet import DownstreamConfig, SkidConfig, SkidEncoder, build_pretext_model
from .trainkit import DownstreamTrainConfig, PretextTrainConfig, clip_predictions, train_downstream, train_pretext

FIELDS = ("sweep", "case", "stage", "class", "accuracy", "auc")

AUGMENTATION_CASES: dict[str, AugmentationSpec] = {
    "all": AugmentationSpec(),
    "no_shift": AugmentationSpec().without("shift"),
    "no_rotate": AugmentationSpec().without("rotate"),
    "no_scale": AugmentationSpec().without("scale"),
    "no_noise": AugmentationSpec().without("noise"),
    "none": AugmentationSpec.disabled(),
}


@dataclass
class SweepSettings:
    """Model and training settings shared by every case of a sweep."""

    skid: SkidConfig = field(default_factory=lambda: SkidConfig.miniature(8))
    pretext: PretextTrainConfig = field(default_factory=PretextTrainConfig)
    downstream: DownstreamTrainConfig = field(default_factory=DownstreamTrainConfig)
    head: DownstreamConfig = field(default_factory=DownstreamConfig)
    seed: int = 0


def subset_clips(clips: Sequence[ClipVolume], fraction: float, seed: int = 0) -> list[ClipVolume]:
    """Stratified label-efficiency subset of in-memory clips."""
    by_id = {c.clip_id: c for c in clips}
    if len(by_id) != len(clips):
        raise ValueError("clip ids must be unique")
    manifest = DatasetManifest(
        "train", clips[0].plane if clips else "", "mrnet3",
        [ManifestEntry(c.clip_id, Path(), tuple(c.labels)) for c in clips],
    )
    return [by_id[e.clip_id] for e in subset_for_label_efficiency(manifest, fraction, seed).entries]


def downstream_rows(model, valid_clips: Sequence[ClipVolume], sweep: str, case: str, repeats: int = 8, seed: int = 0) -> list[dict]:
    y = np.array([c.labels for c in valid_clips])
    p = clip_predictions(model, valid_clips, repeats, seed)
    rows = []
    for j, name in enumerate(LABELS[: y.shape[1]]):
        try:
            auc = auc_score(y[:, j], p[:, j])
        except UndefinedMetricError:
            auc = math.nan
        rows.append(dict(sweep=sweep, case=case, stage="downstream", **{"class": name},
                         accuracy=accuracy_score(y[:, j], p[:, j]), auc=auc))
    rows.append(dict(sweep=sweep, case=case, stage="downstream", **{"class": "average"},
                     accuracy=float(np.mean([r["accuracy"] for r in rows])),
                     auc=float(np.nanmean([r["auc"] for r in rows])) if any(not math.isnan(r["auc"]) for r in rows) else math.nan))
    return rows


def _pretext_then_downstream(
    train_clips, valid_clips, settings: SweepSettings, k: int, augment: AugmentationSpec,
    sweep: str, case: str, out_dir: Path | None,
) -> list[dict]:
    aset = generate_arrangement_set(settings.skid.n_patches, k, settings.seed)
    model = build_pretext_model(replace(settings.skid, n_classes=k), seed=settings.seed)
    pcfg = replace(settings.pretext, augment=augment)
    case_dir = out_dir / case if out_dir is not None else None
    model, plog = train_pretext(train_clips, aset, model, pcfg, valid_clips, case_dir)
    best = max((r["val_acc"] for r in plog.rows if "val_acc" in r), default=math.nan)
    rows = [dict(sweep=sweep, case=case, stage="pretext", **{"class": "arrangement"}, accuracy=best, auc=math.nan)]
    # downstream inputs stay unaugmented so only the representation differs
    dcfg = replace(settings.downstream, augment=None)
    dmodel, _ = train_downstream(train_clips, model.encoder, dcfg, settings.head, None, case_dir)
    rows += downstream_rows(dmodel, valid_clips, sweep, case, dcfg.eval_repeats, settings.seed)
    return rows


def label_efficiency_sweep(
    train_clips: Sequence[ClipVolume],
    valid_clips: Sequence[ClipVolume],
    encoder: SkidEncoder,
    settings: SweepSettings = SweepSettings(),
    fractions: Sequence[float] = (0.1, 0.5, 1.0),
    out_dir: str | os.PathLike | None = None,
) -> list[dict]:
    """Downstream head trained on stratified fractions of the training clips."""
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for frac in fractions:
        case = f"{round(frac * 100)}%"
        subset = subset_clips(train_clips, frac, settings.seed)
        model, _ = train_downstream(subset, encoder, settings.downstream, settings.head, None,
                                    out / f"frac_{round(frac * 100)}" if out else None)
        rows += downstream_rows(model, valid_clips, "label_efficiency", case, settings.downstream.eval_repeats, settings.seed)
    return rows


def class_count_sweep(
    train_clips: Sequence[ClipVolume],
    valid_clips: Sequence[ClipVolume],
    settings: SweepSettings = SweepSettings(),
    ks: Sequence[int] = (500, 1000),
    out_dir: str | os.PathLike | None = None,
) -> list[dict]:
    """Pretext models with K arrangement classes, each followed by a downstream head."""
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for k in ks:
        rows += _pretext_then_downstream(train_clips, valid_clips, settings, k, settings.pretext.augment,
                                         "class_count", f"K={k}", out)
    return rows


def augmentation_sweep(
    train_clips: Sequence[ClipVolume],
    valid_clips: Sequence[ClipVolume],
    settings: SweepSettings = SweepSettings(),
    cases: dict[str, AugmentationSpec] | None = None,
    k: int = 1000,
    out_dir: str | os.PathLike | None = None,
) -> list[dict]:
    """Pretext models trained with individual augmentations switched off."""
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for name, spec in (cases or AUGMENTATION_CASES).items():
        rows += _pretext_then_downstream(train_clips, valid_clips, settings, k, spec, "augmentation", name, out)
    return rows


def write_rows(rows: Sequence[dict], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in FIELDS})
    return path


def read_rows(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != FIELDS:
            raise ValueError(f"{path}: expected header {','.join(FIELDS)}")
        return [dict(r, accuracy=float(r["accuracy"]), auc=float(r["auc"])) for r in reader]
