"""Evaluation: frame sampling, repeated prediction, plane ensembling, metrics."""
from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

LABELS = ("abn", "acl", "men")
PLANE_ORDER = ("sagittal", "coronal", "axial")
CSV_FIELDS = ("clip_id", "plane", "p_abn", "p_acl", "p_men", "y_abn", "y_acl", "y_men")


class UndefinedMetricError(ValueError):
    """Metric is undefined on the given data (e.g. AUC with one class)."""


@dataclass
class PredictionRecord:
    clip_id: str
    plane: str
    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not np.all(np.isfinite(self.probs)) or self.probs.min() < 0 or self.probs.max() > 1:
            raise ValueError(f"{self.clip_id}: probabilities must be finite and in [0, 1]")


def save_records(records: Iterable[PredictionRecord], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([r.clip_id, r.plane, *(repr(float(p)) for p in r.probs), *(int(y) for y in r.labels)])


def load_records(path: str | os.PathLike) -> list[PredictionRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"{path}: expected header {','.join(CSV_FIELDS)}")
        return [
            PredictionRecord(
                row["clip_id"], row["plane"],
                [float(row[f"p_{k}"]) for k in LABELS],
                [int(row[f"y_{k}"]) for k in LABELS],
            )
            for row in reader
        ]


# -- frame sampling ------------------------------------------------------


def eval_frame_draws(n_frames: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Raw Normal(N_F/2, N_F/4) positions before rounding and clipping."""
    return rng.normal(n_frames / 2, n_frames / 4, size=count)


def sample_eval_frames(n_frames: int, count: int = 16, rng: np.random.Generator | None = None) -> np.ndarray:
    if n_frames < 1:
        raise ValueError("clip has no frames")
    rng = np.random.default_rng() if rng is None else rng
    idx = np.rint(eval_frame_draws(n_frames, count, rng)).astype(np.int64)
    return np.sort(np.clip(idx, 0, n_frames - 1))


def predict_clip(model, frames, repeats: int = 8, count: int = 16, rng: np.random.Generator | None = None) -> np.ndarray:
    """Average of ``repeats`` forward passes over normally sampled frame subsets.

    ``model`` maps a (1, count, L, L) tensor to (1, n_labels) probabilities.
    """
    import torch

    rng = np.random.default_rng() if rng is None else rng
    frames = np.asarray(frames, dtype=np.float32)
    preds = []
    with torch.no_grad():
        for _ in range(repeats):
            idx = sample_eval_frames(len(frames), count, rng)
            out = model(torch.from_numpy(frames[idx][None]))
            preds.append(np.asarray(out, dtype=np.float64).reshape(-1))
    preds = np.stack(preds)
    # mean of offsets from the first pass: exact when every pass agrees
    return preds[0] + (preds - preds[0]).mean(axis=0)


# -- ensembling ------------------------------------------------------------


@dataclass
class EnsembleWeights:
    w: np.ndarray  # (n_classes, n_classifiers), rows sum to 1
    planes: tuple[str, ...] = PLANE_ORDER
    raw: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)


def compute_weights(val_accuracy, planes: Sequence[str] = PLANE_ORDER) -> EnsembleWeights:
    """Per-class log-odds voting weights from validation accuracies.

    ``val_accuracy[j, i]`` is classifier i's accuracy on class j.  Negative
    log-odds (accuracy below 0.5) are clamped to 0 with a warning; a class
    whose every weight clamps falls back to uniform weights.
    """
    p = np.asarray(val_accuracy, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != len(planes):
        raise ValueError(f"expected (classes, {len(planes)}) accuracies, got {p.shape}")
    if np.any(p <= 0) or np.any(p >= 1):
        raise ValueError("accuracies must lie strictly inside (0, 1)")
    raw = np.log(p / (1 - p))
    notes = []
    clamped = np.maximum(raw, 0.0)
    for j, i in zip(*np.nonzero(raw < 0)):
        notes.append(f"class {j}, {planes[i]}: accuracy {p[j, i]:.4f} < 0.5, weight clamped to 0")
    sums = clamped.sum(axis=1, keepdims=True)
    w = np.empty_like(clamped)
    for j in range(len(w)):
        if sums[j, 0] > 0:
            w[j] = clamped[j] / sums[j, 0]
        else:
            notes.append(f"class {j}: no classifier beats chance, using uniform weights")
            w[j] = 1.0 / w.shape[1]
    for msg in notes:
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return EnsembleWeights(w, tuple(planes), raw, notes)


def ensemble_predict(probs: Mapping[str, Sequence[float]], weights: EnsembleWeights) -> tuple[np.ndarray, np.ndarray]:
    """Weighted vote for one clip: returns (bits, scores), bit = score >= 0.5."""
    missing = [pl for pl in weights.planes if pl not in probs]
    if missing:
        raise ValueError(f"missing prediction for plane(s): {', '.join(missing)}")
    h = np.stack([np.asarray(probs[pl], dtype=np.float64) for pl in weights.planes], axis=1)
    scores = (weights.w * h).sum(axis=1)
    return (scores >= 0.5).astype(np.int64), scores


def ensemble_records(per_plane: Mapping[str, Sequence[PredictionRecord]], weights: EnsembleWeights) -> list[PredictionRecord]:
    """Join per-plane record lists on clip_id and ensemble each clip."""
    by_plane = {pl: {r.clip_id: r for r in recs} for pl, recs in per_plane.items()}
    anchor = weights.planes[0]
    if anchor not in by_plane:
        raise ValueError(f"missing prediction for plane(s): {anchor}")
    out = []
    for clip_id, ref in by_plane[anchor].items():
        probs = {}
        for pl in weights.planes:
            rec = by_plane.get(pl, {}).get(clip_id)
            if rec is not None:
                probs[pl] = rec.probs
        bits, scores = ensemble_predict(probs, weights)
        out.append(PredictionRecord(clip_id, "ensemble", np.clip(scores, 0, 1), ref.labels))
    return out


def plane_accuracies(per_plane: Mapping[str, Sequence[PredictionRecord]], planes: Sequence[str] = PLANE_ORDER) -> np.ndarray:
    """(classes, planes) accuracy matrix at threshold 0.5."""
    cols = []
    for pl in planes:
        recs = per_plane[pl]
        y = np.stack([r.labels for r in recs])
        p = np.stack([r.probs for r in recs])
        cols.append(((p >= 0.5) == (y == 1)).mean(axis=0))
    return np.stack(cols, axis=1)


# -- metrics ---------------------------------------------------------------


def auc_score(y_true, y_score) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(y_score, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def accuracy_score(y_true, y_score, threshold: float = 0.5) -> float:
    y = np.asarray(y_true).astype(bool)
    return float(((np.asarray(y_score) >= threshold) == y).mean())


def sensitivity_score(y_true, y_score, threshold: float = 0.5) -> float:
    y = np.asarray(y_true).astype(bool)
    if not y.any():
        raise UndefinedMetricError("sensitivity needs at least one positive")
    return float((np.asarray(y_score)[y] >= threshold).mean())


def specificity_score(y_true, y_score, threshold: float = 0.5) -> float:
    y = np.asarray(y_true).astype(bool)
    if y.all():
        raise UndefinedMetricError("specificity needs at least one negative")
    return float((np.asarray(y_score)[~y] < threshold).mean())


METRICS: dict[str, Callable] = {
    "accuracy": accuracy_score,
    "sensitivity": sensitivity_score,
    "specificity": specificity_score,
    "auc": auc_score,
}


def _stack(records: Sequence[PredictionRecord]) -> tuple[np.ndarray, np.ndarray]:
    if not records:
        raise ValueError("no prediction records")
    return np.stack([r.labels for r in records]), np.stack([r.probs for r in records])


def metrics(records: Sequence[PredictionRecord], label_names: Sequence[str] = LABELS) -> dict[str, dict[str, float]]:
    """Per-class accuracy/sensitivity/specificity/AUC; undefined ones are NaN."""
    y, p = _stack(records)
    out = {}
    for j, name in enumerate(label_names):
        row = {}
        for mname, fn in METRICS.items():
            try:
                row[mname] = fn(y[:, j], p[:, j])
            except UndefinedMetricError:
                row[mname] = math.nan
        out[name] = row
    return out


@dataclass(frozen=True)
class Interval:
    point: float
    lo: float
    hi: float


def bootstrap_ci(
    y_true,
    y_score,
    metric: Callable = auc_score,
    n_boot: int = 1000,
    lo: float = 0.05,
    hi: float = 0.95,
    seed: int = 0,
) -> Interval:
    """Percentile bootstrap over clip-level resampling with replacement.

    Resamples on which the metric is undefined are redrawn, up to
    ``10 * n_boot`` draws in total.
    """
    y = np.asarray(y_true)
    s = np.asarray(y_score)
    n = len(y)
    if n == 0:
        raise ValueError("no records to bootstrap")
    point = metric(y, s)
    rng = np.random.default_rng(seed)
    stats = []
    attempts = 0
    while len(stats) < n_boot:
        if attempts >= 10 * n_boot:
            raise UndefinedMetricError(
                f"metric undefined on too many resamples ({attempts} draws, {len(stats)} usable)"
            )
        attempts += 1
        idx = rng.integers(0, n, size=n)
        try:
            stats.append(metric(y[idx], s[idx]))
        except UndefinedMetricError:
            continue
    stats = np.asarray(stats)
    return Interval(float(point), float(np.quantile(stats, lo)), float(np.quantile(stats, hi)))


def metrics_with_ci(
    records: Sequence[PredictionRecord],
    label_names: Sequence[str] = LABELS,
    n_boot: int = 1000,
    seed: int = 0,
) -> dict[str, dict[str, dict[str, float]]]:
    y, p = _stack(records)
    out: dict[str, dict[str, dict[str, float]]] = {}
    for j, name in enumerate(label_names):
        out[name] = {}
        for mname, fn in METRICS.items():
            try:
                iv = bootstrap_ci(y[:, j], p[:, j], fn, n_boot=n_boot, seed=seed)
                out[name][mname] = {"point": iv.point, "lo": iv.lo, "hi": iv.hi}
            except UndefinedMetricError as e:
                out[name][mname] = {"point": math.nan, "lo": math.nan, "hi": math.nan, "error": str(e)}
    return out
