"""Training loops for the jigsaw pretext task, the downstream video head and
the geometric-transformation baseline."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .arrangements import ArrangementSet
from .datakit import ClipVolume
from .evalkit import UndefinedMetricError, accuracy_score, auc_score, predict_clip
from .framekit import (
    AugmentationSpec,
    apply_augment_params,
    apply_geo_transform,
    canonical_patches,
    draw_augment_params,
    enumerate_geo_transforms,
    prepfram,
    validation_sample,
)
from .skidnet import DownstreamConfig, DownstreamModel, PretextModel, SkidEncoder, build_downstream_model, load_encoder, save_checkpoint

log = logging.getLogger(__name__)

EPS = 1e-7


class TrainingDiverged(RuntimeError):
    pass


def worker_rng(base_seed: int, worker_id: int) -> np.random.Generator:
    """Independent stream for a data-preparation worker (seed = base XOR id)."""
    return np.random.default_rng(base_seed ^ worker_id)


def config_from_dict(cls, data: dict):
    kw = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if f.name == "augment" and isinstance(value, dict):
            value = AugmentationSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in value.items()})
        elif isinstance(value, list):
            value = tuple(value)
        kw[f.name] = value
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**kw)


@dataclass
class PretextTrainConfig:
    lr: float = 1e-4
    lr_decay: float = 0.95
    batch_size: int = 16
    max_epochs: int = 50
    plateau_patience: int = 5
    rms_alpha: float = 0.9
    rms_eps: float = 1e-7
    frames_per_clip: int = 1
    augment: AugmentationSpec = field(default_factory=AugmentationSpec)
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "PretextTrainConfig":
        return config_from_dict(cls, data)


@dataclass
class DownstreamTrainConfig:
    lr: float = 1e-5
    lr_decay: float = 0.95
    max_epochs: int = 20
    frames_per_clip: int = 16
    batch_size: int = 1
    pos_weights: tuple[float, ...] | None = None  # None: N_neg / N_pos per label
    optimizer: str = "rmsprop"
    rms_alpha: float = 0.9
    rms_eps: float = 1e-7
    augment: AugmentationSpec | None = field(default_factory=AugmentationSpec)
    eval_repeats: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.frames_per_clip < 1:
            raise ValueError("frames_per_clip must be >= 1")
        if self.pos_weights is not None and any(w <= 0 for w in self.pos_weights):
            raise ValueError("pos_weights must be positive")
        if self.optimizer not in ("rmsprop", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "DownstreamTrainConfig":
        return config_from_dict(cls, data)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    stopped_early: bool = False
    checkpoint: str | None = None

    def add(self, **row) -> None:
        epoch = row.get("epoch")
        if self.rows and epoch is not None and epoch <= self.rows[-1]["epoch"]:
            raise ValueError("epoch indices must increase")
        bad = [k for k, v in row.items() if isinstance(v, float) and not math.isfinite(v)]
        if bad:
            log.warning("non-finite metrics at epoch %s: %s", epoch, bad)
        self.rows.append(row)

    def column(self, name: str) -> list:
        return [r.get(name) for r in self.rows]

    def write(self, out_dir: str | os.PathLike, stem: str) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        keys = list(dict.fromkeys(k for r in self.rows for k in r))
        with open(out_dir / f"{stem}_log.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(self.rows)
        summary = {
            "config": self.config,
            "epochs": len(self.rows),
            "wall_clock_s": self.wall_clock,
            "stopped_early": self.stopped_early,
            "final": self.rows[-1] if self.rows else {},
            "checkpoint": self.checkpoint,
        }
        (out_dir / f"{stem}_summary.json").write_text(json.dumps(summary, indent=2, default=str))


def _echo(*cfgs) -> dict:
    out = {}
    for c in cfgs:
        if is_dataclass(c):
            out[type(c).__name__] = asdict(c)
    return out


def lr_at_epoch(base_lr: float, decay: float, epoch: int) -> float:
    return base_lr * decay ** epoch


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def _optimizer(params, kind: str, lr: float, alpha: float, eps: float) -> torch.optim.Optimizer:
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.RMSprop(params, lr=lr, alpha=alpha, eps=eps)


def _batches(items: list, size: int) -> Iterator[list]:
    for i in range(0, len(items), size):
        yield items[i:i + size]


def _frames_of(clip) -> np.ndarray:
    return clip.frames if isinstance(clip, ClipVolume) else np.asarray(clip)


def _check_clips(clips: Sequence, what: str) -> None:
    if not clips:
        raise ValueError(f"{what}: empty dataset")
    for c in clips:
        if len(_frames_of(c)) == 0:
            raise ValueError(f"{what}: clip {getattr(c, 'clip_id', '?')} has no frames")


# -- shared classification loop -------------------------------------------


def _classification_loop(
    model: torch.nn.Module,
    train_samples: Callable[[int, np.random.Generator], list[tuple[np.ndarray, int]]],
    valid_samples: list[tuple[np.ndarray, int]] | None,
    cfg: PretextTrainConfig,
    stem: str,
    out_dir: str | os.PathLike | None,
    meta: dict,
) -> tuple[torch.nn.Module, TrainLog]:
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    opt = _optimizer(model.parameters(), "rmsprop", cfg.lr, cfg.rms_alpha, cfg.rms_eps)
    tlog = TrainLog(config=meta)
    best_acc, best_state, wait = -1.0, None, 0
    start = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        lr = lr_at_epoch(cfg.lr, cfg.lr_decay, epoch)
        _set_lr(opt, lr)
        model.train()
        samples = train_samples(epoch, rng)
        total, correct, seen = 0.0, 0, 0
        for batch in _batches(samples, cfg.batch_size):
            x = torch.from_numpy(np.stack([s[0] for s in batch]))
            y = torch.tensor([s[1] for s in batch])
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                if out_dir is not None:
                    save_checkpoint(Path(out_dir) / f"{stem}_diverged.npz", model, dict(meta, epoch=epoch))
                raise TrainingDiverged(f"{stem}: non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            correct += int((logits.argmax(1) == y).sum())
            seen += len(batch)
        row = dict(epoch=epoch, lr=lr, train_loss=total / seen, train_acc=correct / seen)
        if valid_samples:
            vloss, vacc = evaluate_classifier(model, valid_samples, cfg.batch_size)
            row.update(val_loss=vloss, val_acc=vacc)
        tlog.add(**row)
        log.info("%s epoch %d: %s", stem, epoch, row)
        if valid_samples:
            if row["val_acc"] > best_acc:
                best_acc, wait = row["val_acc"], 0
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            else:
                wait += 1
                if wait >= cfg.plateau_patience:
                    tlog.stopped_early = True
                    break
    if best_state is not None:
        model.load_state_dict(best_state)
    tlog.wall_clock = time.perf_counter() - start
    if out_dir is not None:
        ckpt = save_checkpoint(Path(out_dir) / f"{stem}.npz", model, meta)
        tlog.checkpoint = str(ckpt)
        tlog.write(out_dir, stem)
    return model, tlog


def evaluate_classifier(model, samples: list[tuple[np.ndarray, int]], batch_size: int = 16) -> tuple[float, float]:
    model.eval()
    total, correct = 0.0, 0
    with torch.no_grad():
        for batch in _batches(samples, batch_size):
            x = torch.from_numpy(np.stack([s[0] for s in batch]))
            y = torch.tensor([s[1] for s in batch])
            logits = model(x)
            total += F.cross_entropy(logits, y, reduction="sum").item()
            correct += int((logits.argmax(1) == y).sum())
    return total / len(samples), correct / len(samples)


# -- pretext ---------------------------------------------------------------------


def _draw_frame(clip, rng: np.random.Generator) -> np.ndarray:
    frames = _frames_of(clip)
    return frames[rng.integers(0, len(frames))]


def pretext_validation_set(clips: Sequence, aset: ArrangementSet, frames_per_clip: int = 1, seed: int = 0) -> list[tuple[np.ndarray, int]]:
    """Fixed validation samples: no augmentation, centred crops, random labels."""
    rng = np.random.default_rng(seed)
    out = []
    for clip in clips:
        for _ in range(frames_per_clip):
            s = validation_sample(_draw_frame(clip, rng), aset, rng)
            out.append((s.patches, s.label))
    return out


def train_pretext(
    clips: Sequence,
    aset: ArrangementSet,
    model: PretextModel,
    cfg: PretextTrainConfig = PretextTrainConfig(),
    valid_clips: Sequence | None = None,
    out_dir: str | os.PathLike | None = None,
) -> tuple[PretextModel, TrainLog]:
    """Jigsaw arrangement classification with categorical cross-entropy.

    Every epoch visits each clip ``frames_per_clip`` times in shuffled order,
    picking a frame uniformly and jumbling it with PREPFRAM.  The learning
    rate is ``lr * lr_decay**epoch``.  With validation clips, training stops
    after ``plateau_patience`` epochs without a new best validation accuracy
    and the best weights are restored.
    """
    _check_clips(clips, "pretext")
    aset.require_patches(model.encoder.cfg.n_patches)
    if model.cfg.n_classes != len(aset):
        raise ValueError(f"head has {model.cfg.n_classes} outputs but the arrangement set has {len(aset)}")
    valid = pretext_validation_set(valid_clips, aset, cfg.frames_per_clip, cfg.seed + 1) if valid_clips else None

    def samples(epoch, rng):
        order = np.repeat(rng.permutation(len(clips)), cfg.frames_per_clip)
        out = []
        for i in order:
            s = prepfram(_draw_frame(clips[i], rng), aset, cfg.augment, rng)
            out.append((s.patches, s.label))
        return out

    meta = dict(kind="pretext", **_echo(cfg), n_arrangements=len(aset), arrangement_seed=aset.seed)
    return _classification_loop(model, samples, valid, cfg, "pretext", out_dir, meta)


# -- geometric-transformation baseline ---------------------------------------------


def geo_sample(frame: np.ndarray, class_id: int, n_patches: int = 9) -> np.ndarray:
    transforms = enumerate_geo_transforms(frame.shape[0])
    out = apply_geo_transform(frame, transforms[class_id])
    return canonical_patches(out.astype(np.float32), n_patches)


def train_geo_baseline(
    clips: Sequence,
    model: PretextModel,
    cfg: PretextTrainConfig = PretextTrainConfig(),
    valid_clips: Sequence | None = None,
    out_dir: str | os.PathLike | None = None,
) -> tuple[PretextModel, TrainLog]:
    """54-way classification of which geometric transform was applied to a frame."""
    _check_clips(clips, "geo")
    if model.cfg.n_classes != 54:
        raise ValueError(f"geo baseline needs 54 outputs, model has {model.cfg.n_classes}")
    n = model.encoder.cfg.n_patches

    def draw(clip, rng):
        c = int(rng.integers(0, 54))
        return geo_sample(_draw_frame(clip, rng), c, n), c

    valid = None
    if valid_clips:
        vrng = np.random.default_rng(cfg.seed + 1)
        valid = [draw(c, vrng) for c in valid_clips for _ in range(cfg.frames_per_clip)]

    def samples(epoch, rng):
        order = np.repeat(rng.permutation(len(clips)), cfg.frames_per_clip)
        return [draw(clips[i], rng) for i in order]

    meta = dict(kind="geo", **_echo(cfg))
    return _classification_loop(model, samples, valid, cfg, "geo", out_dir, meta)


# -- downstream ------------------------------------------------------------------------


def weighted_bce(pred, target, pos_weights=None, eps: float = EPS) -> torch.Tensor:
    """Mean over the batch of sum_j [w_j * -t log p - (1-t) log(1-p)] / n_labels."""
    p = pred if torch.is_tensor(pred) else torch.as_tensor(pred, dtype=torch.float64)
    t = torch.as_tensor(target, dtype=p.dtype)
    p = p.clamp(eps, 1 - eps)
    w = torch.ones(p.shape[-1], dtype=p.dtype) if pos_weights is None else torch.as_tensor(pos_weights, dtype=p.dtype)
    per = w * (-t * torch.log(p)) - (1 - t) * torch.log1p(-p)
    return per.sum(-1).div(p.shape[-1]).mean()


def default_pos_weights(labels: np.ndarray) -> np.ndarray:
    y = np.asarray(labels)
    pos = y.sum(axis=0)
    neg = len(y) - pos
    return np.where(pos > 0, neg / np.maximum(pos, 1), 1.0).astype(np.float64)


def sample_train_frames(n_frames: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` indices uniform without replacement (with replacement when the
    clip is too short), in temporal order."""
    if n_frames < 1:
        raise ValueError("clip has no frames")
    idx = rng.choice(n_frames, size=count, replace=n_frames < count)
    return np.sort(idx)


def _augment_frames(frames: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    # one geometric draw per clip keeps the sequence temporally coherent
    prm = draw_augment_params(frames.shape[-1], spec, rng)
    out = np.stack([apply_augment_params(f, prm) for f in frames])
    if spec.noise:
        out = np.clip(out + rng.normal(spec.awgn_mean, math.sqrt(spec.awgn_var), size=out.shape), 0, 1)
    return out.astype(np.float32)


def clip_predictions(model: DownstreamModel, clips: Sequence[ClipVolume], repeats: int = 8, seed: int = 0) -> np.ndarray:
    model.eval()
    rng = np.random.default_rng(seed)
    return np.stack([predict_clip(model, _frames_of(c), repeats=repeats, rng=rng) for c in clips])


def label_metrics(y: np.ndarray, p: np.ndarray, prefix: str = "val") -> dict:
    row = {}
    for j in range(y.shape[1]):
        row[f"{prefix}_acc_{j}"] = accuracy_score(y[:, j], p[:, j])
        try:
            row[f"{prefix}_auc_{j}"] = auc_score(y[:, j], p[:, j])
        except UndefinedMetricError:
            row[f"{prefix}_auc_{j}"] = float("nan")
    return row


def train_downstream(
    clips: Sequence[ClipVolume],
    encoder: SkidEncoder | str | os.PathLike,
    cfg: DownstreamTrainConfig = DownstreamTrainConfig(),
    head: DownstreamConfig = DownstreamConfig(),
    valid_clips: Sequence[ClipVolume] | None = None,
    out_dir: str | os.PathLike | None = None,
    model: DownstreamModel | None = None,
) -> tuple[DownstreamModel, TrainLog]:
    """Train the temporal head of one plane's model on top of a frozen encoder.

    Each epoch redraws ``frames_per_clip`` frames per clip.  The loss is the
    weighted binary cross-entropy over the labels.
    """
    _check_clips(clips, "downstream")
    if model is None:
        if not isinstance(encoder, SkidEncoder):
            encoder = load_encoder(encoder)
        torch.manual_seed(cfg.seed)
        model = build_downstream_model(encoder, head)
    labels = np.array([c.labels for c in clips], dtype=np.float64)
    if labels.ndim != 2 or labels.shape[1] != model.cfg.n_labels:
        raise ValueError(f"expected {model.cfg.n_labels} binary labels per clip")
    pos_w = np.asarray(cfg.pos_weights if cfg.pos_weights is not None else default_pos_weights(labels))
    rng = np.random.default_rng(cfg.seed)
    params = model.trainable_parameters()
    opt = _optimizer(params, cfg.optimizer, cfg.lr, cfg.rms_alpha, cfg.rms_eps)
    frozen = model.encoder_frozen
    meta = dict(kind="downstream", **_echo(cfg, head), pos_weights=pos_w.tolist())
    tlog = TrainLog(config=meta)
    start = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        lr = lr_at_epoch(cfg.lr, cfg.lr_decay, epoch)
        _set_lr(opt, lr)
        model.train()
        total, seen = 0.0, 0
        for batch in _batches(list(rng.permutation(len(clips))), cfg.batch_size):
            seqs = []
            for i in batch:
                frames = _frames_of(clips[i])
                seq = frames[sample_train_frames(len(frames), cfg.frames_per_clip, rng)]
                if cfg.augment is not None:
                    seq = _augment_frames(seq, cfg.augment, rng)
                seqs.append(seq)
            x = torch.from_numpy(np.stack(seqs).astype(np.float32))
            y = torch.from_numpy(labels[batch])
            if frozen:
                with torch.no_grad():
                    feats = model.features(x)
                logits = model.head_logits(feats)
            else:
                logits = model.logits(x)
            loss = weighted_bce(torch.sigmoid(logits).double(), y, pos_w)
            if not torch.isfinite(loss):
                if out_dir is not None:
                    save_checkpoint(Path(out_dir) / "downstream_diverged.npz", model, dict(meta, epoch=epoch))
                raise TrainingDiverged(f"downstream: non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            seen += len(batch)
        row = dict(epoch=epoch, lr=lr, train_loss=total / seen)
        if valid_clips:
            yv = np.array([c.labels for c in valid_clips], dtype=np.float64)
            pv = clip_predictions(model, valid_clips, cfg.eval_repeats, cfg.seed + 1)
            row["val_loss"] = float(weighted_bce(pv, yv, pos_w))
            row.update(label_metrics(yv, pv))
        tlog.add(**row)
        log.info("downstream epoch %d: %s", epoch, row)
    tlog.wall_clock = time.perf_counter() - start
    if out_dir is not None:
        tlog.checkpoint = str(save_checkpoint(Path(out_dir) / "downstream.npz", model, meta))
        tlog.write(out_dir, "downstream")
    return model, tlog
