"""Dataset ingestion, the SKIDVOL clip container and the synthetic knee generator.

SKIDVOL layout (little endian)::

    offset 0   8 bytes  magic b"SKIDVOL1"
    offset 8   u32      F  (frames)
    offset 12  u32      H
    offset 16  u32      W
    offset 20  u8       dtype code: 0 = uint8, 1 = uint16, 2 = float32
    offset 21  ...      F*H*W samples, row-major, frame-major

Dataset directory layout::

    <root>/<split>/<plane>/<clip_id>.skidvol
    <root>/<split>_labels.csv     clip_id,abnormal,acl,meniscus   (mrnet3)
                                  clip_id,ligament_state          (kneemri_*)
"""
from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"SKIDVOL1"
HEADER = struct.Struct("<8sIIIB")
DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<u2"), 2: np.dtype("<f4")}
MAX_DIM = 1 << 16
EXT = ".skidvol"
SPLITS = ("train", "valid", "test")
PLANES = ("sagittal", "coronal", "axial")
SCHEMAS = ("mrnet3", "kneemri_binary", "kneemri_ternary")
MRNET_FIELDS = ("clip_id", "abnormal", "acl", "meniscus")
KNEEMRI_FIELDS = ("clip_id", "ligament_state")
DATA_ROOT_ENV = "SKID_DATA_ROOT"


class VolumeFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class DatasetError(ValueError):
    pass


@dataclass
class ClipVolume:
    clip_id: str
    plane: str
    frames: np.ndarray  # (F, H, W) float32 in [0, 1]
    labels: tuple[int, ...] = ()

    def __post_init__(self):
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise DatasetError(f"clip {self.clip_id}: expected (F>=1, H, W) frames, got {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def default_data_root() -> Path | None:
    root = os.environ.get(DATA_ROOT_ENV)
    return Path(root) if root else None


# -- SKIDVOL -----------------------------------------------------------------


def write_volume(path: str | os.PathLike, frames: np.ndarray) -> None:
    arr = np.asarray(frames)
    if arr.ndim != 3:
        raise ValueError(f"expected (F, H, W), got shape {arr.shape}")
    code = next((c for c, dt in DTYPES.items() if arr.dtype == dt), None)
    if code is None:
        raise ValueError(f"unsupported dtype {arr.dtype}; use uint8, uint16 or float32")
    f, h, w = arr.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, f, h, w, code))
        fh.write(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    os.replace(tmp, path)


def _parse_header(buf: bytes) -> tuple[int, int, int, np.dtype]:
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise VolumeFormatError("bad magic, not a SKIDVOL1 file", 0)
    if len(buf) < HEADER.size:
        raise VolumeFormatError("truncated header", len(buf))
    _, f, h, w, code = HEADER.unpack_from(buf)
    for name, value, off in (("F", f, 8), ("H", h, 12), ("W", w, 16)):
        if value == 0 or value > MAX_DIM:
            raise VolumeFormatError(f"dimension {name}={value} out of range [1, {MAX_DIM}]", off)
    if code not in DTYPES:
        raise VolumeFormatError(f"unknown dtype code {code}", 20)
    return f, h, w, DTYPES[code]


def read_volume_header(path: str | os.PathLike) -> tuple[int, int, int, np.dtype]:
    """Validate header and payload length without reading the payload."""
    with open(path, "rb") as fh:
        buf = fh.read(HEADER.size)
    f, h, w, dt = _parse_header(buf)
    size = os.path.getsize(path)
    expected = HEADER.size + f * h * w * dt.itemsize
    if size < expected:
        raise VolumeFormatError(f"truncated payload: expected {expected} bytes, file has {size}", size)
    if size > expected:
        raise VolumeFormatError(f"{size - expected} trailing bytes after payload", expected)
    return f, h, w, dt


def read_volume(path: str | os.PathLike) -> np.ndarray:
    """Raw (F, H, W) array exactly as stored."""
    buf = Path(path).read_bytes()
    f, h, w, dt = _parse_header(buf)
    expected = HEADER.size + f * h * w * dt.itemsize
    if len(buf) < expected:
        whole = (len(buf) - HEADER.size) // (h * w * dt.itemsize)
        raise VolumeFormatError(
            f"truncated payload: header says {f} frames, data holds {whole}", len(buf)
        )
    if len(buf) > expected:
        raise VolumeFormatError(f"{len(buf) - expected} trailing bytes after payload", expected)
    return np.frombuffer(buf, dtype=dt, count=f * h * w, offset=HEADER.size).reshape(f, h, w).copy()


def normalize(raw: np.ndarray) -> np.ndarray:
    """Scale to [0, 1] by the dtype's full range (floats are clipped)."""
    if raw.dtype.kind == "u":
        return (raw.astype(np.float32) / np.iinfo(raw.dtype).max).astype(np.float32)
    return np.clip(raw.astype(np.float32), 0.0, 1.0)


def load_clip(path: str | os.PathLike, clip_id: str | None = None, plane: str = "", labels: Sequence[int] = ()) -> ClipVolume:
    path = Path(path)
    return ClipVolume(clip_id or path.stem, plane, normalize(read_volume(path)), tuple(labels))


def save_clip(path: str | os.PathLike, clip: ClipVolume, dtype=np.uint8) -> None:
    frames = clip.frames
    if np.dtype(dtype).kind == "u":
        top = np.iinfo(dtype).max
        frames = np.rint(np.clip(frames, 0, 1) * top).astype(dtype)
    write_volume(path, frames.astype(dtype))


# -- labels and manifests -----------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    clip_id: str
    path: Path
    labels: tuple[int, ...]


@dataclass
class DatasetManifest:
    split: str
    plane: str
    schema: str
    entries: list[ManifestEntry] = field(default_factory=list)
    oversampled: bool = False  # oversampling repeats entries by reference

    def __post_init__(self):
        if self.schema not in SCHEMAS:
            raise DatasetError(f"unknown schema {self.schema!r}")
        ids = [e.clip_id for e in self.entries]
        if len(ids) != len(set(ids)) and not self.oversampled:
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DatasetError(f"duplicate clip ids: {dup[:5]}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def n_labels(self) -> int:
        return 3 if self.schema == "mrnet3" else 1

    def label_matrix(self) -> np.ndarray:
        return np.array([e.labels for e in self.entries], dtype=np.int64).reshape(len(self.entries), -1)

    def clips(self) -> list[ClipVolume]:
        return [load_clip(e.path, e.clip_id, self.plane, e.labels) for e in self.entries]


def read_labels(path: str | os.PathLike, schema: str = "mrnet3") -> dict[str, tuple[int, ...]]:
    fields = MRNET_FIELDS if schema == "mrnet3" else KNEEMRI_FIELDS
    out: dict[str, tuple[int, ...]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != fields:
            raise DatasetError(f"{path}: expected header {','.join(fields)}, got {reader.fieldnames}")
        for row in reader:
            cid = row["clip_id"]
            if cid in out:
                raise DatasetError(f"{path}: duplicate clip id {cid}")
            if schema == "mrnet3":
                labels = tuple(int(row[k]) for k in fields[1:])
                if any(v not in (0, 1) for v in labels):
                    raise DatasetError(f"{path}: clip {cid} has non-binary labels {labels}")
            else:
                state = int(row["ligament_state"])
                if state not in (0, 1, 2):
                    raise DatasetError(f"{path}: clip {cid} ligament_state {state} not in 0/1/2")
                # completely ruptured is the positive class for the binary task
                labels = (int(state == 2),) if schema == "kneemri_binary" else (state,)
            out[cid] = labels
    return out


def write_labels(path: str | os.PathLike, labels: dict[str, Sequence[int]], schema: str = "mrnet3") -> None:
    fields = MRNET_FIELDS if schema == "mrnet3" else KNEEMRI_FIELDS
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for cid, lab in labels.items():
            w.writerow([cid, *lab])


def load_manifest(root: str | os.PathLike, split: str, plane: str, schema: str = "mrnet3") -> DatasetManifest:
    """Read labels and check every referenced clip's header before returning."""
    root = Path(root)
    labels = read_labels(root / f"{split}_labels.csv", schema)
    entries, problems = [], []
    for cid, lab in labels.items():
        path = root / split / plane / f"{cid}{EXT}"
        if not path.exists():
            problems.append(f"{cid}: missing {path}")
            continue
        try:
            read_volume_header(path)
        except VolumeFormatError as e:
            problems.append(f"{cid}: {e}")
            continue
        entries.append(ManifestEntry(cid, path, lab))
    if problems:
        more = f" (+{len(problems) - 5} more)" if len(problems) > 5 else ""
        raise DatasetError(f"{split}/{plane}: " + "; ".join(problems[:5]) + more)
    return DatasetManifest(split, plane, schema, entries)


# -- subsetting ----------------------------------------------------------------


def subset_for_label_efficiency(manifest: DatasetManifest, fraction: float, seed: int = 0) -> DatasetManifest:
    """Stratified clip-level subsample keeping round(fraction * n) clips.

    Clips are grouped by their full label tuple and each group contributes in
    proportion (largest-remainder rounding).
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(manifest)
    if fraction == 1:
        return replace(manifest, entries=list(manifest.entries))
    target = max(1, round(fraction * n))
    rng = np.random.default_rng(seed)
    groups: dict[tuple[int, ...], list[int]] = {}
    for i, e in enumerate(manifest.entries):
        groups.setdefault(e.labels, []).append(i)
    keys = sorted(groups)
    quotas = {k: len(groups[k]) * target / n for k in keys}
    alloc = {k: math.floor(q) for k, q in quotas.items()}
    left = target - sum(alloc.values())
    for k in sorted(keys, key=lambda k: (-(quotas[k] - alloc[k]), k))[:left]:
        alloc[k] += 1
    chosen = []
    for k in keys:
        chosen += rng.choice(groups[k], size=alloc[k], replace=False).tolist()
    chosen.sort()
    entries = [manifest.entries[i] for i in chosen]
    sub = replace(manifest, entries=entries)

    y_all, y_sub = manifest.label_matrix(), sub.label_matrix()
    positive_all = y_all > 0
    for j in range(y_all.shape[1]):
        if positive_all[:, j].any() and not (y_sub[:, j] > 0).any():
            need = math.ceil(n / positive_all[:, j].sum()) / n
            raise DatasetError(
                f"label {j} has no positive clip in a {fraction:.3g} subset; "
                f"use a fraction of at least {min(1.0, need):.3g}"
            )
    return sub


def oversample_minority(manifest: DatasetManifest, seed: int = 0) -> DatasetManifest:
    """Duplicate minority-class entries until both binary classes are equally common."""
    if manifest.schema != "kneemri_binary":
        raise DatasetError(f"oversampling needs the kneemri_binary schema, got {manifest.schema}")
    pos = [e for e in manifest.entries if e.labels[0] == 1]
    neg = [e for e in manifest.entries if e.labels[0] == 0]
    if not pos or not neg:
        raise DatasetError("oversampling needs both classes present")
    minority, majority = (pos, neg) if len(pos) < len(neg) else (neg, pos)
    rng = np.random.default_rng(seed)
    extra = []
    while len(minority) + len(extra) < len(majority):
        order = rng.permutation(len(minority))
        extra += [minority[i] for i in order[: len(majority) - len(minority) - len(extra)]]
    return replace(manifest, entries=list(manifest.entries) + extra, oversampled=True)


# -- import ------------------------------------------------------------------------


def import_frames(src_dir: str | os.PathLike, out_path: str | os.PathLike, size: int = 256, pattern: str = "*") -> tuple[int, int, int]:
    """Convert a directory of per-frame grayscale images into one SKIDVOL clip.

    Frames are sorted by file name, converted to 8-bit luminance and
    bilinearly resized to ``size`` x ``size``.
    """
    from PIL import Image

    exts = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
    files = sorted(p for p in Path(src_dir).glob(pattern) if p.suffix.lower() in exts)
    if not files:
        raise DatasetError(f"no image frames found in {src_dir}")
    frames = []
    for p in files:
        with Image.open(p) as im:
            im = im.convert("L")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            frames.append(np.asarray(im, dtype=np.uint8))
    stack = np.stack(frames)
    write_volume(out_path, stack)
    return stack.shape


# -- synthetic data -------------------------------------------------------------------

MRNET_RATES = (917 / 1130, 208 / 1130, 397 / 1130)


@dataclass(frozen=True)
class SyntheticSpec:
    n_train: int = 113
    n_valid: int = 12
    n_test: int = 12
    frame_size: int = 256
    frames_min: int = 20
    frames_max: int = 36
    label_rates: tuple[float, float, float] = MRNET_RATES
    planes: tuple[str, ...] = PLANES
    noise_std: float = 0.02
    motif_span: float = 0.8  # central fraction of frames that carry a motif
    seed: int = 0

    @classmethod
    def mrnet_like(cls, scale: float = 0.1, **kw) -> "SyntheticSpec":
        return cls(n_train=round(1130 * scale), n_valid=round(120 * scale), n_test=round(120 * scale), **kw)


def assign_labels(n: int, rates: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    """Exactly round(n * rate) positives per label; ACL/meniscus imply abnormal."""
    counts = [round(n * r) for r in rates]
    y = np.zeros((n, 3), dtype=np.int64)
    abn = rng.permutation(n)[: counts[0]]
    y[abn, 0] = 1
    pool = abn if len(abn) >= max(counts[1], counts[2]) else np.arange(n)
    for j in (1, 2):
        y[rng.permutation(pool)[: counts[j]], j] = 1
    return y


def _disk(yy, xx, cy, cx, r):
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.float32)


def _ellipse(yy, xx, cy, cx, ry, rx, soft=2.0):
    d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return 1 / (1 + np.exp((d - 1) * min(ry, rx) / soft))


def _ridge(yy, xx, cy, cx, angle, width, length):
    c, s = math.cos(angle), math.sin(angle)
    along = (xx - cx) * c + (yy - cy) * s
    across = -(xx - cx) * s + (yy - cy) * c
    return (np.exp(-(across / width) ** 2) * (np.abs(along) <= length / 2)).astype(np.float32)


def render_clip(labels: Sequence[int], plane: str, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Pseudo-anatomy clip (F, L, L) in [0, 1] with motifs for positive labels.

    Abnormal: a bright round lesion; ACL: a bright oblique band through the
    joint; meniscus: a dark wedge at the joint line.  Motifs occupy the central
    ``motif_span`` of the frames.
    """
    L = spec.frame_size
    nf = int(rng.integers(spec.frames_min, spec.frames_max + 1))
    yy, xx = np.mgrid[0:L, 0:L].astype(np.float32)
    pidx = PLANES.index(plane) if plane in PLANES else 0
    jy = L * (0.5 + rng.uniform(-0.04, 0.04))
    jx = L * (0.5 + rng.uniform(-0.04, 0.04))
    bone_w = L * rng.uniform(0.16, 0.22)
    ridge_angle = rng.uniform(0, math.pi)
    ridge_freq = rng.uniform(6, 12) / L
    blobs = [(rng.uniform(0.15, 0.85) * L, rng.uniform(0.15, 0.85) * L, rng.uniform(0.05, 0.12) * L, rng.uniform(0.05, 0.2)) for _ in range(4)]
    lesion = (jy + rng.uniform(-0.12, 0.12) * L, jx + rng.uniform(-0.12, 0.12) * L)
    wedge_side = rng.choice([-1, 1])
    span_lo = int(round(nf * (1 - spec.motif_span) / 2))
    span_hi = nf - span_lo

    clip = np.empty((nf, L, L), dtype=np.float32)
    for t in range(nf):
        z = (t + 0.5) / nf * 2 - 1  # slice position in (-1, 1)
        prof = math.sqrt(max(0.0, 1 - 0.7 * z * z))
        img = 0.08 + 0.06 * (yy / L)  # vertical shading keeps every cell distinguishable
        for by, bx, br, bi in blobs:
            img = img + bi * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * br * br))
        bands = 0.5 + 0.5 * np.sin(2 * math.pi * ridge_freq * (xx * math.cos(ridge_angle) + yy * math.sin(ridge_angle)) + z)
        img = img + 0.08 * bands
        w = bone_w * prof
        if pidx == 2:  # axial: one round cross-section
            img = img + 0.35 * _ellipse(yy, xx, jy, jx, w * 1.2, w * 1.4)
        else:
            gap = L * 0.03
            stretch = 1.4 if pidx == 0 else 1.1
            img = img + 0.35 * _ellipse(yy, xx, jy - gap - w * stretch, jx, w * stretch, w)  # femur
            img = img + 0.3 * _ellipse(yy, xx, jy + gap + w * stretch, jx, w * stretch, w * 0.9)  # tibia
            img = img + 0.15 * _ellipse(yy, xx, L * 0.2, jx + w * 1.3, w * 0.5, w * 0.35)  # patella-ish
        if span_lo <= t < span_hi:
            if labels[0]:
                img = np.maximum(img, _disk(yy, xx, *lesion, L * 0.07))
            if labels[1]:
                img = np.maximum(img, 0.9 * _ridge(yy, xx, jy, jx, math.radians(55), L * 0.015, L * 0.35))
            if labels[2]:
                cx = jx + wedge_side * L * 0.18
                wedge = (np.abs(yy - jy) <= (L * 0.06 - np.abs(xx - cx) * 0.5)) & (np.abs(xx - cx) <= L * 0.1)
                img = np.where(wedge, 0.0, img)
        img = img + rng.normal(0, spec.noise_std, size=img.shape)
        clip[t] = np.clip(img, 0, 1)
    return clip


def generate_synthetic_dataset(root: str | os.PathLike, spec: SyntheticSpec = SyntheticSpec()) -> dict[str, np.ndarray]:
    """Write a full MRNet-layout dataset of synthetic clips; returns labels per split."""
    root = Path(root)
    counts = {"train": spec.n_train, "valid": spec.n_valid, "test": spec.n_test}
    seeds = np.random.SeedSequence(spec.seed).spawn(len(SPLITS))
    out = {}
    for split, ss in zip(SPLITS, seeds):
        n = counts[split]
        if n == 0:
            continue
        label_rng, clip_ss = ss.spawn(2)
        y = assign_labels(n, spec.label_rates, np.random.default_rng(label_rng))
        ids = [f"{i:04d}" for i in range(n)]
        per_clip = clip_ss.spawn(n)
        for pi, plane in enumerate(spec.planes):
            d = root / split / plane
            d.mkdir(parents=True, exist_ok=True)
            for cid, lab, css in zip(ids, y, per_clip):
                # same anatomy seed across planes; plane offsets only the draw stream
                rng = np.random.default_rng(css.spawn(len(spec.planes))[pi])
                frames = render_clip(lab, plane, spec, rng)
                write_volume(d / f"{cid}{EXT}", np.rint(frames * 255).astype(np.uint8))
        write_labels(root / f"{split}_labels.csv", {c: lab.tolist() for c, lab in zip(ids, y)})
        out[split] = y
    return out


def synthetic_clips(n: int, spec: SyntheticSpec = SyntheticSpec(frame_size=192), plane: str = "sagittal", labels: np.ndarray | None = None, seed: int = 0) -> list[ClipVolume]:
    """In-memory synthetic clips (no disk round trip), for quick experiments."""
    rng = np.random.default_rng(seed)
    y = assign_labels(n, spec.label_rates, rng) if labels is None else np.asarray(labels)
    return [
        ClipVolume(f"{i:04d}", plane, render_clip(y[i], plane, spec, rng), tuple(int(v) for v in y[i]))
        for i in range(n)
    ]
