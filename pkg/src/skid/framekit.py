"""Frame preparation for the jigsaw pretext task and the geometric baseline.

Frames are square 2-D float arrays in [0, 1].  Patch and frame transforms use
bilinear interpolation with zero fill; integer shifts are applied by exact
index arithmetic.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy import ndimage

from .arrangements import Arrangement, ArrangementSet, apply_arrangement

PATCH = 64


class Plane(str, Enum):
    SAGITTAL = "sagittal"
    CORONAL = "coronal"
    AXIAL = "axial"


PLANES = (Plane.SAGITTAL, Plane.CORONAL, Plane.AXIAL)


@dataclass(frozen=True)
class Frame:
    pixels: np.ndarray
    plane: Plane = Plane.SAGITTAL

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] != px.shape[1]:
            raise ValueError(f"frame must be square 2-D, got shape {px.shape}")
        if px.size and (px.min() < 0 or px.max() > 1):
            raise ValueError("frame intensities must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "plane", Plane(self.plane))

    @property
    def side(self) -> int:
        return self.pixels.shape[0]


def _pixels(f) -> np.ndarray:
    return np.asarray(f.pixels if isinstance(f, Frame) else f)


@dataclass(frozen=True)
class AugmentationSpec:
    shift_frac: float = 0.1
    rot_range_deg: float = 15.0
    scales: tuple[float, ...] = (1.0, 1.2)
    awgn_mean: float = 0.0
    awgn_var: float = 0.01
    shift: bool = True
    rotate: bool = True
    scale: bool = True
    noise: bool = True

    @classmethod
    def disabled(cls) -> "AugmentationSpec":
        return cls(shift=False, rotate=False, scale=False, noise=False)

    def without(self, *names: str) -> "AugmentationSpec":
        """Copy with the named toggles (shift/rotate/scale/noise) switched off."""
        return replace(self, **{n: False for n in names})

    def max_shift(self, side: int) -> int:
        return int(math.floor(self.shift_frac * side))


@dataclass(frozen=True)
class AugmentParams:
    scale: float = 1.0
    angle: float = 0.0
    shift: tuple[int, int] = (0, 0)


@dataclass
class JumbledSample:
    patches: np.ndarray  # (N, 64, 64) float32, already arranged
    label: int
    origins: list[tuple[int, int]] = field(default_factory=list)  # crop origin per source part
    params: list[AugmentParams] = field(default_factory=list)


# -- partitioning --------------------------------------------------------


def _grid(n_patches: int) -> int:
    g = math.isqrt(n_patches)
    if g * g != n_patches:
        raise ValueError(f"n_patches must be a perfect square, got {n_patches}")
    return g


def cell_side(side: int, n_patches: int = 9) -> int:
    return side // _grid(n_patches)


def partition_frame(f, n_patches: int = 9) -> list[np.ndarray]:
    """Split a square frame into row-major cells of side floor(L / sqrt(N)).

    Trailing rows/columns that do not fill a cell are dropped.
    """
    px = _pixels(f)
    if px.ndim != 2 or px.shape[0] != px.shape[1]:
        raise ValueError(f"frame must be square 2-D, got shape {px.shape}")
    g = _grid(n_patches)
    side = px.shape[0]
    if side < g * PATCH:
        raise ValueError(f"frame side {side} < {g}*{PATCH}; a {PATCH}px crop would not fit")
    c = side // g
    return [px[(i // g) * c:(i // g + 1) * c, (i % g) * c:(i % g + 1) * c] for i in range(n_patches)]


# -- augmentation --------------------------------------------------------


def _about_center(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    # matrix maps output coords to input coords, both centred
    center = (np.array(img.shape) - 1) / 2.0
    offset = center - matrix @ center
    return ndimage.affine_transform(img, matrix, offset=offset, order=1, mode="constant", cval=0.0)


def scale_image(img: np.ndarray, factor: float) -> np.ndarray:
    """Magnify about the centre; output keeps the input size."""
    if factor == 1:
        return img.copy()
    return _about_center(img, np.eye(2) / factor)


def rotate_image(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate counter-clockwise (image y axis pointing down) about the centre."""
    if angle_deg == 0:
        return img.copy()
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    # (row, col) coordinates; inverse rotation for the output->input map
    inv = np.array([[c, s], [-s, c]])
    return _about_center(img, inv)


def shift_image(img: np.ndarray, drow: int, dcol: int) -> np.ndarray:
    """Integer translation with zero fill: pixel (r, c) moves to (r+drow, c+dcol)."""
    out = np.zeros_like(img)
    h, w = img.shape
    if abs(drow) >= h or abs(dcol) >= w:
        return out
    src_r = slice(max(0, -drow), h - max(0, drow))
    src_c = slice(max(0, -dcol), w - max(0, dcol))
    dst_r = slice(max(0, drow), h - max(0, -drow))
    dst_c = slice(max(0, dcol), w - max(0, -dcol))
    out[dst_r, dst_c] = img[src_r, src_c]
    return out


def apply_augment_params(p: np.ndarray, params: AugmentParams) -> np.ndarray:
    out = scale_image(p, params.scale)
    out = rotate_image(out, params.angle)
    return shift_image(out, *params.shift)


def draw_augment_params(side: int, spec: AugmentationSpec, rng: np.random.Generator) -> AugmentParams:
    scale = float(rng.choice(spec.scales)) if spec.scale else 1.0
    angle = float(rng.uniform(-spec.rot_range_deg, spec.rot_range_deg)) if spec.rotate else 0.0
    if spec.shift:
        m = spec.max_shift(side)
        shift = (int(rng.integers(-m, m + 1)), int(rng.integers(-m, m + 1)))
    else:
        shift = (0, 0)
    return AugmentParams(scale, angle, shift)


def augment_patch(p: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    """Scale, then rotate, then shift one square part with freshly drawn parameters."""
    p = np.asarray(p)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError(f"part must be square, got {p.shape}")
    return apply_augment_params(p, draw_augment_params(p.shape[0], spec, rng))


def crop_origin(side: int, rng: np.random.Generator | None) -> tuple[int, int]:
    """Uniform origin in [0, side-64]^2, or the centred origin when ``rng`` is None."""
    if side < PATCH:
        raise ValueError(f"part side {side} < {PATCH}")
    hi = side - PATCH
    if rng is None:
        return hi // 2, hi // 2
    return int(rng.integers(0, hi + 1)), int(rng.integers(0, hi + 1))


def crop64(p: np.ndarray, rng: np.random.Generator | None = None, origin: tuple[int, int] | None = None) -> np.ndarray:
    p = np.asarray(p)
    if min(p.shape) < PATCH:
        raise ValueError(f"part side {min(p.shape)} < {PATCH}")
    x, y = origin if origin is not None else crop_origin(p.shape[0], rng)
    return p[x:x + PATCH, y:y + PATCH]


def awgn_noise(shape, rng: np.random.Generator, mean: float = 0.0, var: float = 0.01) -> np.ndarray:
    return rng.normal(mean, math.sqrt(var), size=shape)


def add_awgn(p: np.ndarray, rng: np.random.Generator, mean: float = 0.0, var: float = 0.01) -> np.ndarray:
    """Additive white Gaussian noise, clipped back to [0, 1]."""
    return np.clip(p + awgn_noise(p.shape, rng, mean, var), 0.0, 1.0)


# -- PREPFRAM ------------------------------------------------------------


def prepfram(
    f,
    aset: ArrangementSet,
    spec: AugmentationSpec,
    rng: np.random.Generator,
    *,
    label: int | None = None,
    center_crop: bool = False,
) -> JumbledSample:
    """Partition, augment, crop, add noise and jumble one frame.

    One arrangement is drawn per frame.  ``label`` forces the arrangement;
    ``center_crop`` pins every crop to the centred origin (validation mode).
    """
    n = aset.n_patches
    parts = partition_frame(f, n)
    patches, origins, params = [], [], []
    for part in parts:
        prm = draw_augment_params(part.shape[0], spec, rng)
        aug = apply_augment_params(part, prm)
        origin = crop_origin(aug.shape[0], None if center_crop else rng)
        patch = crop64(aug, origin=origin)
        if spec.noise:
            patch = add_awgn(patch, rng, spec.awgn_mean, spec.awgn_var)
        patches.append(patch)
        origins.append(origin)
        params.append(prm)
    if label is None:
        label = int(rng.integers(0, len(aset)))
    elif not 0 <= label < len(aset):
        raise ValueError(f"label {label} outside [0, {len(aset)})")
    stacked = np.stack(patches).astype(np.float32)
    jumbled = apply_arrangement(stacked, aset[label])
    return JumbledSample(jumbled, label, origins, params)


def validation_sample(f, aset: ArrangementSet, rng: np.random.Generator, *, label: int | None = None) -> JumbledSample:
    """No augmentation, no noise, centred crops; only the label is random."""
    return prepfram(f, aset, AugmentationSpec.disabled(), rng, label=label, center_crop=True)


def canonical_patches(f, n_patches: int = 9) -> np.ndarray:
    """Identity-order, centre-cropped 64x64 patches of every cell: (N, 64, 64)."""
    return np.stack([crop64(p) for p in partition_frame(f, n_patches)]).astype(np.float32)


def canonical_patch_index(side: int, n_patches: int = 9) -> tuple[np.ndarray, np.ndarray]:
    """Row/col gather indices that turn a frame batch into canonical patches.

    ``frames[..., rows, cols]`` has shape (..., N, 64, 64).
    """
    g = _grid(n_patches)
    if side < g * PATCH:
        raise ValueError(f"frame side {side} < {g}*{PATCH}")
    c = side // g
    off = (c - PATCH) // 2
    ar = np.arange(PATCH)
    rows = np.stack([(i // g) * c + off + ar for i in range(n_patches)])[:, :, None]
    cols = np.stack([(i % g) * c + off + ar for i in range(n_patches)])[:, None, :]
    return rows, cols


def dump_sample_grid(sample: JumbledSample, gap: int = 2) -> np.ndarray:
    """Tile the (arranged) patches row-major into one image for inspection."""
    n = len(sample.patches)
    g = _grid(n)
    side = g * PATCH + (g - 1) * gap
    grid = np.ones((side, side), dtype=np.float32)
    for slot, patch in enumerate(sample.patches):
        r, c = divmod(slot, g)
        grid[r * (PATCH + gap):r * (PATCH + gap) + PATCH, c * (PATCH + gap):c * (PATCH + gap) + PATCH] = patch
    return grid


# -- geometric transformation baseline ---------------------------------------

GEO_ROTATIONS = (-15.0, 0.0, 15.0)
GEO_SCALES = (1.0, 1.2)


@dataclass(frozen=True)
class GeoTransform:
    rot: float
    tx: int
    ty: int
    scale: float
    class_id: int


def enumerate_geo_transforms(side: int) -> list[GeoTransform]:
    """All 54 (rotation, x shift, y shift, scale) combinations.

    Order is lexicographic with rotation most significant, then tx, ty, scale;
    ``class_id`` is the position in that order.
    """
    if side <= 0:
        raise ValueError("frame side must be positive")
    t = int(math.floor(0.1 * side))
    shifts = (-t, 0, t)
    combos = itertools.product(GEO_ROTATIONS, shifts, shifts, GEO_SCALES)
    return [GeoTransform(r, tx, ty, s, i) for i, (r, tx, ty, s) in enumerate(combos)]


def geo_class_id(transforms: list[GeoTransform], rot: float, tx: int, ty: int, scale: float) -> int:
    for t in transforms:
        if (t.rot, t.tx, t.ty, t.scale) == (rot, tx, ty, scale):
            return t.class_id
    raise ValueError(f"no transform ({rot}, {tx}, {ty}, {scale})")


def apply_geo_transform(f, t: GeoTransform) -> np.ndarray:
    """Scale, rotate, then translate a whole frame; ``tx`` moves columns, ``ty`` rows."""
    px = np.asarray(_pixels(f), dtype=np.float64)
    out = scale_image(px, t.scale)
    out = rotate_image(out, t.rot)
    return shift_image(out, t.ty, t.tx)


def geo_void_mask(side: int, t: GeoTransform) -> np.ndarray:
    """Pixels that the transform fills with zeros (no source content)."""
    return apply_geo_transform(np.ones((side, side)), t) < 0.5
