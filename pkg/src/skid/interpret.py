"""Grad-CAM saliency maps and overlay rendering."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .framekit import PATCH, canonical_patch_index

DEFAULT_LAYER = "dimred2"


@dataclass
class SaliencyMap:
    values: np.ndarray  # (M, H, W) max-normalised, M = number of captured maps
    raw: np.ndarray  # (M, h, w) ReLU'd weighted sum at layer resolution
    target: int
    source_layer: str
    all_zero: bool = False

    def __len__(self) -> int:
        return len(self.values)


def resolve_layer(model: nn.Module, layer: str) -> nn.Module:
    """Find a submodule by dotted name; bare block names also match under ``encoder``."""
    for name in (layer, f"encoder.{layer}"):
        try:
            return model.get_submodule(name)
        except AttributeError:
            continue
    raise ValueError(f"unknown layer {layer!r}")


def _target_logits(model: nn.Module, inputs: torch.Tensor) -> torch.Tensor:
    fn = getattr(model, "logits", None)
    return fn(inputs) if callable(fn) else model(inputs)


def _upsample(raw: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return F.interpolate(raw[:, None], size=size, mode="bilinear", align_corners=False)[:, 0]


def tile_to_frame(maps: np.ndarray, side: int, n_patches: int = 9) -> np.ndarray:
    """Place patch-resolution (M, 64, 64) maps into each cell's crop window of
    an (M, side, side) canvas; pixels outside every window stay 0."""
    rows, cols = canonical_patch_index(side, n_patches)
    out = np.zeros((len(maps), side, side), dtype=maps.dtype)
    for k in range(n_patches):
        out[:, rows[k, :, 0][:, None], cols[k, 0, :][None, :]] = maps
    return out


def gradcam(
    model: nn.Module,
    inputs: torch.Tensor,
    target_class: int,
    layer: str = DEFAULT_LAYER,
    output_size: tuple[int, int] | None = None,
    tiled_side: int | None = None,
) -> SaliencyMap:
    """Gradient-weighted class activation map at ``layer`` for one input.

    ``inputs`` is a batch of one sample.  Every activation map the layer
    produces during that forward pass yields one saliency map; for video
    models these are the per-frame maps, all differentiated from the single
    clip-level logit.  Maps are bilinearly resized to ``output_size`` (default:
    the input's spatial size), or, with ``tiled_side``, to patch size and
    placed into each patch's window of a frame of that side.
    """
    module = resolve_layer(model, layer)
    captured: list[torch.Tensor] = []

    def hook(mod, args, out):
        leaf = out.detach().requires_grad_(True)
        captured.append(leaf)
        return leaf

    was_training = model.training
    model.eval()
    handle = module.register_forward_hook(hook)
    try:
        with torch.enable_grad():
            logits = _target_logits(model, inputs)
            if not captured:
                raise ValueError(f"layer {layer!r} did not run during the forward pass")
            act = captured[-1]
            target = logits.reshape(logits.shape[0], -1)[:, target_class].sum()
            (grad,) = torch.autograd.grad(target, act, allow_unused=True)
    finally:
        handle.remove()
        model.train(was_training)
    if grad is None:
        grad = torch.zeros_like(act)
    act, grad = act.detach(), grad.detach()
    weights = grad.mean(dim=(-2, -1), keepdim=True)
    raw = F.relu((weights * act).sum(dim=1))  # (M, h, w)
    all_zero = bool((grad == 0).all()) or bool((raw == 0).all())

    if tiled_side is not None:
        up = _upsample(raw, (PATCH, PATCH)).clamp_min(0).numpy()
        values = tile_to_frame(up, tiled_side)
    else:
        size = output_size or tuple(inputs.shape[-2:])
        values = _upsample(raw, size).clamp_min(0).numpy()
    peak = values.reshape(len(values), -1).max(axis=1)
    values = np.where(peak[:, None, None] > 0, values / np.where(peak > 0, peak, 1)[:, None, None], 0.0)
    return SaliencyMap(values.astype(np.float32), raw.numpy(), target_class, layer, all_zero)


def jet_overlay(saliency: np.ndarray, frame: np.ndarray, alpha: float = 0.4) -> np.ndarray:
    """RGB uint8 image: jet-coloured saliency alpha-blended over a grey frame."""
    from matplotlib import colormaps

    frame = np.asarray(frame, dtype=np.float64)
    sal = np.asarray(saliency, dtype=np.float64)
    if sal.shape != frame.shape:
        t = torch.from_numpy(sal)[None, None]
        sal = F.interpolate(t, size=frame.shape, mode="bilinear", align_corners=False)[0, 0].numpy()
    heat = colormaps["jet"](np.clip(sal, 0, 1))[..., :3]
    grey = np.repeat(np.clip(frame, 0, 1)[..., None], 3, axis=-1)
    out = (1 - alpha) * grey + alpha * heat
    return np.rint(out * 255).astype(np.uint8)


def render_overlay(saliency: np.ndarray, frame: np.ndarray, out_path: str | os.PathLike, alpha: float = 0.4) -> Path:
    from PIL import Image

    out_path = Path(out_path)
    Image.fromarray(jet_overlay(saliency, frame, alpha)).save(out_path, format="PNG", optimize=False)
    return out_path


def render_batch(smap: SaliencyMap, frames: Sequence[np.ndarray], out_dir: str | os.PathLike, stem: str = "gradcam", alpha: float = 0.4) -> list[Path]:
    """One PNG per (map, frame) pair, named ``<stem>_<index>.png``."""
    if len(smap.values) != len(frames):
        raise ValueError(f"{len(smap.values)} maps for {len(frames)} frames")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    width = max(2, len(str(len(frames) - 1)))
    return [
        render_overlay(v, f, out_dir / f"{stem}_{i:0{width}d}.png", alpha)
        for i, (v, f) in enumerate(zip(smap.values, frames))
    ]


def region_mass(saliency: np.ndarray, void_mask: np.ndarray) -> dict[str, float]:
    """Saliency mass in zero-filled (void) regions versus the rest of the frame."""
    sal = np.asarray(saliency, dtype=np.float64)
    void = np.asarray(void_mask, dtype=bool)
    total = sal.sum()
    interior = ~void
    return {
        "void_area_fraction": float(void.mean()),
        "void_mass_fraction": float(sal[void].sum() / total) if total > 0 else 0.0,
        "void_mean": float(sal[void].mean()) if void.any() else 0.0,
        "interior_mean": float(sal[interior].mean()) if interior.any() else 0.0,
    }
