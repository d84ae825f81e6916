"""SKID encoder family, pretext head and downstream video heads (PyTorch).

Tensor layout is channels-first throughout: the encoder eats ``(B, N, 64, 64)``
patch stacks and emits ``(B, C, 4, 4)`` maps.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .framekit import PATCH, canonical_patch_index

VARIANTS = ("v1", "v2", "v3", "noblocks")

# (skip1_first, skip1_out, dimred1_out, skip2_first, skip2_out, dimred2_out)
_TABLE = {
    "v1": (512, 1024, 1024, 512, 1024, 4096),
    "v2": (512, 1024, 2048, 1024, 2048, 4096),
    "v3": (1024, 1024, 2048, 2048, 2048, 4096),
}


class ConfigError(ValueError):
    """Architecture configuration whose channel arithmetic does not close."""


@dataclass(frozen=True)
class SkidConfig:
    variant: str = "v3"
    branch_filters: int = 256
    onebyone_filters: int = 1024
    skip1_first: int = 1024
    skip1_out: int = 1024
    dimred1_out: int = 2048
    skip2_first: int = 2048
    skip2_out: int = 2048
    dimred2_out: int = 4096
    skip_scale: float = 0.25
    n_classes: int = 1000
    fc_width: int = 1024
    n_patches: int = 9
    patch_size: int = PATCH

    @classmethod
    def preset(cls, variant: str = "v3", **overrides) -> "SkidConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        base = _TABLE["v3" if variant == "noblocks" else variant]
        names = ("skip1_first", "skip1_out", "dimred1_out", "skip2_first", "skip2_out", "dimred2_out")
        cfg = cls(variant=variant, **dict(zip(names, base)))
        return replace(cfg, **overrides)

    @classmethod
    def miniature(cls, width: int = 8, n_classes: int = 10, variant: str = "v3", **overrides) -> "SkidConfig":
        """Same topology with every filter count scaled down to multiples of ``width``."""
        w = width
        cfg = cls(
            variant=variant, branch_filters=w, onebyone_filters=2 * w,
            skip1_first=2 * w, skip1_out=2 * w, dimred1_out=4 * w,
            skip2_first=4 * w, skip2_out=4 * w, dimred2_out=8 * w,
            n_classes=n_classes, fc_width=4 * w,
        )
        return replace(cfg, **overrides)

    @property
    def noblocks(self) -> bool:
        return self.variant == "noblocks"

    @property
    def out_channels(self) -> int:
        return self.onebyone_filters if self.noblocks else self.dimred2_out

    @property
    def out_side(self) -> int:
        return self.patch_size // 16

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.n_patches < 1 or int(self.n_patches ** 0.5) ** 2 != self.n_patches:
            raise ConfigError(f"n_patches must be a perfect square, got {self.n_patches}")
        if self.patch_size % 16:
            raise ConfigError(f"patch_size {self.patch_size} must be divisible by 16")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be positive")
        if self.noblocks:
            return
        if self.skip1_out != self.onebyone_filters:
            raise ConfigError(
                f"skip1: output {self.skip1_out} must equal its input {self.onebyone_filters}"
            )
        if self.dimred1_out % 2:
            raise ConfigError(f"dimred1: output {self.dimred1_out} must be even (two branches)")
        if self.skip2_out != self.dimred1_out:
            raise ConfigError(
                f"skip2: output {self.skip2_out} must equal its input {self.dimred1_out}"
            )
        if self.dimred2_out % 2:
            raise ConfigError(f"dimred2: output {self.dimred2_out} must be even (two branches)")


def _init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class SkipBlock(nn.Module):
    """y = x + scale * conv(relu(conv(x))), spatial size preserved."""

    def __init__(self, channels: int, first_filters: int, scale: float = 0.25, out_channels: int | None = None):
        super().__init__()
        if out_channels is not None and out_channels != channels:
            raise ConfigError(f"skip block: second conv width {out_channels} != input channels {channels}")
        self.conv1 = nn.Conv2d(channels, first_filters, 3, padding=1)
        self.conv2 = nn.Conv2d(first_filters, channels, 3, padding=1)
        self.scale = scale

    def residual(self, x):
        return self.conv2(F.relu(self.conv1(x)))

    def forward(self, x):
        return x + self.scale * self.residual(x)


class DimRedBlock(nn.Module):
    """Halve H and W: [conv3x3 -> conv3x3/2] concatenated with [avgpool2 -> conv1x1]."""

    def __init__(self, in_channels: int, out_channels: int | None = None):
        super().__init__()
        out_channels = 2 * in_channels if out_channels is None else out_channels
        if out_channels % 2:
            raise ConfigError(f"dimension reduction block: output width {out_channels} is odd")
        b = out_channels // 2
        self.up1 = nn.Conv2d(in_channels, b, 3, padding=1)
        self.up2 = nn.Conv2d(b, b, 3, stride=2, padding=1)
        self.low = nn.Conv2d(in_channels, b, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"dimension reduction needs even spatial dims, got {h}x{w}")
        upper = F.relu(self.up2(F.relu(self.up1(x))))
        lower = F.relu(self.low(F.avg_pool2d(x, 2)))
        return torch.cat([upper, lower], dim=1)


class SkidEncoder(nn.Module):
    def __init__(self, cfg: SkidConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        g, b = cfg.n_patches, cfg.branch_filters
        # one group per patch == independent, unshared branch weights
        self.branches = nn.Sequential(
            nn.Conv2d(g, g * b, 3, padding=1, groups=g), nn.ReLU(),
            nn.Conv2d(g * b, g * b, 3, padding=1, groups=g), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(g * b, g * b, 3, padding=1, groups=g), nn.ReLU(),
            nn.Conv2d(g * b, g * b, 3, padding=1, groups=g), nn.ReLU(),
            nn.MaxPool2d(2),
        )
        self.reduce = nn.Conv2d(g * b, cfg.onebyone_filters, 1)
        if cfg.noblocks:
            self.skip1 = nn.Identity()
            self.dimred1 = nn.AvgPool2d(2)
            self.skip2 = nn.Identity()
            self.dimred2 = nn.AvgPool2d(2)
        else:
            self.skip1 = SkipBlock(cfg.onebyone_filters, cfg.skip1_first, cfg.skip_scale, cfg.skip1_out)
            self.dimred1 = DimRedBlock(cfg.skip1_out, cfg.dimred1_out)
            self.skip2 = SkipBlock(cfg.dimred1_out, cfg.skip2_first, cfg.skip_scale, cfg.skip2_out)
            self.dimred2 = DimRedBlock(cfg.skip2_out, cfg.dimred2_out)
        _init(self)

    @property
    def out_channels(self) -> int:
        return self.cfg.out_channels

    def stages(self, x):
        """Yield (name, activation) down the trunk; the last one is the output."""
        n, p = self.cfg.n_patches, self.cfg.patch_size
        if x.shape[-3:] != (n, p, p):
            raise ValueError(f"expected (..., {n}, {p}, {p}) patches, got {tuple(x.shape)}")
        x = self.branches(x)
        yield "concat", x
        x = F.relu(self.reduce(x))
        yield "reduce", x
        for name in ("skip1", "dimred1", "skip2", "dimred2"):
            x = getattr(self, name)(x)
            yield name, x

    def forward(self, x):
        for _, x in self.stages(x):
            pass
        return x

    def shape_ladder(self, batch: int = 1) -> list[tuple[str, tuple[int, ...]]]:
        """Probe forward pass: (stage, (C, H, W)) for every trunk stage."""
        p = self.cfg.patch_size
        probe = torch.zeros(batch, self.cfg.n_patches, p, p)
        with torch.no_grad():
            return [(name, tuple(a.shape[1:])) for name, a in self.stages(probe)]


def build_encoder(cfg: SkidConfig) -> SkidEncoder:
    return SkidEncoder(cfg)


def build_noblocks_encoder(cfg: SkidConfig) -> SkidEncoder:
    return SkidEncoder(replace(cfg, variant="noblocks"))


class PretextModel(nn.Module):
    """Encoder -> global average pool -> FC(fc_width) -> FC(n_classes) logits."""

    def __init__(self, encoder: SkidEncoder, n_classes: int | None = None):
        super().__init__()
        cfg = encoder.cfg
        if n_classes is not None and n_classes != cfg.n_classes:
            cfg = replace(cfg, n_classes=n_classes)
            encoder.cfg = cfg
        self.cfg = cfg
        self.encoder = encoder
        self.fc1 = nn.Linear(encoder.out_channels, cfg.fc_width)
        self.fc2 = nn.Linear(cfg.fc_width, cfg.n_classes)
        _init(self.fc1)
        _init(self.fc2)

    def forward(self, patches):
        z = self.encoder(patches).mean(dim=(-2, -1))
        return self.fc2(F.relu(self.fc1(z)))


def build_pretext_head(encoder: SkidEncoder, n_classes: int | None = None) -> PretextModel:
    return PretextModel(encoder, n_classes)


def build_pretext_model(cfg: SkidConfig, seed: int | None = None) -> PretextModel:
    if seed is not None:
        torch.manual_seed(seed)
    return PretextModel(build_encoder(cfg))


# -- downstream ----------------------------------------------------------


@dataclass(frozen=True)
class DownstreamConfig:
    head: str = "convlstm"
    channels: int = 512
    layers: int = 2
    kernel: int = 3
    n_labels: int = 3
    encoder_frozen: bool = True
    in_channels: int | None = None  # must match the encoder when given


class ConvLSTMCell(nn.Module):
    def __init__(self, in_channels: int, hidden: int, kernel: int = 3):
        super().__init__()
        self.hidden = hidden
        self.gates = nn.Conv2d(in_channels + hidden, 4 * hidden, kernel, padding=kernel // 2)

    def forward(self, x, state):
        h, c = state
        i, f, o, g = self.gates(torch.cat([x, h], dim=1)).chunk(4, dim=1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


class ConvLSTM(nn.Module):
    """Stacked ConvLSTM over (B, T, C, H, W); returns the last layer's final hidden state."""

    def __init__(self, in_channels: int, hidden: int, layers: int = 2, kernel: int = 3):
        super().__init__()
        self.cells = nn.ModuleList(
            ConvLSTMCell(in_channels if i == 0 else hidden, hidden, kernel) for i in range(layers)
        )

    def forward(self, seq):
        b, t, _, hgt, wid = seq.shape
        xs = list(seq.unbind(1))
        for cell in self.cells:
            h = seq.new_zeros(b, cell.hidden, hgt, wid)
            c = torch.zeros_like(h)
            outs = []
            for x in xs:
                h, c = cell(x, (h, c))
                outs.append(h)
            xs = outs
        return xs[-1]


class Conv3dHead(nn.Module):
    def __init__(self, in_channels: int, hidden: int, layers: int = 2, kernel: int = 3):
        super().__init__()
        convs = []
        for i in range(layers):
            convs += [nn.Conv3d(in_channels if i == 0 else hidden, hidden, kernel, padding=kernel // 2), nn.ReLU()]
        self.convs = nn.Sequential(*convs)

    def forward(self, seq):
        # (B, T, C, H, W) -> (B, C, T, H, W)
        y = self.convs(seq.transpose(1, 2))
        return y.mean(dim=2)


class DownstreamModel(nn.Module):
    """Frame sequence (B, T, L, L) -> per-label sigmoid probabilities (B, n_labels).

    Each frame is cut into identity-order centre-cropped patches and passed
    through the (usually frozen) encoder; the per-frame maps form the
    sequence seen by the temporal head.
    """

    def __init__(self, encoder: SkidEncoder, cfg: DownstreamConfig = DownstreamConfig()):
        super().__init__()
        if cfg.in_channels is not None and cfg.in_channels != encoder.out_channels:
            raise ConfigError(
                f"head expects {cfg.in_channels} input channels, encoder emits {encoder.out_channels}"
            )
        if cfg.head not in ("convlstm", "cnn3d"):
            raise ConfigError(f"unknown head {cfg.head!r}")
        self.cfg = cfg
        self.encoder = encoder
        c = encoder.out_channels
        if cfg.head == "convlstm":
            self.temporal = ConvLSTM(c, cfg.channels, cfg.layers, cfg.kernel)
        else:
            self.temporal = Conv3dHead(c, cfg.channels, cfg.layers, cfg.kernel)
        self.fc = nn.Linear(cfg.channels, cfg.n_labels)
        _init(self.temporal)
        _init(self.fc)
        self._index_cache: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}
        if cfg.encoder_frozen:
            self.freeze_encoder()

    def freeze_encoder(self) -> None:
        for p in self.encoder.parameters():
            p.requires_grad_(False)

    @property
    def encoder_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.encoder.parameters())

    def train(self, mode: bool = True):
        super().train(mode)
        if self.encoder_frozen:
            self.encoder.eval()
        return self

    def patchify(self, frames):
        """(B, T, L, L) -> (B*T, N, 64, 64) canonical patches."""
        side = frames.shape[-1]
        if side not in self._index_cache:
            rows, cols = canonical_patch_index(side, self.encoder.cfg.n_patches)
            self._index_cache[side] = (torch.as_tensor(rows), torch.as_tensor(cols))
        rows, cols = self._index_cache[side]
        flat = frames.reshape(-1, side, side)
        return flat[:, rows, cols]

    def features(self, frames):
        b, t = frames.shape[:2]
        z = self.encoder(self.patchify(frames))
        return z.reshape(b, t, *z.shape[1:])

    def head_logits(self, feats):
        """Temporal head on precomputed (B, T, C, h, w) encoder maps."""
        h = self.temporal(feats)
        return self.fc(h.mean(dim=(-2, -1)))

    def logits(self, frames):
        return self.head_logits(self.features(frames))

    def forward(self, frames):
        return torch.sigmoid(self.logits(frames))

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def build_downstream_model(encoder: SkidEncoder, cfg: DownstreamConfig = DownstreamConfig()) -> DownstreamModel:
    return DownstreamModel(encoder, cfg)


def build_cnn3d_head(encoder: SkidEncoder, cfg: DownstreamConfig = DownstreamConfig()) -> DownstreamModel:
    return DownstreamModel(encoder, replace(cfg, head="cnn3d"))


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


# -- checkpoints ------------------------------------------------------------
#
# A checkpoint is an uncompressed .npz archive: one array per named parameter
# (state_dict keys) plus ``__meta__``, a 0-d unicode array holding a JSON
# object with at least {"kind": ..., "skid": {...SkidConfig}}.


def save_checkpoint(path: str | os.PathLike, model: nn.Module, meta: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    meta = dict(meta or {})
    if isinstance(model, PretextModel):
        meta.setdefault("kind", "pretext")
        meta["skid"] = asdict(model.cfg)
    elif isinstance(model, DownstreamModel):
        meta.setdefault("kind", "downstream")
        meta["skid"] = asdict(model.encoder.cfg)
        meta["downstream"] = asdict(model.cfg)
    elif isinstance(model, SkidEncoder):
        meta.setdefault("kind", "encoder")
        meta["skid"] = asdict(model.cfg)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npz")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


def read_checkpoint(path: str | os.PathLike) -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files if k != "__meta__"}
    return meta, state


def load_model(path: str | os.PathLike) -> nn.Module:
    """Rebuild whichever model a checkpoint holds and load its weights."""
    meta, state = read_checkpoint(path)
    skid = SkidConfig(**meta["skid"])
    kind = meta.get("kind")
    if kind == "encoder":
        model: nn.Module = SkidEncoder(skid)
    elif kind in ("pretext", "geo"):
        model = PretextModel(SkidEncoder(skid))
    elif kind == "downstream":
        model = DownstreamModel(SkidEncoder(skid), DownstreamConfig(**meta["downstream"]))
    else:
        raise ValueError(f"{path}: unknown checkpoint kind {kind!r}")
    model.load_state_dict(state)
    return model


def load_encoder(path: str | os.PathLike) -> SkidEncoder:
    model = load_model(path)
    if isinstance(model, SkidEncoder):
        return model
    return model.encoder
