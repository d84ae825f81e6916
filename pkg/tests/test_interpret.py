import numpy as np
import pytest
import torch
from PIL import Image
from torch import nn

from skid.framekit import GeoTransform, geo_void_mask
from skid.interpret import gradcam, jet_overlay, region_mass, render_batch, render_overlay, resolve_layer, tile_to_frame
from skid.skidnet import DownstreamConfig, SkidConfig, build_downstream_model, build_encoder, build_pretext_model


class ChannelMean(nn.Module):
    """Target logit = spatial mean of channel ``k`` of ``feat``'s output."""

    def __init__(self, k=1):
        super().__init__()
        self.feat = nn.Conv2d(1, 3, 3, padding=1)
        self.k = k

    def forward(self, x):
        a = self.feat(x)
        return a[:, self.k].mean(dim=(-2, -1))[:, None]


def test_single_channel_map_is_relu_of_activation():
    torch.manual_seed(0)
    m = ChannelMean(k=1)
    x = torch.randn(1, 1, 12, 12)
    smap = gradcam(m, x, target_class=0, layer="feat")
    act = m.feat(x)[0, 1].detach().numpy()
    expected = np.maximum(act, 0)
    expected = expected / expected.max()
    assert smap.values.shape == (1, 12, 12)
    assert np.allclose(smap.values[0], expected, atol=1e-5)
    assert not smap.all_zero


class BiasFree(nn.Module):
    def __init__(self):
        super().__init__()
        self.feat = nn.Conv2d(1, 2, 3, padding=1, bias=False)
        self.fc = nn.Linear(2, 1, bias=False)

    def forward(self, x):
        return self.fc(torch.relu(self.feat(x)).mean(dim=(-2, -1)))


def test_zero_input_flags_all_zero():
    smap = gradcam(BiasFree(), torch.zeros(1, 1, 8, 8), 0, layer="feat")
    assert smap.all_zero
    assert np.all(smap.values == 0)


def test_peak_lands_on_bright_cell():
    m = ChannelMean(k=0)
    with torch.no_grad():
        m.feat.weight.zero_()
        m.feat.weight[0, 0, 1, 1] = 1.0
        m.feat.bias.zero_()
    x = torch.zeros(1, 1, 30, 30)
    x[0, 0, 20:26, 3:9] = 1.0  # bottom-left cell of a 3x3 grid of 10px cells
    smap = gradcam(m, x, 0, layer="feat")
    r, c = np.unravel_index(np.argmax(smap.values[0]), (30, 30))
    assert (r // 10, c // 10) == (2, 0)


def test_unknown_layer():
    with pytest.raises(ValueError):
        resolve_layer(ChannelMean(), "nope")


def test_pretext_model_dimred2_map():
    torch.manual_seed(0)
    m = build_pretext_model(SkidConfig.miniature(4, n_classes=5), seed=0)
    x = torch.rand(1, 9, 64, 64)
    smap = gradcam(m, x, 2)
    assert smap.values.shape == (1, 64, 64)
    assert smap.raw.shape == (1, 4, 4)
    assert 0 <= smap.values.min() and smap.values.max() <= 1
    assert smap.source_layer == "dimred2"
    tiled = gradcam(m, x, 2, tiled_side=256)
    assert tiled.values.shape == (1, 256, 256)


def test_tile_to_frame_windows():
    maps = np.ones((1, 64, 64), np.float32)
    t = tile_to_frame(maps, 256)
    assert t.sum() == 9 * 64 * 64
    assert t[0, 0, 0] == 0 and t[0, 10, 10] == 1 and t[0, 73, 73] == 1 and t[0, 74, 74] == 0


def test_overlay_dimensions_and_blend(tmp_path):
    frame = np.random.default_rng(0).random((256, 256))
    sal = np.zeros((64, 64))
    img = jet_overlay(sal, frame, alpha=0.4)
    assert img.shape == (256, 256, 3) and img.dtype == np.uint8
    path = render_overlay(sal, frame, tmp_path / "o.png")
    with Image.open(path) as im:
        assert im.size == (256, 256) and im.mode == "RGB"


def test_video_model_gives_one_map_per_frame(tmp_path):
    torch.manual_seed(0)
    enc = build_encoder(SkidConfig.miniature(4))
    m = build_downstream_model(enc, DownstreamConfig(channels=4))
    frames = torch.rand(1, 16, 192, 192)
    smap = gradcam(m, frames, target_class=0, layer="dimred2")
    assert len(smap) == 16
    assert smap.values.shape == (16, 192, 192)
    files = render_batch(smap, frames[0].numpy(), tmp_path, stem="clip")
    assert len(files) == 16 and all(p.exists() for p in files)
    assert files[0].name == "clip_00.png"
    # the frozen encoder is left as it was
    assert all(p.grad is None for p in enc.parameters())


def test_render_batch_length_mismatch(tmp_path):
    smap = gradcam(ChannelMean(), torch.randn(1, 1, 8, 8), 0, layer="feat")
    with pytest.raises(ValueError):
        render_batch(smap, [np.zeros((8, 8))] * 2, tmp_path)


def test_region_mass():
    sal = np.zeros((4, 4))
    sal[0, 0] = 3.0
    sal[3, 3] = 1.0
    void = np.zeros((4, 4), bool)
    void[0] = True
    r = region_mass(sal, void)
    assert r["void_area_fraction"] == 0.25
    assert r["void_mass_fraction"] == 0.75
    assert r["void_mean"] == 0.75 and r["interior_mean"] == pytest.approx(1 / 12)
    m = geo_void_mask(64, GeoTransform(15.0, 6, 0, 1.0, -1))
    assert 0 < region_mass(np.ones((64, 64)), m)["void_area_fraction"] < 1
