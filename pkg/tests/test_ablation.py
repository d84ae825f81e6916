import math

import numpy as np
import pytest

from skid.ablation import (
    AUGMENTATION_CASES,
    FIELDS,
    SweepSettings,
    augmentation_sweep,
    class_count_sweep,
    label_efficiency_sweep,
    read_rows,
    subset_clips,
    write_rows,
)
from skid.datakit import SyntheticSpec, synthetic_clips
from skid.skidnet import DownstreamConfig, SkidConfig, build_encoder
from skid.trainkit import DownstreamTrainConfig, PretextTrainConfig

SPEC = SyntheticSpec(frame_size=192, frames_min=3, frames_max=4, label_rates=(0.5, 0.3, 0.3))


@pytest.fixture(scope="module")
def data():
    return synthetic_clips(10, SPEC, seed=0), synthetic_clips(6, SPEC, seed=1)


def tiny():
    return SweepSettings(
        skid=SkidConfig.miniature(4),
        pretext=PretextTrainConfig(lr=1e-3, max_epochs=1, batch_size=8),
        downstream=DownstreamTrainConfig(lr=1e-3, max_epochs=1, frames_per_clip=3, eval_repeats=1, batch_size=4),
        head=DownstreamConfig(channels=4),
    )


def test_subset_clips_counts():
    clips = synthetic_clips(20, SyntheticSpec(frame_size=64, frames_min=1, frames_max=1, label_rates=(0.5, 0.2, 0.3)), seed=0)
    sub = subset_clips(clips, 0.5, seed=1)
    assert len(sub) == 10
    assert np.all(np.array([c.labels for c in sub]).sum(axis=0) >= 1)


def test_label_efficiency_rows(data):
    rows = label_efficiency_sweep(*data, build_encoder(SkidConfig.miniature(4)), tiny(), fractions=(0.5, 1.0))
    assert [r["case"] for r in rows] == ["50%"] * 4 + ["100%"] * 4
    assert {r["class"] for r in rows} == {"abn", "acl", "men", "average"}


def test_class_count_sweep_and_csv(data, tmp_path):
    rows = class_count_sweep(*data, tiny(), ks=(500, 1000), out_dir=tmp_path / "runs")
    stages = [(r["case"], r["stage"]) for r in rows]
    assert ("K=500", "pretext") in stages and ("K=1000", "downstream") in stages
    path = write_rows(rows, tmp_path / "k.csv")
    assert path.read_text().splitlines()[0] == ",".join(FIELDS)
    back = read_rows(path)
    assert len(back) == len(rows)
    assert all(0 <= r["accuracy"] <= 1 for r in back)
    assert (tmp_path / "runs" / "K=500" / "pretext.npz").exists()


def test_augmentation_sweep_cases(data):
    cases = {k: AUGMENTATION_CASES[k] for k in ("all", "none")}
    rows = augmentation_sweep(*data, tiny(), cases=cases, k=10)
    assert {r["case"] for r in rows} == {"all", "none"}
    pre = [r for r in rows if r["stage"] == "pretext"]
    assert len(pre) == 2 and all(math.isnan(r["auc"]) for r in pre)
