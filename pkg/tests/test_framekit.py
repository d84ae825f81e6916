import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skid.arrangements import Arrangement, ArrangementSet, generate_arrangement_set, invert_arrangement, apply_arrangement
from skid.framekit import (
    AugmentParams,
    AugmentationSpec,
    Frame,
    GeoTransform,
    apply_augment_params,
    apply_geo_transform,
    augment_patch,
    awgn_noise,
    canonical_patches,
    crop64,
    crop_origin,
    enumerate_geo_transforms,
    geo_class_id,
    geo_void_mask,
    partition_frame,
    prepfram,
    validation_sample,
)

from oracles import recover_perm_from_means


def cell_coded_frame(side=256, n=9):
    """Frame whose cell i is the constant i/n."""
    g = int(math.isqrt(n))
    c = side // g
    f = np.zeros((side, side))
    for i in range(n):
        f[(i // g) * c:(i // g + 1) * c, (i % g) * c:(i % g + 1) * c] = i / n
    return f


def test_partition_85():
    parts = partition_frame(np.random.default_rng(0).random((256, 256)), 9)
    assert len(parts) == 9
    assert all(p.shape == (85, 85) for p in parts)


def test_partition_row_major_and_trailing_dropped():
    f = np.arange(256 * 256, dtype=float).reshape(256, 256)
    parts = partition_frame(f, 9)
    assert parts[0][0, 0] == f[0, 0]
    assert parts[1][0, 0] == f[0, 85]
    assert parts[3][0, 0] == f[85, 0]
    assert parts[8][-1, -1] == f[254, 254]  # row/col 255 discarded


def test_partition_192_gives_64():
    parts = partition_frame(np.zeros((192, 192)), 9)
    assert all(p.shape == (64, 64) for p in parts)


def test_partition_uniform_frame_identical_parts():
    parts = partition_frame(np.full((256, 256), 0.3), 9)
    assert all(np.array_equal(parts[0], p) for p in parts)


def test_partition_rejects_small_frame():
    with pytest.raises(ValueError):
        partition_frame(np.zeros((191, 191)), 9)


def test_frame_type_invariants():
    Frame(np.zeros((8, 8)), "axial")
    with pytest.raises(ValueError):
        Frame(np.zeros((8, 9)))
    with pytest.raises(ValueError):
        Frame(np.full((8, 8), 1.5))


def test_augment_disabled_is_identity():
    p = np.random.default_rng(1).random((85, 85))
    out = augment_patch(p, AugmentationSpec.disabled(), np.random.default_rng(0))
    assert np.array_equal(out, p)


def test_shift_moves_single_pixel():
    p = np.zeros((85, 85))
    p[10, 10] = 1.0
    out = apply_augment_params(p, AugmentParams(shift=(8, 0)))
    expected = np.zeros_like(p)
    expected[18, 10] = 1.0
    assert np.array_equal(out, expected)


def test_shift_vacated_area_zero():
    p = np.ones((85, 85))
    out = apply_augment_params(p, AugmentParams(shift=(8, -5)))
    assert np.all(out[:8] == 0) and np.all(out[:, -5:] == 0)
    assert np.all(out[8:, :-5] == 1)


def test_scale_magnifies_about_centre():
    r, c = np.mgrid[0:85, 0:85].astype(float)
    ramp = 0.01 * r + 0.001 * c  # bilinear sampling of a linear image is exact
    out = apply_augment_params(ramp, AugmentParams(scale=1.2))
    assert out.shape == (85, 85)
    centre = 42.0
    for rr, cc in [(0, 0), (0, 84), (84, 0), (84, 84), (42, 42), (20, 60)]:
        src_r = centre + (rr - centre) / 1.2
        src_c = centre + (cc - centre) / 1.2
        assert out[rr, cc] == pytest.approx(0.01 * src_r + 0.001 * src_c, abs=1e-9)


def test_rotation_keeps_size_and_zero_fills_corners():
    p = np.ones((85, 85))
    out = apply_augment_params(p, AugmentParams(angle=15))
    assert out.shape == p.shape
    assert out[0, 0] == 0 and out[42, 42] == pytest.approx(1.0)


def test_augment_parameter_ranges():
    spec = AugmentationSpec()
    rng = np.random.default_rng(0)
    from skid.framekit import draw_augment_params

    draws = [draw_augment_params(85, spec, rng) for _ in range(2000)]
    shifts = np.array([d.shift for d in draws])
    assert shifts.min() == -8 and shifts.max() == 8
    angles = np.array([d.angle for d in draws])
    assert angles.min() >= -15 and angles.max() <= 15
    assert {d.scale for d in draws} == {1.0, 1.2}


def test_crop_origin_range_85():
    rng = np.random.default_rng(0)
    origins = np.array([crop_origin(85, rng) for _ in range(3000)])
    assert origins.min() == 0 and origins.max() == 21


def test_crop_degenerate_64():
    p = np.random.default_rng(0).random((64, 64))
    assert crop_origin(64, np.random.default_rng(3)) == (0, 0)
    assert np.array_equal(crop64(p, np.random.default_rng(3)), p)


def test_crop_too_small():
    with pytest.raises(ValueError):
        crop64(np.zeros((63, 63)), np.random.default_rng(0))


def test_crop_deterministic():
    p = np.random.default_rng(0).random((85, 85))
    a = crop64(p, np.random.default_rng(9))
    b = crop64(p, np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_prepfram_all_randomness_removed_gives_canonical_crops():
    f = np.random.default_rng(0).random((256, 256))
    aset = ArrangementSet(9, (Arrangement.identity(9),), 0)
    s = prepfram(f, aset, AugmentationSpec.disabled(), np.random.default_rng(1), label=0, center_crop=True)
    assert np.array_equal(s.patches, canonical_patches(f))
    assert all(o == (10, 10) for o in s.origins)


def test_prepfram_output_contract():
    aset = generate_arrangement_set(9, 100, 0)
    rng = np.random.default_rng(2)
    for _ in range(20):
        s = prepfram(rng.random((256, 256)), aset, AugmentationSpec(), rng)
        assert s.patches.shape == (9, 64, 64)
        assert s.patches.min() >= 0 and s.patches.max() <= 1
        assert 0 <= s.label < 100


def test_prepfram_reassembly_bit_exact():
    aset = generate_arrangement_set(9, 50, 0)
    rng = np.random.default_rng(5)
    f = rng.random((256, 256)).astype(np.float32)
    parts = partition_frame(f, 9)
    for _ in range(50):
        s = prepfram(f, aset, AugmentationSpec.disabled(), rng)
        restored = apply_arrangement(s.patches, invert_arrangement(aset[s.label]))
        for i, part in enumerate(parts):
            assert np.array_equal(restored[i], crop64(part, origin=s.origins[i]))


def test_prepfram_label_recovered_from_patch_means():
    aset = generate_arrangement_set(9, 1000, 1)
    f = cell_coded_frame()
    rng = np.random.default_rng(0)
    for _ in range(200):
        s = prepfram(f, aset, AugmentationSpec.disabled(), rng)
        assert aset.index(recover_perm_from_means(s.patches)) == s.label


def test_prepfram_label_histogram_uniform():
    k = 10
    aset = generate_arrangement_set(9, k, 0)
    f = np.zeros((192, 192), dtype=np.float32)
    rng = np.random.default_rng(123)
    n = 10_000
    labels = np.array([prepfram(f, aset, AugmentationSpec.disabled(), rng).label for _ in range(n)])
    counts = np.bincount(labels, minlength=k)
    sigma = math.sqrt(n / k * (1 - 1 / k))
    assert np.all(np.abs(counts - n / k) <= 5 * sigma)
    chi2 = ((counts - n / k) ** 2 / (n / k)).sum()
    from scipy.stats import chi2 as chi2_dist

    assert chi2_dist.sf(chi2, k - 1) > 1e-4


def test_prepfram_rejects_bad_label():
    aset = generate_arrangement_set(9, 5, 0)
    with pytest.raises(ValueError):
        prepfram(np.zeros((192, 192)), aset, AugmentationSpec.disabled(), np.random.default_rng(0), label=5)


def test_validation_sample_is_deterministic_apart_from_label():
    aset = generate_arrangement_set(9, 20, 0)
    f = np.random.default_rng(0).random((256, 256))
    a = validation_sample(f, aset, np.random.default_rng(1), label=3)
    b = validation_sample(f, aset, np.random.default_rng(2), label=3)
    assert np.array_equal(a.patches, b.patches)


def test_awgn_statistics():
    draws = awgn_noise(10 ** 6, np.random.default_rng(0))
    assert abs(draws.mean()) < 1e-3
    assert abs(draws.var() - 0.01) <= 0.05 * 0.01


# -- geometric transforms -----------------------------------------------------


def test_geo_has_54_entries():
    for side in (64, 192, 256, 1000):
        assert len(enumerate_geo_transforms(side)) == 54


def test_geo_shift_values_256():
    ts = enumerate_geo_transforms(256)
    assert {t.tx for t in ts} == {-25, 0, 25}
    assert {t.ty for t in ts} == {-25, 0, 25}


def test_geo_first_element_and_bijection():
    ts = enumerate_geo_transforms(256)
    t0 = ts[0]
    assert (t0.rot, t0.tx, t0.ty, t0.scale) == (-15.0, -25, -25, 1.0)
    tuples = {(t.rot, t.tx, t.ty, t.scale) for t in ts}
    assert len(tuples) == 54
    for t in ts:
        assert geo_class_id(ts, t.rot, t.tx, t.ty, t.scale) == t.class_id
    ids = [t.class_id for t in ts if (t.rot, t.tx, t.ty, t.scale) == (0.0, 0, 0, 1.0)]
    assert len(ids) == 1


def test_geo_identity():
    f = np.random.default_rng(0).random((256, 256))
    out = apply_geo_transform(f, GeoTransform(0.0, 0, 0, 1.0, -1))
    assert np.array_equal(out, f)


def test_geo_pure_translation_moves_pixel():
    f = np.zeros((256, 256))
    f[100, 50] = 1.0
    out = apply_geo_transform(f, GeoTransform(0.0, 25, -25, 1.0, -1))
    assert out[75, 75] == 1.0
    assert out.sum() == 1.0


def test_geo_rotation_changes_cross():
    f = np.zeros((256, 256))
    f[126:130, 64:192] = 1
    f[64:192, 126:130] = 1
    a = apply_geo_transform(f, GeoTransform(0.0, 0, 0, 1.0, -1)) > 0.5
    b = apply_geo_transform(f, GeoTransform(15.0, 0, 0, 1.0, -1)) > 0.5
    assert np.logical_xor(a, b).sum() > 0


def test_geo_void_mask():
    m = geo_void_mask(256, GeoTransform(0.0, 25, 0, 1.0, -1))
    assert m[:, :25].all() and not m[:, 25:].any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 53))
def test_geo_transform_keeps_shape_and_range(cid):
    f = np.random.default_rng(cid).random((192, 192))
    out = apply_geo_transform(f, enumerate_geo_transforms(192)[cid])
    assert out.shape == f.shape
    assert out.min() >= -1e-12 and out.max() <= 1 + 1e-12
