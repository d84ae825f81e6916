import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skid.arrangements import (
    Arrangement,
    ArrangementFormatError,
    ArrangementSet,
    apply_arrangement,
    generate_arrangement_set,
    invert_arrangement,
    load_set,
    save_set,
)


def test_nine_patch_set_is_distinct_bijections():
    aset = generate_arrangement_set(9, 1000, seed=3)
    assert len(aset) == 1000
    assert math.factorial(9) == 362_880
    perms = {a.perm for a in aset.arrangements}
    assert len(perms) == 1000
    for p in perms:
        assert sorted(p) == list(range(9))


def test_four_patch_exhaustive():
    aset = generate_arrangement_set(4, 24, seed=0)
    assert sorted(a.perm for a in aset.arrangements) == sorted(
        tuple(p) for p in __import__("itertools").permutations(range(4))
    )


def test_deterministic_under_seed(tmp_path):
    a, b = generate_arrangement_set(9, 1000, 7), generate_arrangement_set(9, 1000, 7)
    save_set(a, tmp_path / "a.txt")
    save_set(b, tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    assert generate_arrangement_set(9, 50, 8) != generate_arrangement_set(9, 50, 7)


@pytest.mark.parametrize("n,k", [(9, 0), (4, 25), (8, 3), (3, 1)])
def test_invalid_arguments(n, k):
    with pytest.raises(ValueError):
        generate_arrangement_set(n, k, 0)


def test_apply_identity_and_swap():
    items = ["P0", "P1", "P2", "P3"]
    assert apply_arrangement(items, Arrangement.identity(4)) == items
    assert apply_arrangement(["P0", "P1"], Arrangement((1, 0))) == ["P1", "P0"]


def test_apply_places_source_at_destination_slot():
    a = Arrangement((2, 0, 1))
    out = apply_arrangement(["a", "b", "c"], a)
    # source 0 -> slot 2, source 1 -> slot 0, source 2 -> slot 1
    assert out == ["b", "c", "a"]


def test_apply_length_mismatch():
    with pytest.raises(ValueError):
        apply_arrangement([1, 2, 3], Arrangement.identity(4))


def test_apply_array_does_not_touch_pixels():
    patches = np.random.default_rng(0).random((9, 4, 4))
    a = generate_arrangement_set(9, 1, 5)[0]
    out = apply_arrangement(patches, a)
    for i, dst in enumerate(a.perm):
        assert np.array_equal(out[dst], patches[i])


def test_invert_examples():
    assert invert_arrangement(Arrangement.identity(5)) == Arrangement.identity(5)
    assert invert_arrangement(Arrangement((2, 0, 1))) == Arrangement((1, 2, 0))
    # composition check: inv[perm[i]] == i
    inv = invert_arrangement(Arrangement((2, 0, 1))).perm
    assert [inv[d] for d in (2, 0, 1)] == [0, 1, 2]


def test_apply_then_inverse_100_random():
    rng = np.random.default_rng(11)
    items = list(range(9))
    for _ in range(100):
        a = Arrangement(tuple(rng.permutation(9)))
        inv = invert_arrangement(a)
        # oracle: explicit composition of permutations
        assert all(inv.perm[a.perm[i]] == i for i in range(9))
        assert apply_arrangement(apply_arrangement(items, a), inv) == items


@settings(max_examples=60, deadline=None)
@given(st.sampled_from([4, 9, 16]).flatmap(lambda n: st.permutations(list(range(n)))))
def test_apply_invert_roundtrip_property(perm):
    a = Arrangement(tuple(perm))
    items = [f"p{i}" for i in range(len(perm))]
    assert apply_arrangement(apply_arrangement(items, a), invert_arrangement(a)) == items
    assert apply_arrangement(apply_arrangement(items, invert_arrangement(a)), a) == items


def test_uniformity_smoke_over_seeds():
    m, k = 400, 6
    counts = {}
    for seed in range(m):
        for a in generate_arrangement_set(4, k, seed).arrangements:
            counts[a.perm] = counts.get(a.perm, 0) + 1
    n = m * k
    p = 1 / 24
    sigma = math.sqrt(n * p * (1 - p))
    assert len(counts) == 24
    for c in counts.values():
        assert abs(c - n * p) <= 5 * sigma


def test_save_load_roundtrip(tmp_path):
    aset = generate_arrangement_set(9, 100, 42)
    path = tmp_path / "arr.txt"
    save_set(aset, path)
    back = load_set(path)
    assert back == aset
    assert back.seed == 42
    assert [back.index(a) for a in aset.arrangements] == list(range(100))
    assert path.read_text().splitlines()[0] == "SKIDARR v1 N=9 K=100 SEED=42"


def test_truncated_file_is_rejected(tmp_path):
    aset = generate_arrangement_set(9, 10, 1)
    path = tmp_path / "arr.txt"
    save_set(aset, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:6]) + "\n")
    with pytest.raises(ArrangementFormatError):
        load_set(path)
    path.write_text("\n".join(lines[:-1]) + "\n" + lines[-1][:3] + "\n")
    with pytest.raises(ArrangementFormatError):
        load_set(path)


@pytest.mark.parametrize(
    "text",
    [
        "",
        "GARBAGE\n",
        "SKIDARR v1 N=9 K=1\n0,1,2\n",
        "SKIDARR v1 N=4 K=2 SEED=0\n0,1,2,3\n0,1,2,3\n",
        "SKIDARR v1 N=4 K=1 SEED=0\n0,1,1,3\n",
        "SKIDARR v1 N=4 K=1 SEED=x\n0,1,2,3\n",
    ],
)
def test_malformed_files(tmp_path, text):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(ArrangementFormatError):
        load_set(path)


def test_pipeline_patch_count_mismatch(tmp_path):
    save_set(generate_arrangement_set(4, 24, 0), tmp_path / "four.txt")
    aset = load_set(tmp_path / "four.txt")
    with pytest.raises(ArrangementFormatError, match="N=4"):
        aset.require_patches(9)


def test_set_rejects_duplicates():
    a = Arrangement.identity(4)
    with pytest.raises(ValueError):
        ArrangementSet(4, (a, a), 0)
