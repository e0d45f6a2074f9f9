from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from personinsert.semantics import (
    EmptyForeground,
    SemanticMap,
    TaxonomyMismatch,
    build_context_pair,
    center_crop_resize,
    from_heatmap,
    get_reduction,
    get_taxonomy,
    invert_placement,
    load_map,
    merge_persons,
    read_pair_manifest,
    reduce_labels,
    resize_pad,
    save_map,
    to_heatmap,
    write_pair_manifest,
    PairRecord,
)

MHP = get_taxonomy("mhp")
S1 = get_taxonomy("stage1")
S3 = get_taxonomy("stage3")


def smap(arr, tax=S3):
    return SemanticMap(np.asarray(arr, dtype=np.uint8), tax)


def test_taxonomy_sizes():
    assert MHP.group_count == 19
    assert S1.group_count == 8
    assert S3.group_count == 7
    assert get_taxonomy("deepfashion").group_count == 16
    for t in (MHP, S1, S3):
        assert t.group_names[0] == "background"


def test_stage1_names_in_order():
    assert S1.group_names == ("background", "hair", "face", "torso_arms",
                              "upper_wear", "lower_wear", "legs", "shoes")


def test_mhp_reduction_examples():
    table = get_reduction("mhp->stage1")
    assert table.mapping[16] == 0  # bag -> background
    assert table.mapping[0] == 0
    out = reduce_labels(smap([[11, 2], [14, 9]], MHP), table)
    np.testing.assert_array_equal(out.labels, [[2, 1], [3, 7]])
    assert out.taxonomy == S1


def test_mhp_reduction_full_table():
    # merge list: bg+bag, hair, face, arms+torso skin, hat+sunglasses+upper+dress+scarf,
    # skirt+pants+belt, legs, shoes
    expected = [0, 4, 1, 4, 4, 5, 5, 4, 5, 7, 7, 2, 6, 6, 3, 3, 0, 4, 3]
    assert list(get_reduction("mhp->stage1").mapping) == expected


def test_deepfashion_reduction_full_table():
    # bg, top, outer, skirt, dress, pants, leggings, headwear, eyeglass, neckwear,
    # belt, footwear, bag, hair, face, skin
    expected = [0, 4, 4, 5, 4, 5, 6, 1, 2, 3, 5, 6, 0, 1, 2, 3]
    assert list(get_reduction("deepfashion->stage3").mapping) == expected


def test_reduce_rejects_wrong_taxonomy():
    with pytest.raises(TaxonomyMismatch):
        reduce_labels(smap([[1]], S1), get_reduction("mhp->stage1"))


def test_reduce_identity_idempotent():
    from personinsert.semantics import ReductionTable
    ident = ReductionTable(S3, S3, tuple(range(7)))
    m = smap(np.random.default_rng(0).integers(0, 7, (9, 5)))
    once = reduce_labels(m, ident)
    assert once == m
    assert reduce_labels(once, ident) == once


def test_semantic_map_validates_range():
    with pytest.raises(ValueError):
        smap([[7]], S3)


def _oracle_fit(h, w, side):
    scale = Fraction(side, max(h, w))
    nh, nw = int(h * scale), int(w * scale)  # int() floors positive fractions
    return nh, nw, (side - nw) // 2, side - nw - (side - nw) // 2, (side - nh) // 2


def test_resize_pad_600x400():
    m = smap(np.ones((600, 400)))
    out, rec = resize_pad(m, 368)
    nh, nw, pl, pr, pt = _oracle_fit(600, 400, 368)
    assert (nh, nw, pl, pr, pt) == (368, 245, 61, 62, 0)
    assert out.shape == (368, 368)
    cols = np.flatnonzero(out.labels.any(axis=0))
    assert cols[0] == 61 and 368 - 1 - cols[-1] == 62
    assert rec.pad_left == 61 and rec.pad_top == 0
    assert rec.scale == pytest.approx(368 / 600)
    assert rec.content_size == (368, 245)


def test_resize_pad_identity():
    rng = np.random.default_rng(1)
    m = smap(rng.integers(0, 7, (368, 368)))
    out, rec = resize_pad(m, 368)
    assert out == m
    assert rec.scale == 1 and rec.pad_left == 0 and rec.pad_top == 0


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 60), w=st.integers(1, 60), side=st.integers(1, 80), seed=st.integers(0, 1000))
def test_resize_pad_properties(h, w, side, seed):
    rng = np.random.default_rng(seed)
    labels = rng.choice([0, 4], size=(h, w)) if seed % 2 else rng.integers(0, 7, (h, w))
    m = smap(labels)
    out, rec = resize_pad(m, side)
    assert out.shape == (side, side)
    assert set(np.unique(out.labels)) <= set(np.unique(labels)) | {0}
    nh, nw, pl, _, pt = _oracle_fit(h, w, side)
    assert rec.content_size == (max(nh, 1), max(nw, 1))
    assert (rec.pad_left, rec.pad_top) == (pl if nw else (side - 1) // 2, pt if nh else (side - 1) // 2)
    back = invert_placement(out.labels, rec)
    assert back.shape == (h, w)


def test_resize_pad_only_input_labels():
    rng = np.random.default_rng(2)
    for _ in range(50):
        h, w = rng.integers(1, 50, 2)
        labels = rng.choice([0, 4], size=(h, w))
        out, _ = resize_pad(smap(labels), int(rng.integers(1, 90)))
        assert set(np.unique(out.labels)) <= {0, 4}


def test_invert_placement_exact_when_upscaled_by_integer():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 7, (23, 17))
    out, rec = resize_pad(smap(labels), 46)
    np.testing.assert_array_equal(invert_placement(out.labels, rec), labels)


def test_center_crop_resize_geometry():
    labels = np.zeros((200, 200), np.uint8)
    labels[10:90, 10:50] = 3  # x in [10,50), y in [10,90)
    labels[40, 20] = 5
    out = center_crop_resize(smap(labels), 128)
    # oracle: square of side 80 centred on (30, 50), zero outside the map, NN-scaled to 128
    square = np.zeros((80, 80), np.uint8)
    for yy in range(80):
        for xx in range(80):
            sy, sx = 10 + yy, -10 + xx
            if 0 <= sy < 200 and 0 <= sx < 200:
                square[yy, xx] = labels[sy, sx]
    idx = [int((2 * j + 1) * 80 // 256) for j in range(128)]
    expected = square[np.ix_(idx, idx)]
    np.testing.assert_array_equal(out.labels, expected)


def test_center_crop_full_foreground_matches_resize_pad():
    rng = np.random.default_rng(4)
    labels = rng.integers(1, 7, (60, 40))
    assert center_crop_resize(smap(labels), 128) == resize_pad(smap(labels), 128)[0]


def test_center_crop_empty_raises():
    with pytest.raises(EmptyForeground):
        center_crop_resize(smap(np.zeros((10, 10))), 128)


def test_to_heatmap_examples():
    labels = np.zeros((4, 4), np.uint8)
    labels[1, 2] = 4
    hm = to_heatmap(smap(labels))
    assert hm.channels.shape == (6, 4, 4)
    assert hm.channels[3, 1, 2] == 1
    assert hm.channels[:, 1, 2].sum() == 1
    assert to_heatmap(smap(np.zeros((3, 3)))).channels.sum() == 0


def test_to_heatmap_rejects_stage1():
    with pytest.raises(TaxonomyMismatch):
        to_heatmap(smap([[1]], S1))


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 16), st.integers(1, 16)), elements=st.integers(0, 6)))
def test_heatmap_roundtrip(labels):
    m = smap(labels)
    hm = to_heatmap(m)
    assert set(np.unique(hm.channels.sum(axis=0))) <= {0, 1}
    assert from_heatmap(hm) == m


def _person(shape, box, label):
    a = np.zeros(shape, np.uint8)
    x, y, w, h = box
    a[y:y + h, x:x + w] = label
    return smap(a, S1)


def test_context_pair_three_persons():
    persons = [_person((20, 30), (0, 0, 5, 5), 1), _person((20, 30), (10, 0, 5, 5), 2),
               _person((20, 30), (20, 0, 5, 5), 3)]
    ctx, tgt = build_context_pair(persons, 1)
    assert set(np.unique(ctx.labels)) == {0, 1, 3}
    assert tgt == persons[1]


def test_context_pair_partition():
    persons = [_person((20, 30), (0, 0, 5, 5), 1), _person((20, 30), (10, 3, 6, 9), 6)]
    ctx, tgt = build_context_pair(persons, 0)
    full = merge_persons(persons)
    np.testing.assert_array_equal(ctx.foreground() | tgt.foreground(), full.foreground())


def test_context_pair_overlap_later_wins():
    rng = np.random.default_rng(5)
    persons = []
    for k in range(4):
        a = np.where(rng.random((12, 12)) < 0.4, rng.integers(1, 8), 0).astype(np.uint8)
        persons.append(smap(a, S1))
    ctx, _ = build_context_pair(persons, 2)
    # pixelwise replay of the stacking order
    expected = np.zeros((12, 12), np.uint8)
    for k in (0, 1, 3):
        for y in range(12):
            for x in range(12):
                if persons[k].labels[y, x]:
                    expected[y, x] = persons[k].labels[y, x]
    np.testing.assert_array_equal(ctx.labels, expected)


def test_context_pair_single_person_rejected():
    with pytest.raises(ValueError):
        build_context_pair([_person((4, 4), (0, 0, 2, 2), 1)], 0)


def test_map_png_roundtrip(tmp_path):
    m = smap(np.random.default_rng(6).integers(0, 7, (13, 21)))
    save_map(m, tmp_path / "m.png")
    assert load_map(tmp_path / "m.png", "stage3") == m


def test_pair_manifest_roundtrip(tmp_path):
    recs = [PairRecord("s1", 0, 7), PairRecord("s2", 2, 9, {"n_persons": 3})]
    write_pair_manifest(recs, tmp_path / "p.jsonl")
    back = read_pair_manifest(tmp_path / "p.jsonl")
    assert [(r.scene_id, r.target_index, r.seed, r.extra) for r in back] == \
        [("s1", 0, 7, {}), ("s2", 2, 9, {"n_persons": 3})]
