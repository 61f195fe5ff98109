import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ovseg.core import (
    BinaryMask,
    ClassInfo,
    FormatError,
    PanopticMap,
    RleMask,
    Taxonomy,
    ValidationError,
    normalize_name,
    panoptic_to_masks,
    resample_nearest,
    rle_decode,
    rle_encode,
    split_synonyms,
    taxonomy_split,
    validate_panoptic,
)


# --- RLE ---------------------------------------------------------------------

def test_rle_all_zero():
    assert rle_encode(BinaryMask(np.zeros((2, 2), bool))).runs == (4,)


def test_rle_all_one():
    assert rle_encode(BinaryMask(np.ones((2, 2), bool))).runs == (0, 4)


def test_rle_row_major_0110():
    m = BinaryMask.from_flat(4, 1, [0, 1, 1, 0])
    assert rle_encode(m).runs == (1, 2, 1)


def test_rle_decode_examples():
    assert rle_decode(RleMask(2, 2, (4,))) == BinaryMask(np.zeros((2, 2), bool))
    assert rle_decode(RleMask(2, 2, (0, 4))) == BinaryMask(np.ones((2, 2), bool))
    assert rle_decode(RleMask(4, 1, (1, 2, 1))).bits.ravel().tolist() == [False, True, True, False]


def test_rle_decode_sum_mismatch_names_counts():
    with pytest.raises(FormatError, match="expected 4 .* got 5"):
        rle_decode(RleMask(2, 2, (2, 3)))


def test_rle_rejects_interior_zero_run():
    with pytest.raises(ValidationError):
        RleMask(2, 2, (1, 0, 3))


def _runs_by_hand(flat):
    # independent reference: walk the pixels
    runs, cur, n = [], 0, 0
    for b in flat:
        if b == cur:
            n += 1
        else:
            runs.append(n)
            cur, n = b, 1
    runs.append(n)
    return tuple(runs)


def test_rle_exhaustive_small_masks():
    shapes = sorted({(h, w) for h in range(1, 13) for w in range(1, 13) if h * w <= 12})
    count = 0
    for h, w in shapes:
        n = h * w
        for code in range(2**n):
            flat = [(code >> i) & 1 for i in range(n)]
            m = BinaryMask.from_flat(w, h, flat)
            rle = rle_encode(m)
            assert rle.runs == _runs_by_hand(flat)
            assert sum(rle.runs) == n
            assert rle_decode(rle) == m
            count += 1
    assert count > 20000


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(bool, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=40)))
def test_rle_roundtrip_random(bits):
    m = BinaryMask(bits)
    rle = rle_encode(m)
    assert sum(rle.runs) == bits.size
    assert all(r > 0 for r in rle.runs[1:])
    assert rle_decode(rle) == m


# --- panoptic maps -----------------------------------------------------------

def test_single_segment_full_mask():
    pm = PanopticMap(np.full((3, 4), 7), ((7, 2),))
    (mask, cls), = panoptic_to_masks(pm)
    assert cls == 2 and mask.bits.all()


def test_all_void_gives_no_masks():
    assert panoptic_to_masks(PanopticMap.void_map(3, 3)) == []


def test_checkerboard_masks_disjoint_and_cover():
    ids = (np.indices((5, 6)).sum(axis=0) % 2) + 1
    masks = panoptic_to_masks(PanopticMap(ids, ((1, 0), (2, 1))))
    a, b = masks[0][0].bits, masks[1][0].bits
    for y, x in itertools.product(range(5), range(6)):
        assert a[y, x] != b[y, x]
    assert (a | b).all()


def test_orphan_ids_listed():
    ids = np.array([[1, 2], [3, 0]])
    with pytest.raises(ValidationError, match=r"\[2, 3\]"):
        validate_panoptic(ids, [(1, 0)])


def test_unused_table_entry_and_duplicates_rejected():
    with pytest.raises(ValidationError, match="absent"):
        PanopticMap(np.ones((2, 2), int), ((1, 0), (5, 1)))
    with pytest.raises(ValidationError, match="duplicate"):
        PanopticMap(np.ones((2, 2), int), ((1, 0), (1, 1)))


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.int64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=12),
                  elements=st.integers(0, 5)))
def test_masks_partition_nonzero_raster(ids):
    segs = tuple((int(s), int(s) % 3) for s in np.unique(ids) if s)
    masks = panoptic_to_masks(PanopticMap(ids, segs))
    total = np.zeros(ids.shape, int)
    for m, _ in masks:
        total += m.bits
    assert total.max(initial=0) <= 1
    assert np.array_equal(total.astype(bool), ids != 0)


def test_from_masks_rejects_overlap():
    a = np.ones((2, 2), bool)
    with pytest.raises(ValidationError):
        PanopticMap.from_masks([(a, 0), (a, 1)], (2, 2))


# --- taxonomy ----------------------------------------------------------------

def test_normalization():
    assert normalize_name("  Sign   Board ") == "sign board"
    assert split_synonyms("signboard, sign") == ["signboard", "sign"]


def test_duplicate_names_after_normalization():
    with pytest.raises(ValidationError):
        Taxonomy((ClassInfo("Car"), ClassInfo(" car ")))


def test_split_self_all_seen():
    t = Taxonomy((ClassInfo("a"), ClassInfo("b"), ClassInfo("c")))
    assert taxonomy_split(t, t) == ((0, 1, 2), ())


def test_split_disjoint_all_unseen():
    train = Taxonomy((ClassInfo("a"),))
    test = Taxonomy((ClassInfo("b"), ClassInfo("c")))
    assert taxonomy_split(train, test) == ((), (0, 1))


def test_split_synonym_match():
    train = Taxonomy((ClassInfo("traffic sign", synonyms=("sign",)),))
    test = Taxonomy((ClassInfo("signboard, sign"), ClassInfo("tree")))
    assert taxonomy_split(train, test) == ((0,), (1,))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["a", "b", "c", "d", "e"]), min_size=1, max_size=3, unique=True),
       st.lists(st.sampled_from(["a", "b", "c", "d", "e"]), min_size=1, max_size=3, unique=True))
def test_split_membership_symmetric(xs, ys):
    # class x is seen against y's taxonomy iff y is seen against x's
    for x, y in itertools.product(xs, ys):
        tx, ty = Taxonomy((ClassInfo(x),)), Taxonomy((ClassInfo(y),))
        assert bool(taxonomy_split(tx, ty)[0]) == bool(taxonomy_split(ty, tx)[0])


def test_split_is_exact_partition():
    t = Taxonomy((ClassInfo("a"), ClassInfo("b"), ClassInfo("c")), frozenset({0}))
    assert t.unseen == frozenset({1, 2})
    assert t.seen_vector().tolist() == [True, False, False]


def test_taxonomy_json_roundtrip_and_bare_list():
    t = Taxonomy((ClassInfo("a", ("x",)), ClassInfo("b", (), False)), frozenset({1}))
    assert Taxonomy.from_json(t.to_json()) == t
    bare = Taxonomy.from_json([{"name": "a"}, {"name": "b", "is_thing": False}])
    assert bare.seen is None and bare.thing_vector().tolist() == [True, False]


def test_seen_out_of_range():
    with pytest.raises(ValidationError):
        Taxonomy((ClassInfo("a"),), frozenset({3}))


def test_resample_nearest_floor_rule():
    src = np.arange(16).reshape(4, 4)
    out = resample_nearest(src, (2, 2))
    assert out.tolist() == [[0, 2], [8, 10]]
    assert resample_nearest(src, (4, 4)) is src
