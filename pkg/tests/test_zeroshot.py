import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovseg.core import BinaryMask, ClassInfo, PanopticMap, Taxonomy, ValidationError
from ovseg.metrics import pq_scores
from ovseg.testkit import gen_features, random_text_embeddings, synthetic_taxonomy
from ovseg.zeroshot import (
    DenseFeatureGrid,
    EmptyMaskError,
    TextEmbeddings,
    classify_gt_segments,
    classify_region,
    cosine_logits,
    mask_pool,
    segmentation_oracle_eval,
    softmax_temperature,
)

from conftest import rect


def test_pool_constant_field():
    v = np.array([0.3, -1.0, 2.0])
    grid = DenseFeatureGrid(np.broadcast_to(v, (4, 5, 3)))
    np.testing.assert_allclose(mask_pool(grid, rect(4, 5, 1, 3, 0, 2)), v)


def test_pool_single_and_two_pixels():
    vals = np.arange(4 * 4 * 2, dtype=float).reshape(4, 4, 2)
    grid = DenseFeatureGrid(vals)
    m = np.zeros((4, 4), bool)
    m[2, 3] = True
    np.testing.assert_array_equal(mask_pool(grid, BinaryMask(m)), vals[2, 3])
    m[0, 1] = True
    np.testing.assert_allclose(mask_pool(grid, m), (vals[2, 3] + vals[0, 1]) / 2)


def test_pool_resamples_mask_to_grid():
    vals = np.zeros((2, 2, 1))
    vals[1, 1] = 5.0
    grid = DenseFeatureGrid(vals)
    m = rect(4, 4, 2, 4, 2, 4)  # bottom-right quadrant lands on grid cell (1, 1)
    np.testing.assert_allclose(mask_pool(grid, m), [5.0])


def test_pool_empty_after_resampling():
    grid = DenseFeatureGrid(np.ones((2, 2, 1)))
    m = np.zeros((4, 4), bool)
    m[1, 1] = True  # grid samples rows/cols 0 and 2 only
    with pytest.raises(EmptyMaskError):
        mask_pool(grid, m)


def test_cosine_examples():
    texts = TextEmbeddings(np.eye(3))
    np.testing.assert_allclose(cosine_logits(np.array([0, 2.0, 0]), texts), [0, 1, 0])
    t2 = TextEmbeddings(np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    np.testing.assert_allclose(cosine_logits(np.array([0, 0, 1.0]), t2), [0, 0])
    np.testing.assert_allclose(cosine_logits(-t2.matrix[1], t2), [0, -1])


def test_cosine_zero_norm_errors():
    with pytest.raises(ValidationError, match="zero norm"):
        cosine_logits(np.zeros(2), TextEmbeddings(np.eye(2)))
    with pytest.raises(ValidationError, match="row 1"):
        TextEmbeddings(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_softmax_examples():
    np.testing.assert_allclose(softmax_temperature([0.2, 0.2, 0.2], 3.0), [1 / 3] * 3)
    np.testing.assert_allclose(softmax_temperature([1.0, 0.0], 1e-4), [1.0, 0.0], atol=1e-3)
    np.testing.assert_allclose(softmax_temperature([math.log(2), 0.0], 1.0), [2 / 3, 1 / 3], atol=1e-12)


def test_softmax_tau_positive():
    with pytest.raises(ValidationError):
        softmax_temperature([1.0], 0.0)


def test_classify_region_argmax():
    texts = TextEmbeddings(np.eye(3))
    grid = DenseFeatureGrid(np.broadcast_to([0.1, 0.0, 0.9], (3, 3, 3)))
    assert int(np.argmax(classify_region(grid, np.ones((3, 3), bool), texts))) == 2


# --- segmentation-oracle pipeline ------------------------------------------------

def _scene():
    tax = synthetic_taxonomy(4)
    ids = np.zeros((8, 8), int)
    ids[:, :4] = 3
    ids[:, 4:] = 6
    gt = PanopticMap(ids, ((3, 0), (6, 2)))
    return tax, gt, random_text_embeddings(4, 16, seed=7)


def test_aligned_features_score_one():
    tax, gt, texts = _scene()
    (r,) = segmentation_oracle_eval([gen_features(gt, texts, stride=2)], [gt], texts, 0.01, tax)
    assert pq_scores(r, tax).pq_all == 1.0


def test_swapped_texts_fn_cls():
    tax, gt, texts = _scene()
    feats = gen_features(gt, texts, stride=1, class_override={3: 2, 6: 0})
    (r,) = segmentation_oracle_eval([feats], [gt], texts, 0.01, tax)
    assert sorted(g for g, _ in r.fn_cls) == [3, 6] and r.fn_seg == () and not r.tp
    s = pq_scores(r, tax)
    assert s.per_class[0].pq == 0 and s.per_class[2].pq == 0


def test_single_segment_wrong_class():
    tax = Taxonomy((ClassInfo("a"), ClassInfo("b")))
    texts = TextEmbeddings(np.eye(2))
    gt = PanopticMap(np.ones((2, 2), int), ((1, 0),))
    grid = DenseFeatureGrid(np.broadcast_to([0.0, 1.0], (2, 2, 2)))
    (r,) = segmentation_oracle_eval([grid], [gt], texts, 0.01, tax)
    s = pq_scores(r, tax)
    assert s.per_class[0].pq == 0 and s.per_class[0].fn_cls == 1


def test_thin_segment_skipped_and_counted():
    tax = Taxonomy((ClassInfo("a"), ClassInfo("b")))
    texts = TextEmbeddings(np.eye(2))
    ids = np.ones((4, 4), int)
    ids[1, 1] = 2  # invisible on a 2x2 grid
    gt = PanopticMap(ids, ((1, 0), (2, 1)))
    grid = DenseFeatureGrid(np.broadcast_to([1.0, 0.0], (2, 2, 2)))
    (r,) = segmentation_oracle_eval([grid], [gt], texts, 0.01, tax)
    assert r.empty_mask_skips == 1 and r.fn_seg == (2,)
    pred, skipped = classify_gt_segments(grid, gt, texts)
    assert skipped == 1 and len(pred.segments) == len(gt.segments) - skipped


def test_pipeline_validates_inputs():
    tax, gt, texts = _scene()
    with pytest.raises(ValidationError):
        segmentation_oracle_eval([gen_features(gt, texts)], [gt], texts, 0.0, tax)
    with pytest.raises(ValidationError):
        segmentation_oracle_eval([gen_features(gt, texts)], [gt, gt], texts, 0.01, tax)


# --- properties ------------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_pool_ignores_outside_values(seed):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=(5, 6, 3))
    m = rng.random((5, 6)) < 0.4
    m[0, 0] = True
    other = vals.copy()
    other[~m] = rng.normal(size=((~m).sum(), 3))
    np.testing.assert_array_equal(mask_pool(DenseFeatureGrid(vals), m), mask_pool(DenseFeatureGrid(other), m))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.floats(1e-3, 1e3))
def test_cosine_scale_invariant(seed, k):
    rng = np.random.default_rng(seed)
    texts = TextEmbeddings(rng.normal(size=(5, 4)))
    e = rng.normal(size=4)
    np.testing.assert_allclose(cosine_logits(k * e, texts), cosine_logits(e, texts), atol=1e-6)
