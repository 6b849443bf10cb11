import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dodcnn import detection_layers
from dodcnn.boxes import Box
from dodcnn.detection_layers import (RoiBatch, batch_pool, channel_concat, roi_pool, roi_pool_many, roi_sampler,
                                     sample_order)
from dodcnn.tensor import DimensionError, Tensor, fully_connected, global_avg_pool, softmax_cross_entropy, tsum
from oracles import elementwise_max, subwindow_max, topk_sort_oracle


def test_roi_pool_whole_map_is_identity():
    fm = np.random.default_rng(0).normal(size=(2, 5, 6))
    out = roi_pool(Tensor(fm), Box(0, 0, 6, 5), 5, 6)
    np.testing.assert_array_equal(out.data, fm)


def test_roi_pool_constant_map():
    out = roi_pool(Tensor(np.full((3, 8, 8), 2.5)), Box(1.3, 2.2, 6.1, 7.9), 3, 2)
    np.testing.assert_array_equal(out.data, np.full((3, 3, 2), 2.5))


def test_roi_pool_matches_subwindow_oracle():
    fm = np.random.default_rng(1).normal(size=(1, 7, 7))
    out = roi_pool(Tensor(fm), Box(0, 0, 7, 7), 6, 6)
    np.testing.assert_array_equal(out.data, subwindow_max(fm, 0, 0, 7, 7, 6, 6))


def test_roi_pool_random_rois_against_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        fm = rng.normal(size=(2, 9, 11))
        x0, y0 = int(rng.integers(0, 9)), int(rng.integers(0, 7))
        x1, y1 = int(rng.integers(x0 + 1, 12)), int(rng.integers(y0 + 1, 10))
        oh, ow = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        out = roi_pool(Tensor(fm), Box(x0, y0, x1, y1), oh, ow)
        np.testing.assert_array_equal(out.data, subwindow_max(fm, y0, x0, y1, x1, oh, ow))


def test_roi_pool_scales_image_coordinates():
    fm = np.random.default_rng(3).normal(size=(1, 4, 4))
    out = roi_pool(Tensor(fm), Box(0, 0, 8, 8), 4, 4, scale=0.5)
    np.testing.assert_array_equal(out.data, fm)


def test_roi_pool_many_matches_single():
    rng = np.random.default_rng(4)
    fm = Tensor(rng.normal(size=(3, 8, 8)))
    rois = [Box(0, 0, 5, 5), Box(2.5, 1, 8, 3), Box(0, 0, 8, 8)]
    many = roi_pool_many(fm, rois, 3, 3)
    for i, r in enumerate(rois):
        np.testing.assert_array_equal(many.data[i], roi_pool(fm, r, 3, 3).data)


def test_roi_pool_degenerate_roi_is_clamped():
    before = detection_layers.degenerate_roi_count
    fm = np.arange(16.0).reshape(1, 4, 4)
    out = roi_pool(Tensor(fm), Box(20, 20, 30, 30), 2, 2)  # lies beyond the map
    assert detection_layers.degenerate_roi_count > before
    np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 15.0))


def test_roi_pool_backward_routes_to_argmax():
    fm = np.zeros((1, 4, 4))
    fm[0, 1, 2] = 5.0
    t = Tensor(fm, requires_grad=True)
    tsum(roi_pool(t, Box(0, 0, 4, 4), 1, 1)).backward()
    expected = np.zeros((1, 4, 4))
    expected[0, 1, 2] = 1.0
    np.testing.assert_array_equal(t.grad, expected)


def _maps(rng, n, shape):
    return [Tensor(rng.normal(size=shape), requires_grad=True) for _ in range(n)]


def test_batch_pool_single_map():
    m = _maps(np.random.default_rng(5), 1, (2, 3, 3))
    np.testing.assert_array_equal(batch_pool(m).data, m[0].data)


def test_batch_pool_dominating_map():
    rng = np.random.default_rng(6)
    maps = _maps(rng, 3, (2, 3, 3))
    maps[1] = Tensor(np.maximum(maps[0].data, maps[2].data) + 1.0)
    np.testing.assert_array_equal(batch_pool(maps).data, maps[1].data)


def test_batch_pool_oracle_and_zero_grad_through_event_head():
    rng = np.random.default_rng(7)
    maps = _maps(rng, 3, (4, 3, 3))
    batch = RoiBatch(maps, [0.9, 0.5, 0.1], [Box(0, 0, 1, 1)] * 3)
    pooled = batch_pool(batch)
    np.testing.assert_array_equal(pooled.data, elementwise_max([m.data for m in maps]))
    event = Tensor(rng.normal(size=(4, 3, 3)), requires_grad=True)
    w, b = Tensor(rng.normal(size=(2, 8)), requires_grad=True), Tensor(np.zeros(2), requires_grad=True)
    logits = fully_connected(global_avg_pool(channel_concat([event, pooled])), w, b)
    softmax_cross_entropy(logits, 1).backward()
    for m in maps:
        assert m.grad is not None and not np.any(m.grad)
    assert np.any(event.grad) and np.any(w.grad)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.data())
def test_batch_pool_dominates_and_is_attained(n, data):
    shape = data.draw(st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)))
    arrs = [data.draw(hnp.arrays(np.float64, shape, elements=st.floats(-5, 5))) for _ in range(n)]
    out = batch_pool([Tensor(a) for a in arrs]).data
    stacked = np.stack(arrs)
    assert np.all(out >= stacked)
    assert np.all((stacked == out).any(axis=0))


def test_batch_pool_errors():
    with pytest.raises(DimensionError):
        batch_pool([Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 3, 3)))])
    with pytest.raises(ValueError):
        batch_pool([])
    with pytest.raises(ValueError):
        RoiBatch([], [], [])
    with pytest.raises(ValueError):
        RoiBatch([Tensor(np.zeros((1, 2, 2)))], [0.1, 0.2], [Box(0, 0, 1, 1)])


def test_channel_concat_widths_and_identity():
    rng = np.random.default_rng(8)
    maps = [Tensor(rng.normal(size=(256, 2, 2))) for _ in range(3)]
    assert channel_concat(maps).shape == (768, 2, 2)
    np.testing.assert_array_equal(channel_concat(maps[:1]).data, maps[0].data)
    with pytest.raises(DimensionError):
        channel_concat([Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 2, 3)))])


def test_channel_concat_split_round_trip_and_gradient_ranges():
    rng = np.random.default_rng(9)
    parts = [Tensor(rng.normal(size=(c, 3, 2)), requires_grad=True) for c in (2, 3, 1)]
    out = channel_concat(parts)
    for piece, p in zip(np.split(out.data, [2, 5]), parts):
        np.testing.assert_array_equal(piece, p.data)
    g = rng.normal(size=out.shape)
    out.backward(g)
    for piece, p in zip(np.split(g, [2, 5]), parts):
        np.testing.assert_array_equal(p.grad, piece)


def _batch(scores):
    return RoiBatch([Tensor(np.full((1, 1, 1), float(i))) for i in range(len(scores))], list(scores),
                    [Box(i, 0, i + 1, 1) for i in range(len(scores))])


def test_sampler_examples():
    assert sample_order([0.9, 0.1, 0.8, 0.8, 0.2], 3).tolist() == [0, 2, 3]
    picked = roi_sampler(_batch([0.9, 0.1, 0.8, 0.8, 0.2]), 3)
    assert picked.scores == [0.9, 0.8, 0.8]
    assert [m.data.item() for m in picked.maps] == [0.0, 2.0, 3.0]
    assert sample_order([0.2, 0.7, 0.5], 3).tolist() == [1, 2, 0]
    assert len(roi_sampler(_batch([0.3, 0.6]), 3)) == 2
    with pytest.raises(ValueError):
        sample_order([0.5], 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]) | st.floats(0, 1), min_size=1, max_size=12),
       st.integers(1, 15))
def test_sampler_matches_sort_oracle(scores, k):
    assert sample_order(scores, k).tolist() == topk_sort_oracle(scores, k)
