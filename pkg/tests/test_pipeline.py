import numpy as np

from salient3d.pipeline import largest_component, mask_iou


def test_largest_component_drops_stray_point(rng):
    blob = rng.uniform(-0.2, 0.2, size=(200, 3))
    pts = np.vstack([blob, [[1.5, 0.0, 0.0]], rng.uniform(-1, 1, size=(50, 3)) + [4, 0, 0]])
    labels = np.r_[np.ones(201, bool), np.zeros(50, bool)]
    out = largest_component(pts, labels)
    assert out[:200].all() and not out[200:].any()


def test_largest_component_keeps_single_blob(rng):
    pts = rng.uniform(size=(100, 3))
    labels = rng.uniform(size=100) < 0.8
    keep = largest_component(pts, labels)
    assert not np.any(keep & ~labels)
    assert keep.sum() >= 0.9 * labels.sum()


def test_largest_component_small_and_coincident():
    pts = np.zeros((4, 3))
    labels = np.array([True, True, False, False])
    assert np.array_equal(largest_component(pts, labels), labels)
    assert np.array_equal(largest_component(pts, np.ones(4, bool)), np.ones(4, bool))


def test_mask_iou():
    assert mask_iou([1, 1, 0], [1, 0, 0]) == 0.5
    assert mask_iou([0, 0], [0, 0]) == 1.0
