import json

import numpy as np
import pytest

from salient3d.errors import InvalidArgument
from salient3d.fixtures import CLUTTER, FOREGROUND, GROUND, SceneSpec, generate_synthetic_scene, write_scene
from salient3d.fusion import fuse_point_features
from salient3d.sfm_ingest import load_feature_store, parse_sfm

SMALL = dict(n_foreground=80, n_ground=100, n_clutter=40)


def _scene_arrays(sc):
    pts = sc.sfm.points
    ids = sorted(pts)
    xyz = np.array([pts[i].position for i in ids])
    grids = [sc.store.frames[k].grid for k in sorted(sc.sfm.frames)]
    return ids, xyz, grids


def test_same_seed_is_bitwise_identical():
    a = generate_synthetic_scene(seed=5, **SMALL)
    b = generate_synthetic_scene(seed=5, **SMALL)
    ia, xa, ga = _scene_arrays(a)
    ib, xb, gb = _scene_arrays(b)
    assert ia == ib
    assert np.array_equal(xa, xb)
    assert all(np.array_equal(u, v) for u, v in zip(ga, gb))
    assert a.gt_labels == b.gt_labels
    assert np.array_equal(a.gt_box.rotation, b.gt_box.rotation)


def test_different_seeds_differ():
    _, xa, _ = _scene_arrays(generate_synthetic_scene(seed=5, **SMALL))
    _, xb, _ = _scene_arrays(generate_synthetic_scene(seed=6, **SMALL))
    assert xa.shape != xb.shape or not np.allclose(xa, xb)


def test_noise_free_features_equal_class_directions():
    sc = generate_synthetic_scene(seed=2, sigma_f=0.0, sigma_p=0.0, sigma_xyz=0.0, **SMALL)
    # grids are stored as float32, so equality holds to that precision
    cloud = fuse_point_features(sc.sfm, sc.store)
    klass = np.array([sc.point_class[int(p)] for p in cloud.point_ids])
    for k in (FOREGROUND, GROUND, CLUTTER):
        f = cloud.features[klass == k]
        assert len(f)
        np.testing.assert_allclose(f, np.broadcast_to(f[0], f.shape), atol=1e-6)
    fg = cloud.features[klass == FOREGROUND][0]
    np.testing.assert_allclose(cloud.cls.reshape(fg.shape), fg, atol=1e-6)
    # ground and foreground are orthogonal in every head
    gr = cloud.features[klass == GROUND][0]
    np.testing.assert_allclose(np.sum(fg * gr, axis=1), 0.0, atol=1e-6)


def test_gt_box_matches_spec_size():
    sc = generate_synthetic_scene(seed=3, size_jitter=0.0, **SMALL)
    np.testing.assert_allclose(sc.gt_box.half_extents, SceneSpec().object_size)
    assert sc.gt_box.volume == pytest.approx(8 * np.prod(SceneSpec().object_size))
    R = sc.gt_box.rotation
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)


def test_foreground_lies_on_gt_box_surface():
    sc = generate_synthetic_scene(seed=4, sigma_xyz=0.0, **SMALL)
    box = sc.gt_box
    fg = np.array([sc.sfm.points[i].position for i, v in sc.gt_labels.items() if v])
    loc = np.abs((fg - box.center) @ box.rotation) / box.half_extents
    np.testing.assert_allclose(loc.max(axis=1), 1.0, atol=1e-9)


def test_ground_plane_labels_and_offset():
    sc = generate_synthetic_scene(seed=4, sigma_xyz=0.0, plane_height=0.3, **SMALL)
    pl = sc.gt_plane
    xyz = np.array([sc.sfm.points[int(i)].position for i in pl.inliers])
    np.testing.assert_allclose(xyz @ pl.normal + pl.offset, 0.0, atol=1e-9)
    assert all(sc.point_class[int(i)] == GROUND for i in pl.inliers)


def test_every_point_seen_twice():
    sc = generate_synthetic_scene(seed=8, **SMALL)
    assert all(len(p.track) >= 2 for p in sc.sfm.points.values())


@pytest.mark.parametrize("bad", [
    dict(n_foreground=0), dict(n_ground=-1), dict(sigma_f=-0.1), dict(n_cameras=1),
    dict(shape="cone"), dict(dim=1),
])
def test_validate_rejects(bad):
    with pytest.raises(InvalidArgument):
        generate_synthetic_scene(**{**SMALL, **bad})


def test_sphere_scene():
    sc = generate_synthetic_scene(seed=1, shape="sphere", sigma_xyz=0.0, **SMALL)
    fg = np.array([sc.sfm.points[i].position for i, v in sc.gt_labels.items() if v])
    r = sc.gt_box.half_extents[0]
    np.testing.assert_allclose(np.linalg.norm(fg - sc.gt_box.center, axis=1), r, atol=1e-9)


def test_write_scene_round_trip(tmp_path):
    sc = generate_synthetic_scene(seed=9, **SMALL)
    write_scene(sc, tmp_path)
    sfm = parse_sfm(tmp_path / "sfm")
    store = load_feature_store(tmp_path / "features.arfs")
    a = fuse_point_features(sc.sfm, sc.store)
    b = fuse_point_features(sfm, store)
    assert np.array_equal(a.point_ids, b.point_ids)
    np.testing.assert_allclose(a.positions, b.positions, atol=1e-9)
    np.testing.assert_allclose(a.features, b.features, atol=1e-6)
    gt = json.loads((tmp_path / "gt.json").read_text())
    assert sum(gt["labels"].values()) == sum(sc.gt_labels.values())
