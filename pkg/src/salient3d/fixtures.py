"""Deterministic synthetic scenes with known foreground, box and ground plane.

A box- or sphere-shaped object rests on a ground disk and is surrounded by a
ring of clutter overlapping the outer part of the disk. Cameras circle the object and look at it. Every point gets
a grouped feature drawn around a per-class direction per head; the two
background classes share half of their head directions, so the grouped
cosine similarity links them while the object stays apart.

Feature grids are painted so that each visible point owns the patch it
projects into (nearest point wins), and its 2D observation is placed at that
patch centre plus pixel noise. Patches owned by no point are filled by
repeated 3x3 averaging of their filled neighbours.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import InvalidArgument
from .geometry import OrientedBox, PlaneModel
from .sfm_ingest import (
    Camera,
    FeatureStore,
    Frame,
    Point3D,
    SfmReconstruction,
    frame_features,
    project_many,
    quat_to_rotmat,
    rotmat_to_quat,
    save_feature_store,
    write_sfm,
)

FOREGROUND, GROUND, CLUTTER = 0, 1, 2


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_foreground: int = 400
    n_ground: int = 500
    n_clutter: int = 250
    shape: str = "box"
    object_size: Tuple[float, float, float] = (0.35, 0.25, 0.3)  # half extents; sphere uses [0]
    size_jitter: float = 0.3
    plane_height: float = 0.0
    ground_radius: float = 2.0
    clutter_shell: Tuple[float, float] = (1.4, 2.2)
    clutter_height: float = 1.2
    tilt_deg: float = 0.0
    heads: int = 4
    dim: int = 8
    sigma_f: float = 0.1
    sigma_xyz: float = 0.002
    n_cameras: int = 10
    camera_radius: float = 2.5
    camera_height: float = 1.5
    image_size: Tuple[int, int] = (640, 480)
    focal: float = 500.0
    stride: int = 8
    sigma_p: float = 0.3

    def validate(self):
        if min(self.n_foreground, self.n_ground, self.n_clutter) < 0:
            raise InvalidArgument("point counts must be >= 0")
        if self.n_foreground == 0:
            raise InvalidArgument("scene needs a non-empty foreground")
        if min(self.sigma_f, self.sigma_p, self.sigma_xyz, self.size_jitter) < 0:
            raise InvalidArgument("noise levels must be >= 0")
        if self.n_cameras < 2:
            raise InvalidArgument("need at least 2 cameras")
        if self.shape not in ("box", "sphere"):
            raise InvalidArgument(f"unknown shape {self.shape!r}")
        if self.heads < 1 or self.dim < 2:
            raise InvalidArgument("need heads >= 1 and dim >= 2")
        return self


@dataclass(frozen=True)
class SyntheticScene:
    sfm: SfmReconstruction
    store: FeatureStore
    gt_labels: Dict[int, bool]
    gt_box: OrientedBox
    gt_plane: PlaneModel
    spec: SceneSpec
    point_class: Dict[int, int] = field(default_factory=dict, repr=False)

    def labels_for(self, point_ids):
        return np.array([self.gt_labels[int(p)] for p in point_ids], dtype=bool)


def _unit(v, axis=-1):
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _random_orthogonal_unit(rng, against, d):
    v = rng.normal(size=d)
    for a in against:
        v -= (v @ a) * a
    return _unit(v)


def _class_directions(rng, heads, dim):
    """(3, heads, dim) unit directions for foreground, ground, clutter."""
    dirs = np.zeros((3, heads, dim))
    for k in range(heads):
        fg = _unit(rng.normal(size=dim))
        bg = _random_orthogonal_unit(rng, [fg], dim)
        dirs[FOREGROUND, k] = fg
        dirs[GROUND, k] = bg
        if k < (heads + 1) // 2:
            dirs[CLUTTER, k] = bg
        else:
            dirs[CLUTTER, k] = _random_orthogonal_unit(rng, [fg], dim)
    return dirs


def _sample_box_surface(rng, n, half):
    hx, hy, hz = half
    # faces: +x, -x, +y, -y, +z (the bottom rests on the ground)
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-1, 1, size=(n, 2))
    pts = np.zeros((n, 3))
    for f, (axis, sign) in enumerate([(0, 1), (0, -1), (1, 1), (1, -1), (2, 1)]):
        sel = face == f
        others = [a for a in range(3) if a != axis]
        pts[sel, axis] = sign * half[axis]
        pts[sel, others[0]] = u[sel, 0] * half[others[0]]
        pts[sel, others[1]] = u[sel, 1] * half[others[1]]
    return pts


def _sample_sphere_surface(rng, n, r):
    return r * _unit(rng.normal(size=(n, 3)))


def _fill_grid(grid, owned):
    """Fill unowned patches by repeated 3x3 averaging of filled neighbours."""
    filled = owned.copy()
    if not filled.any():
        grid[:] = 0.0
        return grid
    hp, wp = filled.shape
    while not filled.all():
        g = np.where(filled[..., None], grid, 0.0)
        gp = np.pad(g, ((1, 1), (1, 1), (0, 0)))
        fp = np.pad(filled.astype(float), 1)
        acc = np.zeros_like(grid)
        cnt = np.zeros(filled.shape)
        for dy in range(3):
            for dx in range(3):
                acc += gp[dy:dy + hp, dx:dx + wp]
                cnt += fp[dy:dy + hp, dx:dx + wp]
        new = ~filled & (cnt > 0)
        grid[new] = acc[new] / cnt[new][:, None]
        filled |= new
    return grid


def generate_synthetic_scene(spec: Optional[SceneSpec] = None, **overrides) -> SyntheticScene:
    if spec is None:
        spec = SceneSpec(**overrides)
    elif overrides:
        spec = SceneSpec(**{**asdict(spec), **overrides})
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, d, s = spec.heads, spec.dim, spec.stride
    width, height = spec.image_size
    z0 = spec.plane_height

    # --- geometry in the canonical (z-up) frame
    jitter = 1.0 + rng.uniform(-spec.size_jitter, spec.size_jitter, size=3)
    yaw = rng.uniform(0, np.pi)
    offset_xy = rng.uniform(-0.2, 0.2, size=2)
    Rz = _rot_z(yaw)
    if spec.shape == "box":
        half = np.asarray(spec.object_size, dtype=float) * jitter
        local = _sample_box_surface(rng, spec.n_foreground, half)
    else:
        r = spec.object_size[0] * jitter[0]
        half = np.full(3, r)
        local = _sample_sphere_surface(rng, spec.n_foreground, r)
    obj_center = np.array([offset_xy[0], offset_xy[1], z0 + half[2]])
    fg_pts = local @ Rz.T + obj_center

    # ground: uniform disk around the object, outside its footprint
    ground = []
    while sum(len(g) for g in ground) < spec.n_ground:
        m = 2 * spec.n_ground
        rad = spec.ground_radius * np.sqrt(rng.uniform(size=m))
        ang = rng.uniform(0, 2 * np.pi, size=m)
        p = np.stack([rad * np.cos(ang), rad * np.sin(ang), np.full(m, z0)], axis=1)
        p[:, :2] += obj_center[:2]
        loc = (p - obj_center) @ Rz
        outside = np.any(np.abs(loc[:, :2]) > half[:2] * 1.05, axis=1)
        ground.append(p[outside])
    ground_pts = np.concatenate(ground)[:spec.n_ground]

    # clutter: a ring-shaped shell standing on the ground
    r_in, r_out = spec.clutter_shell
    rad = np.sqrt(rng.uniform(r_in ** 2, r_out ** 2, size=spec.n_clutter))
    ang = rng.uniform(0, 2 * np.pi, size=spec.n_clutter)
    zc = z0 + rng.uniform(0.0, spec.clutter_height, size=spec.n_clutter)
    clutter_pts = np.stack([obj_center[0] + rad * np.cos(ang), obj_center[1] + rad * np.sin(ang), zc], axis=1)

    positions = np.concatenate([fg_pts, ground_pts, clutter_pts])
    klass = np.concatenate([np.full(len(fg_pts), FOREGROUND), np.full(len(ground_pts), GROUND),
                            np.full(len(clutter_pts), CLUTTER)])
    positions = positions + rng.normal(scale=spec.sigma_xyz, size=positions.shape)

    # --- cameras on a ring, looking at the object
    phase = rng.uniform(0, 2 * np.pi)
    cam_centers, look = [], obj_center.copy()
    for i in range(spec.n_cameras):
        a = phase + 2 * np.pi * i / spec.n_cameras
        cam_centers.append(obj_center + np.array([spec.camera_radius * np.cos(a),
                                                  spec.camera_radius * np.sin(a),
                                                  spec.camera_height]))
    cam_centers = np.array(cam_centers)

    # optional global tilt of the whole world
    T = np.eye(3)
    if spec.tilt_deg > 0:
        axis = _unit(np.array([*rng.normal(size=2), 0.0]))
        ang = np.deg2rad(spec.tilt_deg)
        K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        T = np.eye(3) + np.sin(ang) * K + (1 - np.cos(ang)) * K @ K
    positions = positions @ T.T
    cam_centers = cam_centers @ T.T
    look = T @ look
    up = T @ np.array([0.0, 0.0, 1.0])

    # --- features
    dirs = _class_directions(rng, h, d)
    feats = _unit(dirs[klass] + spec.sigma_f * rng.normal(size=(len(klass), h, d)))

    camera = Camera(1, spec.focal, spec.focal, width / 2.0, height / 2.0, width, height)
    hp, wp = int(np.ceil(height / s)), int(np.ceil(width / s))
    frames, grids, clss = {}, {}, {}
    obs = [[] for _ in range(len(positions))]
    for i, c in enumerate(cam_centers):
        R_w2c = _look_at_up(c, look, up)
        q = rotmat_to_quat(R_w2c)
        R = quat_to_rotmat(q)
        t = -R @ c
        frame = Frame(i + 1, 1, tuple(float(x) for x in q), tuple(float(x) for x in t), f"frame_{i + 1:05d}.png")
        frames[frame.frame_id] = frame
        uv, z = project_many(camera, frame, positions)
        vis = np.flatnonzero((z > 0.05) & (uv[:, 0] >= 0) & (uv[:, 0] < width)
                             & (uv[:, 1] >= 0) & (uv[:, 1] < height))
        px = np.floor(uv[vis, 0] / s).astype(int)
        py = np.floor(uv[vis, 1] / s).astype(int)
        order = np.lexsort((z[vis], py * wp + px))
        key = (py * wp + px)[order]
        first = np.r_[True, key[1:] != key[:-1]]
        winners = vis[order][first]
        wx, wy = px[order][first], py[order][first]

        grid = np.zeros((hp, wp, h * d))
        owned = np.zeros((hp, wp), dtype=bool)
        grid[wy, wx] = feats[winners].reshape(len(winners), -1)
        owned[wy, wx] = True
        grids[frame.frame_id] = _fill_grid(grid, owned)
        clss[frame.frame_id] = _unit(dirs[FOREGROUND] + spec.sigma_f * rng.normal(size=(h, d))).reshape(-1)

        obs_uv = np.stack([(wx + 0.5) * s, (wy + 0.5) * s], axis=1)
        obs_uv = obs_uv + rng.normal(scale=spec.sigma_p, size=obs_uv.shape)
        obs_uv[:, 0] = np.clip(obs_uv[:, 0], 0.0, width)
        obs_uv[:, 1] = np.clip(obs_uv[:, 1], 0.0, height)
        for p, (u, v) in zip(winners, obs_uv):
            obs[p].append((frame.frame_id, (float(u), float(v))))

    points, gt_labels, point_class = {}, {}, {}
    ground_ids = []
    next_id = 1
    for p in range(len(positions)):
        if len(obs[p]) < 2:
            continue
        points[next_id] = Point3D(next_id, tuple(float(x) for x in positions[p]), tuple(obs[p]))
        gt_labels[next_id] = bool(klass[p] == FOREGROUND)
        point_class[next_id] = int(klass[p])
        if klass[p] == GROUND:
            ground_ids.append(next_id)
        next_id += 1
    if not any(gt_labels.values()):
        raise InvalidArgument("no foreground point is visible in two views")

    sfm = SfmReconstruction({1: camera}, frames, points).validate()
    store = FeatureStore({k: frame_features(k, s, grids[k], clss[k], h, d) for k in frames})
    box_R = T @ Rz
    gt_box = OrientedBox(T @ obj_center, box_R, half.copy())
    gt_plane = PlaneModel(up, -float(up @ (T @ np.array([0.0, 0.0, z0]))), np.array(ground_ids, dtype=np.int64))
    return SyntheticScene(sfm, store, gt_labels, gt_box, gt_plane, spec, point_class)


def _look_at_up(center, target, up):
    f = _unit(target - center)
    right = _unit(np.cross(f, up))
    down = np.cross(f, right)
    return np.stack([right, down, f], axis=1).T


def write_scene(scene: SyntheticScene, out_dir):
    """Write sfm/ tables, features.arfs and gt.json under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_sfm(scene.sfm, out / "sfm")
    save_feature_store(scene.store, out / "features.arfs")
    gt = {
        "labels": {str(k): int(v) for k, v in sorted(scene.gt_labels.items())},
        "gt_box": scene.gt_box.to_json(),
        "gt_plane": scene.gt_plane.to_json(),
        "spec": asdict(scene.spec),
    }
    with open(out / "gt.json", "w") as fid:
        json.dump(gt, fid, indent=2, sort_keys=True)
        fid.write("\n")
    return out
