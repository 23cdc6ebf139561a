"""Neural point cloud construction: multi-view feature fusion and voxel downsampling."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from .errors import EmptyInput, FormatError, IntegrityError, InvalidArgument
from .plyio import read_ply, write_ply
from .sfm_ingest import MIN_DEPTH, FeatureStore, SfmReconstruction, project_many, sample_features

DEFAULT_TARGET_COUNT = 3000


@dataclass(frozen=True)
class FeaturedPointCloud:
    """SfM points carrying grouped (heads x dim) features and a global cls vector.

    ``parent`` is set on downsampled clouds: ``parent[i]`` is the row of this
    cloud that absorbed row ``i`` of the source cloud. ``constituent_ids``
    holds, per row, the point ids merged into it.
    """

    positions: np.ndarray        # (n, 3)
    features: np.ndarray         # (n, heads, dim)
    view_count: np.ndarray       # (n,)
    point_ids: np.ndarray        # (n,)
    cls: np.ndarray              # (heads*dim,)
    parent: Optional[np.ndarray] = None
    constituent_ids: Optional[Tuple[np.ndarray, ...]] = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.positions)
        if self.features.ndim != 3 or len(self.features) != n or len(self.view_count) != n:
            raise IntegrityError("point cloud", "array lengths disagree")
        if self.cls.size != self.heads * self.dim:
            raise IntegrityError("point cloud", "cls length must equal heads*dim")
        if n and self.view_count.min() < 1:
            raise IntegrityError("point cloud", "view_count must be >= 1")
        if not np.all(np.isfinite(self.features)):
            raise IntegrityError("point cloud", "non-finite features")

    def __len__(self):
        return len(self.positions)

    @property
    def heads(self):
        return self.features.shape[1]

    @property
    def dim(self):
        return self.features.shape[2]

    @property
    def flat_features(self):
        return self.features.reshape(len(self), -1)

    def subset(self, mask):
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return replace(self, positions=self.positions[idx], features=self.features[idx],
                       view_count=self.view_count[idx], point_ids=self.point_ids[idx],
                       parent=None, constituent_ids=None)


def fuse_point_features(sfm: SfmReconstruction, store: FeatureStore) -> FeaturedPointCloud:
    """Average the sampled feature of every valid observation of each point.

    Observations behind the camera or outside the image are skipped; points
    left without any valid observation are dropped.
    """
    if not sfm.points:
        raise EmptyInput("reconstruction has no points")
    store.check_against(sfm)
    point_ids = np.array(sorted(sfm.points), dtype=np.int64)
    positions = np.array([sfm.points[p].position for p in point_ids], dtype=float)
    heads, dim = store.heads, store.dim

    rows, frames, uvs = [], [], []
    for row, pid in enumerate(point_ids):
        for frame_id, uv in sfm.points[pid].track:
            rows.append(row)
            frames.append(frame_id)
            uvs.append(uv)
    rows = np.asarray(rows)
    frames = np.asarray(frames)
    uvs = np.asarray(uvs, dtype=float).reshape(-1, 2)

    total = np.zeros((len(point_ids), heads, dim))
    count = np.zeros(len(point_ids), dtype=np.int64)
    for frame_id in np.unique(frames):
        sel = np.flatnonzero(frames == frame_id)
        frame = sfm.frames[int(frame_id)]
        cam = sfm.cameras[frame.camera_id]
        _, depth = project_many(cam, frame, positions[rows[sel]])
        u, v = uvs[sel, 0], uvs[sel, 1]
        ok = (depth > MIN_DEPTH) & (u >= 0) & (u <= cam.width) & (v >= 0) & (v <= cam.height)
        sel = sel[ok]
        if sel.size == 0:
            continue
        feats = sample_features(store, int(frame_id), uvs[sel])
        np.add.at(total, rows[sel], feats)
        np.add.at(count, rows[sel], 1)

    keep = count > 0
    features = total[keep] / count[keep][:, None, None]
    return FeaturedPointCloud(positions[keep], features, count[keep], point_ids[keep], fuse_cls(store))


def fuse_cls(store: FeatureStore) -> np.ndarray:
    """Mean of the per-frame cls vectors."""
    if len(store) == 0:
        raise EmptyInput("feature store has no frames")
    stacked = np.stack([store.frames[k].cls.astype(np.float64) for k in sorted(store.frames)])
    return stacked.mean(axis=0)


def voxel_downsample(cloud: FeaturedPointCloud, voxel) -> FeaturedPointCloud:
    """One point per occupied voxel: centroid position, view-count weighted feature."""
    if not voxel > 0:
        raise InvalidArgument(f"voxel must be positive, got {voxel}")
    keys = np.floor(cloud.positions / voxel).astype(np.int64)
    _, parent = np.unique(keys, axis=0, return_inverse=True)
    parent = parent.reshape(-1)
    m = parent.max() + 1 if len(parent) else 0

    counts = np.bincount(parent, minlength=m)
    pos = np.zeros((m, 3))
    np.add.at(pos, parent, cloud.positions)
    pos /= counts[:, None]

    w = cloud.view_count.astype(float)
    feat = np.zeros((m,) + cloud.features.shape[1:])
    np.add.at(feat, parent, cloud.features * w[:, None, None])
    vc = np.bincount(parent, weights=w, minlength=m)
    feat /= vc[:, None, None]

    order = np.argsort(parent, kind="stable")
    splits = np.cumsum(counts)[:-1]
    constituents = tuple(np.split(cloud.point_ids[order], splits))
    ids = np.array([c.min() for c in constituents], dtype=np.int64)
    return FeaturedPointCloud(pos, feat, vc.astype(np.int64), ids, cloud.cls.copy(),
                              parent=parent, constituent_ids=constituents)


def count_voxels(positions, voxel):
    keys = np.floor(np.asarray(positions) / voxel).astype(np.int64)
    return len(np.unique(keys, axis=0))


def choose_voxel(cloud: FeaturedPointCloud, target=DEFAULT_TARGET_COUNT, iters=40):
    """Smallest voxel (by bisection) whose occupied-bucket count is <= target.

    Returns None when the cloud is already small enough.
    """
    if len(cloud) <= target:
        return None
    extent = np.ptp(cloud.positions, axis=0).max()
    lo, hi = 0.0, max(extent, 1e-12) * 2.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if count_voxels(cloud.positions, mid) <= target:
            hi = mid
        else:
            lo = mid
    return hi


def downsample_to(cloud: FeaturedPointCloud, target=DEFAULT_TARGET_COUNT, voxel=None):
    """Downsample with an explicit voxel, or one chosen to meet ``target``.

    Always returns a cloud with ``parent`` set so labels can be lifted back.
    """
    if voxel is None:
        voxel = choose_voxel(cloud, target)
    if voxel is None:
        return replace(cloud, parent=np.arange(len(cloud)),
                       constituent_ids=tuple(cloud.point_ids[i:i + 1] for i in range(len(cloud))))
    return voxel_downsample(cloud, voxel)


def upsample_labels(labels, downsampled: FeaturedPointCloud):
    """Lift per-row labels of a downsampled cloud back to its source points."""
    if downsampled.parent is None:
        raise InvalidArgument("cloud was not produced by downsampling")
    return np.asarray(labels)[downsampled.parent]


# --------------------------------------------------------------------------
# PLY export


def save_cloud_ply(cloud: FeaturedPointCloud, path, extra=None):
    channels = {"point_id": cloud.point_ids, "view_count": cloud.view_count}
    flat = cloud.flat_features
    for k in range(flat.shape[1]):
        channels[f"f{k}"] = flat[:, k].astype(np.float64)
    if extra:
        channels.update(extra)
    comments = [f"heads {cloud.heads}", f"dim {cloud.dim}",
                "cls " + " ".join(repr(float(x)) for x in cloud.cls)]
    write_ply(path, cloud.positions, channels, comments)


def load_cloud_ply(path) -> FeaturedPointCloud:
    rec, comments = read_ply(path)
    meta = {}
    for c in comments:
        key, _, rest = c.partition(" ")
        meta[key] = rest
    try:
        heads, dim = int(meta["heads"]), int(meta["dim"])
        cls = np.array([float(x) for x in meta["cls"].split()])
        flat = np.stack([rec[f"f{k}"].astype(np.float64) for k in range(heads * dim)], axis=1)
        positions = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
        return FeaturedPointCloud(positions, flat.reshape(-1, heads, dim),
                                  rec["view_count"].astype(np.int64), rec["point_id"].astype(np.int64), cls)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: not a featured point cloud ({exc})") from None
