"""Reading SfM reconstructions and per-frame feature maps.

The reconstruction uses the common three-table text layout::

    cameras.txt   CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]
    images.txt    IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME
                  POINTS2D[] as (X, Y, POINT3D_ID)
    points3D.txt  POINT3D_ID X Y Z R G B ERROR TRACK[] as (IMAGE_ID, POINT2D_IDX)

Only ``PINHOLE`` (fx fy cx cy) and ``SIMPLE_PINHOLE`` (f cx cy) cameras are
accepted. Poses are world-to-camera. Lines starting with ``#`` are comments.

Feature maps live in an "ARFS" binary container (little-endian)::

    b"ARFS" | version:u32 | record*
    record = frame_id:u64 stride:u32 Hp:u32 Wp:u32 heads:u32 dim:u32
             grid:f32[Hp*Wp*heads*dim]  (row-major y, x, channel)
             cls:f32[heads*dim]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .errors import (
    BehindCamera,
    FormatError,
    IntegrityError,
    InvalidArgument,
    MissingFrame,
    ParseError,
    UnsupportedCamera,
)

CAMERAS_FILE = "cameras.txt"
IMAGES_FILE = "images.txt"
POINTS_FILE = "points3D.txt"

ARFS_MAGIC = b"ARFS"
ARFS_VERSION = 1
_RECORD_HEADER = struct.Struct("<QIIIII")

QUAT_TOL = 1e-6
MIN_DEPTH = 1e-9


@dataclass(frozen=True)
class Camera:
    camera_id: int
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, u, v):
        return 0.0 <= u <= self.width and 0.0 <= v <= self.height


@dataclass(frozen=True)
class Frame:
    frame_id: int
    camera_id: int
    qvec: Tuple[float, float, float, float]  # (w, x, y, z), world-to-camera
    tvec: Tuple[float, float, float]
    name: str = ""

    @property
    def rotation(self):
        return quat_to_rotmat(self.qvec)

    @property
    def center(self):
        """Camera center in world coordinates."""
        R = self.rotation
        return -R.T @ np.asarray(self.tvec)


@dataclass(frozen=True)
class Point3D:
    point_id: int
    position: Tuple[float, float, float]
    track: Tuple[Tuple[int, Tuple[float, float]], ...]


@dataclass(frozen=True)
class SfmReconstruction:
    cameras: Dict[int, Camera]
    frames: Dict[int, Frame]
    points: Dict[int, Point3D]

    def camera_of(self, frame_id):
        return self.cameras[self.frames[frame_id].camera_id]

    def validate(self):
        for fr in self.frames.values():
            if fr.camera_id not in self.cameras:
                raise IntegrityError(f"frame {fr.frame_id}", f"unknown camera {fr.camera_id}")
            if abs(np.linalg.norm(fr.qvec) - 1.0) > QUAT_TOL:
                raise IntegrityError(f"frame {fr.frame_id}", "quaternion is not unit-norm")
        for pt in self.points.values():
            if len(pt.track) < 2:
                raise IntegrityError(pt.point_id, "track shorter than 2")
            for frame_id, (u, v) in pt.track:
                if frame_id not in self.frames:
                    raise IntegrityError(pt.point_id, f"track references missing frame {frame_id}")
                if not self.camera_of(frame_id).contains(u, v):
                    raise IntegrityError(pt.point_id, f"observation ({u}, {v}) outside frame {frame_id}")
        return self


def quat_to_rotmat(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat(R):
    """Unit quaternion (w, x, y, z) with w >= 0 for a rotation matrix."""
    R = np.asarray(R, dtype=float)
    # Symmetric 4x4 formulation; the dominant eigenvector is the quaternion.
    K = np.array([
        [R[0, 0] - R[1, 1] - R[2, 2], R[1, 0] + R[0, 1], R[2, 0] + R[0, 2], R[2, 1] - R[1, 2]],
        [R[1, 0] + R[0, 1], R[1, 1] - R[0, 0] - R[2, 2], R[2, 1] + R[1, 2], R[0, 2] - R[2, 0]],
        [R[2, 0] + R[0, 2], R[2, 1] + R[1, 2], R[2, 2] - R[0, 0] - R[1, 1], R[1, 0] - R[0, 1]],
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1], R[0, 0] + R[1, 1] + R[2, 2]],
    ]) / 3.0
    vals, vecs = np.linalg.eigh(K)
    x, y, z, w = vecs[:, np.argmax(vals)]
    q = np.array([w, x, y, z])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


# --------------------------------------------------------------------------
# text tables


def _data_lines(path):
    try:
        with open(path, "r") as fid:
            lines = fid.read().splitlines()
    except OSError:
        raise ParseError(str(path)) from None
    return [ln.strip() for ln in lines if not ln.lstrip().startswith("#")]


def _read_cameras(path):
    cameras = {}
    for line in _data_lines(path):
        if not line:
            continue
        elems = line.split()
        try:
            camera_id, model = int(elems[0]), elems[1]
            width, height = int(elems[2]), int(elems[3])
            params = [float(e) for e in elems[4:]]
        except (IndexError, ValueError):
            raise ParseError(str(path), f"malformed camera line: {line!r}") from None
        if model == "PINHOLE" and len(params) == 4:
            fx, fy, cx, cy = params
        elif model == "SIMPLE_PINHOLE" and len(params) == 3:
            fx, cx, cy = params
            fy = fx
        else:
            raise UnsupportedCamera(f"camera {camera_id}: model {model} with {len(params)} params")
        cameras[camera_id] = Camera(camera_id, fx, fy, cx, cy, width, height)
    return cameras


def _read_images(path):
    frames = {}
    observations = {}
    lines = _data_lines(path)
    # Every image is a header line followed by a (possibly empty) keypoint line.
    i = 0
    while i < len(lines):
        if not lines[i]:
            i += 1
            continue
        elems = lines[i].split()
        kp_line = lines[i + 1] if i + 1 < len(lines) else ""
        i += 2
        try:
            frame_id = int(elems[0])
            qvec = tuple(float(e) for e in elems[1:5])
            tvec = tuple(float(e) for e in elems[5:8])
            camera_id = int(elems[8])
            name = elems[9] if len(elems) > 9 else ""
            kp = kp_line.split()
            xys = [(float(kp[j]), float(kp[j + 1])) for j in range(0, len(kp) - 2, 3)]
        except (IndexError, ValueError):
            raise ParseError(str(path), f"malformed image entry for line {elems!r}") from None
        if len(qvec) != 4 or len(tvec) != 3:
            raise ParseError(str(path), f"malformed pose for image {elems[0]}")
        frames[frame_id] = Frame(frame_id, camera_id, qvec, tvec, name)
        observations[frame_id] = xys
    return frames, observations


def _read_points(path, frames, observations):
    points = {}
    for line in _data_lines(path):
        if not line:
            continue
        elems = line.split()
        try:
            point_id = int(elems[0])
            position = (float(elems[1]), float(elems[2]), float(elems[3]))
            refs = [(int(elems[j]), int(elems[j + 1])) for j in range(8, len(elems) - 1, 2)]
        except (IndexError, ValueError):
            raise ParseError(str(path), f"malformed point line: {line!r}") from None
        track = []
        for frame_id, idx in refs:
            if frame_id not in frames:
                raise IntegrityError(point_id, f"track references missing frame {frame_id}")
            xys = observations[frame_id]
            if not 0 <= idx < len(xys):
                raise IntegrityError(point_id, f"keypoint index {idx} out of range in frame {frame_id}")
            track.append((frame_id, xys[idx]))
        points[point_id] = Point3D(point_id, position, tuple(track))
    return points


def parse_sfm(path) -> SfmReconstruction:
    """Read a reconstruction directory and check its cross references."""
    path = Path(path)
    for name in (CAMERAS_FILE, IMAGES_FILE, POINTS_FILE):
        if not (path / name).is_file():
            raise ParseError(str(path / name))
    cameras = _read_cameras(path / CAMERAS_FILE)
    frames, observations = _read_images(path / IMAGES_FILE)
    points = _read_points(path / POINTS_FILE, frames, observations)
    return SfmReconstruction(cameras, frames, points).validate()


def write_sfm(rec: SfmReconstruction, path):
    """Write ``rec`` in the layout read by :func:`parse_sfm`.

    Floats are written with ``repr`` so parsing restores them exactly.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / CAMERAS_FILE, "w") as fid:
        fid.write("# CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n")
        for cam in sorted(rec.cameras.values(), key=lambda c: c.camera_id):
            fid.write(f"{cam.camera_id} PINHOLE {cam.width} {cam.height} "
                      f"{cam.fx!r} {cam.fy!r} {cam.cx!r} {cam.cy!r}\n")

    # keypoint index of each (point, track slot) inside its frame
    per_frame = {fid_: [] for fid_ in rec.frames}
    slot_index = {}
    for pt in sorted(rec.points.values(), key=lambda p: p.point_id):
        for slot, (frame_id, uv) in enumerate(pt.track):
            slot_index[(pt.point_id, slot)] = len(per_frame[frame_id])
            per_frame[frame_id].append((uv, pt.point_id))

    with open(path / IMAGES_FILE, "w") as fid:
        fid.write("# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n")
        fid.write("# POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for fr in sorted(rec.frames.values(), key=lambda f: f.frame_id):
            q = " ".join(repr(float(x)) for x in fr.qvec)
            t = " ".join(repr(float(x)) for x in fr.tvec)
            name = fr.name or f"frame_{fr.frame_id:05d}.png"
            fid.write(f"{fr.frame_id} {q} {t} {fr.camera_id} {name}\n")
            fid.write(" ".join(f"{u!r} {v!r} {pid}" for (u, v), pid in per_frame[fr.frame_id]) + "\n")

    with open(path / POINTS_FILE, "w") as fid:
        fid.write("# POINT3D_ID X Y Z R G B ERROR TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for pt in sorted(rec.points.values(), key=lambda p: p.point_id):
            xyz = " ".join(repr(float(x)) for x in pt.position)
            track = " ".join(f"{frame_id} {slot_index[(pt.point_id, slot)]}"
                             for slot, (frame_id, _) in enumerate(pt.track))
            fid.write(f"{pt.point_id} {xyz} 128 128 128 0 {track}\n")


# --------------------------------------------------------------------------
# projection


def project(camera: Camera, frame: Frame, point):
    """Pinhole projection of a world point into ``frame``; returns (u, v)."""
    X, Y, Z = frame.rotation @ np.asarray(point, dtype=float) + np.asarray(frame.tvec)
    if Z <= MIN_DEPTH:
        raise BehindCamera(f"point at depth {Z:.3g} in frame {frame.frame_id}")
    return camera.fx * X / Z + camera.cx, camera.fy * Y / Z + camera.cy


def backproject(camera: Camera, frame: Frame, u, v, depth):
    """World point seen at pixel (u, v) with camera-frame depth ``depth``."""
    cam_pt = np.array([(u - camera.cx) / camera.fx * depth, (v - camera.cy) / camera.fy * depth, depth])
    return frame.rotation.T @ (cam_pt - np.asarray(frame.tvec))


def project_many(camera: Camera, frame: Frame, points):
    """Vectorised projection. Returns (uv, depth); no depth check."""
    cam = np.asarray(points, dtype=float) @ frame.rotation.T + np.asarray(frame.tvec)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([camera.fx * cam[:, 0] / z + camera.cx, camera.fy * cam[:, 1] / z + camera.cy], axis=1)
    return uv, z


# --------------------------------------------------------------------------
# feature store


@dataclass(frozen=True)
class FrameFeatures:
    frame_id: int
    stride: int
    heads: int
    dim: int
    grid: np.ndarray  # (Hp, Wp, heads*dim) float32
    cls: np.ndarray   # (heads*dim,) float32

    def __post_init__(self):
        for arr in (self.grid, self.cls):
            arr.setflags(write=False)

    @property
    def grid_shape(self):
        return self.grid.shape[:2]


@dataclass(frozen=True)
class FeatureStore:
    frames: Dict[int, FrameFeatures] = field(default_factory=dict)

    def __post_init__(self):
        keys = {(f.heads, f.dim, f.stride) for f in self.frames.values()}
        if len(keys) > 1:
            raise IntegrityError("feature store", f"inconsistent (heads, dim, stride): {sorted(keys)}")
        for f in self.frames.values():
            if f.heads < 1 or f.dim < 1 or f.stride < 1:
                raise IntegrityError(f"frame {f.frame_id}", "heads, dim and stride must be >= 1")

    def _first(self):
        return next(iter(self.frames.values()))

    @property
    def heads(self):
        return self._first().heads

    @property
    def dim(self):
        return self._first().dim

    @property
    def stride(self):
        return self._first().stride

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, frame_id):
        try:
            return self.frames[frame_id]
        except KeyError:
            raise MissingFrame(f"no features for frame {frame_id}") from None

    def check_against(self, rec: SfmReconstruction):
        """Check the grid size bounds of every frame against its image."""
        for frame_id, ff in self.frames.items():
            if frame_id not in rec.frames:
                continue
            cam = rec.camera_of(frame_id)
            hp, wp = ff.grid_shape
            if hp * ff.stride > cam.height + ff.stride or wp * ff.stride > cam.width + ff.stride:
                raise IntegrityError(f"frame {frame_id}", "feature grid larger than image")


def save_feature_store(store: FeatureStore, path):
    with open(path, "wb") as fid:
        fid.write(ARFS_MAGIC)
        fid.write(struct.pack("<I", ARFS_VERSION))
        for frame_id in sorted(store.frames):
            f = store.frames[frame_id]
            hp, wp = f.grid_shape
            fid.write(_RECORD_HEADER.pack(frame_id, f.stride, hp, wp, f.heads, f.dim))
            fid.write(np.ascontiguousarray(f.grid, dtype="<f4").tobytes())
            fid.write(np.ascontiguousarray(f.cls, dtype="<f4").tobytes())


def load_feature_store(path) -> FeatureStore:
    try:
        data = Path(path).read_bytes()
    except OSError:
        raise ParseError(str(path)) from None
    if len(data) < 8 or data[:4] != ARFS_MAGIC:
        raise FormatError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != ARFS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    frames = {}
    off = 8
    while off < len(data):
        if off + _RECORD_HEADER.size > len(data):
            raise FormatError(f"{path}: truncated record header at byte {off}")
        frame_id, stride, hp, wp, heads, dim = _RECORD_HEADER.unpack_from(data, off)
        off += _RECORD_HEADER.size
        c = heads * dim
        n_grid = hp * wp * c
        need = 4 * (n_grid + c)
        if off + need > len(data):
            raise FormatError(f"{path}: truncated record for frame {frame_id}")
        grid = np.frombuffer(data, dtype="<f4", count=n_grid, offset=off).reshape(hp, wp, c).astype(np.float32)
        off += 4 * n_grid
        cls = np.frombuffer(data, dtype="<f4", count=c, offset=off).astype(np.float32)
        off += 4 * c
        if frame_id in frames:
            raise IntegrityError(f"frame {frame_id}", "duplicate record")
        frames[frame_id] = FrameFeatures(frame_id, stride, heads, dim, grid, cls)
    return FeatureStore(frames)


def sample_features(store: FeatureStore, frame_id, pixels):
    """Bilinear samples at many pixels of one frame; returns (m, heads, dim).

    Pixel (u, v) maps to grid coordinate ((u - s/2)/s, (v - s/2)/s), so patch
    centres hit grid nodes exactly. Coordinates are clamped to the grid.
    """
    ff = store[frame_id]
    pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
    s = ff.stride
    hp, wp = ff.grid_shape
    gx = np.clip((pixels[:, 0] - s / 2.0) / s, 0.0, wp - 1)
    gy = np.clip((pixels[:, 1] - s / 2.0) / s, 0.0, hp - 1)
    x0 = np.clip(np.floor(gx).astype(int), 0, max(wp - 2, 0))
    y0 = np.clip(np.floor(gy).astype(int), 0, max(hp - 2, 0))
    x1 = np.minimum(x0 + 1, wp - 1)
    y1 = np.minimum(y0 + 1, hp - 1)
    fx = (gx - x0)[:, None]
    fy = (gy - y0)[:, None]
    g = ff.grid.astype(np.float64)
    out = ((1 - fx) * (1 - fy) * g[y0, x0] + fx * (1 - fy) * g[y0, x1]
           + (1 - fx) * fy * g[y1, x0] + fx * fy * g[y1, x1])
    return out.reshape(-1, ff.heads, ff.dim)


def sample_feature(store: FeatureStore, frame_id, pixel):
    """Grouped feature (heads x dim) at one pixel of ``frame_id``."""
    return sample_features(store, frame_id, [pixel])[0]


def frame_features(frame_id, stride, grid, cls, heads, dim):
    """Convenience constructor that coerces arrays to float32."""
    grid = np.asarray(grid, dtype=np.float32)
    cls = np.asarray(cls, dtype=np.float32).reshape(-1)
    if grid.ndim != 3 or grid.shape[2] != heads * dim or cls.size != heads * dim:
        raise InvalidArgument("grid must be (Hp, Wp, heads*dim) and cls of length heads*dim")
    return FrameFeatures(int(frame_id), int(stride), int(heads), int(dim), grid, cls)
