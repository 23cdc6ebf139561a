"""Ground plane, plane-aligned oriented boxes, pseudo-labels and detection metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import DegenerateGeometry, InvalidArgument, NoPlaneFound

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1

MIN_BACKGROUND = 50
MIN_INLIER_RATIO = 0.10
MIN_PLANE_CANDIDATES = 20
DEFAULT_MARGIN = 0.02


@dataclass(frozen=True)
class PlaneModel:
    """Plane {x : normal . x + offset = 0}; ``inliers`` are cloud row indices."""

    normal: np.ndarray
    offset: float
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)

    def signed_distance(self, points):
        return np.asarray(points, dtype=float) @ self.normal + self.offset

    def to_json(self):
        return {"normal": [float(x) for x in self.normal], "offset": float(self.offset)}

    @classmethod
    def from_json(cls, obj):
        n = np.asarray(obj["normal"], dtype=float)
        norm = np.linalg.norm(n)
        if not norm > 0:
            raise InvalidArgument("plane normal must be non-zero")
        return cls(n / norm, float(obj["offset"]) / norm)


@dataclass(frozen=True)
class OrientedBox:
    center: np.ndarray
    rotation: np.ndarray       # columns are the box axes; column 2 is the plane normal
    half_extents: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise InvalidArgument("rotation must be a proper orthonormal 3x3 matrix")
        if np.any(np.asarray(self.half_extents) <= 0):
            raise InvalidArgument("half extents must be positive")

    @property
    def volume(self):
        return float(8.0 * np.prod(self.half_extents))

    def to_local(self, points):
        return (np.asarray(points, dtype=float) - self.center) @ self.rotation

    def contains(self, points, tol=1e-9):
        return np.all(np.abs(self.to_local(points)) <= self.half_extents + tol, axis=-1)

    def corners(self):
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        return self.center + (signs * self.half_extents) @ self.rotation.T

    def planes(self):
        """Six half-spaces (n, d) with n . x <= d for points inside."""
        out = []
        for k in range(3):
            axis = self.rotation[:, k]
            c = axis @ self.center
            out.append((axis, c + self.half_extents[k]))
            out.append((-axis, -c + self.half_extents[k]))
        return out

    def faces(self):
        """Faces as vertex lists, counter-clockwise seen from outside."""
        c = self.corners()  # index bits: x*4 + y*2 + z
        quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
        return [[c[i] for i in q] for q in quads]

    def axis_aligned(self):
        c = self.corners()
        lo, hi = c.min(axis=0), c.max(axis=0)
        return OrientedBox(0.5 * (lo + hi), np.eye(3), 0.5 * (hi - lo))

    def to_json(self):
        return {"center": [float(x) for x in self.center],
                "rotation": [float(x) for x in np.asarray(self.rotation).reshape(-1)],
                "half_extents": [float(x) for x in self.half_extents]}

    @classmethod
    def from_json(cls, obj):
        try:
            return cls(np.asarray(obj["center"], dtype=float),
                       np.asarray(obj["rotation"], dtype=float).reshape(3, 3),
                       np.asarray(obj["half_extents"], dtype=float))
        except (KeyError, ValueError) as exc:
            raise InvalidArgument(f"malformed box JSON: {exc}") from None


# --------------------------------------------------------------------------
# ground plane


def _fit_plane_lsq(points):
    c = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - c, full_matrices=False)
    n = vt[-1]
    return n, -float(n @ c)


def ransac_plane(points, iters=1000, tol=0.01, rng=None):
    """RANSAC over 3-point samples, refined by least squares on the inliers.

    Returns (normal, offset, inlier_mask) where the mask is re-evaluated
    against the refined plane.
    """
    points = np.asarray(points, dtype=float)
    m = len(points)
    if m < 3:
        raise NoPlaneFound("fewer than 3 candidate points")
    rng = np.random.default_rng(rng)
    idx = np.stack([rng.choice(m, size=3, replace=False) for _ in range(iters)])
    p0, p1, p2 = points[idx[:, 0]], points[idx[:, 1]], points[idx[:, 2]]
    normals = np.cross(p1 - p0, p2 - p0)
    norms = np.linalg.norm(normals, axis=1)
    ok = norms > 1e-12
    if not ok.any():
        raise NoPlaneFound("all samples are degenerate")
    normals = normals[ok] / norms[ok, None]
    offsets = -np.sum(normals * p0[ok], axis=1)
    counts = np.empty(len(normals), dtype=np.int64)
    for start in range(0, len(normals), 256):
        stop = start + 256
        dist = np.abs(points @ normals[start:stop].T + offsets[start:stop])
        counts[start:stop] = (dist <= tol).sum(axis=0)
    best = int(np.argmax(counts))
    inliers = np.abs(points @ normals[best] + offsets[best]) <= tol
    n, c = _fit_plane_lsq(points[inliers])
    refined = np.abs(points @ n + c) <= tol
    if refined.sum() >= 3:
        inliers = refined
    return n, c, inliers


def fit_ground_plane(cloud, seg, iters=1000, tol=None, rng=None, radius_factor=1.5):
    """Plane supporting the foreground, estimated from nearby background points.

    Candidates are background points within ``radius_factor`` times the
    foreground bounding-sphere radius of the foreground centroid; the radius
    grows by 25% steps while fewer than 20 candidates fall inside. ``seg`` may be a Segmentation or a boolean foreground mask. The default
    tolerance is 2% of the foreground bounding-sphere radius.
    """
    labels = np.asarray(getattr(seg, "labels", seg), dtype=bool)
    positions = cloud.positions if hasattr(cloud, "positions") else np.asarray(cloud, dtype=float)
    if labels.shape != (len(positions),):
        raise InvalidArgument("labels must align with the cloud")
    bg_rows = np.flatnonzero(~labels)
    if len(bg_rows) < MIN_BACKGROUND:
        raise NoPlaneFound(f"need at least {MIN_BACKGROUND} background points, got {len(bg_rows)}")
    fg = positions[labels]
    if len(fg) == 0:
        raise NoPlaneFound("no foreground points")
    centroid = fg.mean(axis=0)
    radius = float(np.linalg.norm(fg - centroid, axis=1).max())
    dist = np.linalg.norm(positions[bg_rows] - centroid, axis=1)
    reach = radius_factor * radius
    # widen the neighbourhood when the ground near the object is barely observed
    while np.sum(dist <= reach) < MIN_PLANE_CANDIDATES and reach < dist.max():
        reach *= 1.25
    near = bg_rows[dist <= reach]
    if len(near) < 3:
        raise NoPlaneFound("too few background points near the foreground")
    if tol is None:
        tol = 0.02 * radius if radius > 0 else 1e-3
    n, c, inliers = ransac_plane(positions[near], iters=iters, tol=tol, rng=rng)
    if inliers.sum() < MIN_INLIER_RATIO * len(near):
        raise NoPlaneFound(f"inlier ratio {inliers.sum() / len(near):.3f} below {MIN_INLIER_RATIO}")
    if n @ centroid + c < 0:
        n, c = -n, -c
    return PlaneModel(n, c, near[inliers])


# --------------------------------------------------------------------------
# oriented box


def _plane_basis(normal):
    n = np.asarray(normal, dtype=float)
    helper = np.eye(3)[np.argmin(np.abs(n))]
    e1 = np.cross(n, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(n, e1)


def _min_area_direction(q):
    """Direction of the minimum-area enclosing rectangle of 2D points."""
    try:
        hull = q[ConvexHull(q).vertices]
    except QhullError:
        raise DegenerateGeometry("in-plane footprint is degenerate") from None
    edges = np.roll(hull, -1, axis=0) - hull
    angles = np.mod(np.arctan2(edges[:, 1], edges[:, 0]), np.pi / 2)
    best, best_area = None, np.inf
    for a in np.unique(np.round(angles, 12)):
        u = np.array([np.cos(a), np.sin(a)])
        v = np.array([-u[1], u[0]])
        area = np.ptp(q @ u) * np.ptp(q @ v)
        if area < best_area * (1 - 1e-9):
            best, best_area = (u, v), area
    u, v = best
    return u if np.ptp(q @ u) >= np.ptp(q @ v) else v


def plane_aligned_obb(points, plane: PlaneModel, margin=DEFAULT_MARGIN) -> OrientedBox:
    """Box with its third axis along the plane normal and in-plane axes from 2D PCA.

    When the footprint covariance is isotropic the PCA axes are undefined;
    the minimum-area rectangle orientation is used instead.
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) < 3:
        raise DegenerateGeometry("need at least 3 points")
    n = np.asarray(plane.normal, dtype=float)
    e1, e2 = _plane_basis(n)
    q = np.stack([pts @ e1, pts @ e2], axis=1)
    qc = q - q.mean(axis=0)
    cov = qc.T @ qc / len(q)
    vals, vecs = np.linalg.eigh(cov)
    if not vals[1] > 0 or vals[0] <= 1e-12 * vals[1]:
        raise DegenerateGeometry("in-plane covariance is rank deficient")
    if vals[1] - vals[0] <= 1e-6 * vals[1]:
        major2d = _min_area_direction(qc)
    else:
        major2d = vecs[:, 1]
    a1 = major2d[0] * e1 + major2d[1] * e2
    for k in range(3):
        if abs(a1[k]) > 1e-12:
            if a1[k] < 0:
                a1 = -a1
            break
    a1 /= np.linalg.norm(a1)
    a2 = np.cross(n, a1)
    R = np.stack([a1, a2, n], axis=1)
    local = pts @ R
    lo, hi = local.min(axis=0), local.max(axis=0)
    half = 0.5 * (hi - lo) * (1.0 + margin)
    if np.any(half <= 0):
        raise DegenerateGeometry("points have zero extent along a box axis")
    return OrientedBox(R @ (0.5 * (lo + hi)), R, half)


def assign_pseudo_labels(cloud, seg, box: OrientedBox):
    """Foreground -> POSITIVE, background outside box -> NEGATIVE, inside -> IGNORE."""
    labels = np.asarray(getattr(seg, "labels", seg), dtype=bool)
    positions = cloud.positions if hasattr(cloud, "positions") else np.asarray(cloud, dtype=float)
    inside = box.contains(positions)
    out = np.full(len(labels), NEGATIVE, dtype=np.int8)
    out[~labels & inside] = IGNORE
    out[labels] = POSITIVE
    return out


# --------------------------------------------------------------------------
# IoU by polytope clipping


def _clip_polygon(poly, n, d, eps):
    """Sutherland-Hodgman: keep the part of ``poly`` with n . x <= d."""
    out, cut_pts = [], []
    k = len(poly)
    for i in range(k):
        cur, nxt = poly[i], poly[(i + 1) % k]
        dc, dn = n @ cur - d, n @ nxt - d
        if dc <= eps:
            out.append(cur)
            if abs(dc) <= eps:
                cut_pts.append(cur)
        if (dc < -eps and dn > eps) or (dc > eps and dn < -eps):
            t = dc / (dc - dn)
            p = cur + t * (nxt - cur)
            out.append(p)
            cut_pts.append(p)
    return out, cut_pts


def _order_on_plane(pts, n):
    c = pts.mean(axis=0)
    e1, e2 = _plane_basis(n)
    ang = np.arctan2((pts - c) @ e2, (pts - c) @ e1)
    return pts[np.argsort(ang)]


def _dedupe(pts, tol):
    keep = []
    for p in pts:
        if all(np.linalg.norm(p - q) > tol for q in keep):
            keep.append(p)
    return np.array(keep)


def clip_polytope(faces, n, d, eps=1e-12):
    """Clip a convex polytope (list of faces) by the half-space n . x <= d."""
    dist = np.concatenate([np.asarray(f) for f in faces]) @ n - d
    if dist.max() <= eps:
        return faces
    if dist.min() >= -eps:
        return []
    new_faces, cap = [], []
    for face in faces:
        clipped, cut_pts = _clip_polygon(face, n, d, eps)
        cap.extend(cut_pts)
        if len(clipped) >= 3:
            new_faces.append(clipped)
    if len(cap) >= 3:
        cap = _dedupe(np.array(cap), 1e-12)
        if len(cap) >= 3:
            new_faces.append(list(_order_on_plane(cap, n)))
    return new_faces


def polytope_volume(faces):
    if not faces:
        return 0.0
    verts = np.concatenate([np.asarray(f) for f in faces])
    ref = verts.mean(axis=0)
    vol = 0.0
    for f in faces:
        f = np.asarray(f)
        for i in range(1, len(f) - 1):
            vol += abs(np.dot(f[0] - ref, np.cross(f[i] - ref, f[i + 1] - ref))) / 6.0
    return vol


def intersection_volume(a: OrientedBox, b: OrientedBox):
    scale = max(np.max(a.half_extents), np.max(b.half_extents))
    faces = [[np.asarray(p, dtype=float) for p in f] for f in a.faces()]
    for n, d in b.planes():
        faces = clip_polytope(faces, n, d, eps=1e-12 * scale)
        if not faces:
            return 0.0
    return polytope_volume(faces)


def box_iou(a: OrientedBox, b: OrientedBox, axis_aligned=False) -> float:
    if axis_aligned:
        a, b = a.axis_aligned(), b.axis_aligned()
    inter = intersection_volume(a, b)
    union = a.volume + b.volume - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def detection_ap(pred, gt, threshold=0.5, axis_aligned=False) -> float:
    """Fraction of scans whose predicted box reaches ``threshold`` IoU.

    ``pred`` and ``gt`` map scan ids to boxes (sequences are keyed by position).
    With one object and one unranked prediction per scan this is the AP.
    """
    if not isinstance(pred, dict):
        pred = dict(enumerate(pred))
    if not isinstance(gt, dict):
        gt = dict(enumerate(gt))
    if set(pred) != set(gt):
        raise InvalidArgument(f"scan ids differ: {sorted(set(pred) ^ set(gt), key=str)}")
    if not gt:
        raise InvalidArgument("no scans to evaluate")
    hits = [box_iou(pred[k], gt[k], axis_aligned) >= threshold for k in gt]
    return float(np.mean(hits))


def save_json(obj, path):
    with open(path, "w") as fid:
        json.dump(obj, fid, indent=2, sort_keys=True)
        fid.write("\n")
