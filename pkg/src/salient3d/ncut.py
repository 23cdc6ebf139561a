"""Normalized Cut bipartition of a neural point cloud.

Edge weights multiply a clamped grouped cosine similarity (max over heads of
per-head cosine) with a Gaussian spatial kernel. The relaxed problem
(D - W) y = lambda D y is solved through the symmetric normalized Laplacian
and the resulting vector is swept over every threshold between its sorted
entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.sparse.csgraph import connected_components

from .errors import (
    DegenerateFeature,
    DisconnectedVertex,
    InvalidArgument,
    InvalidPartition,
    NumericalFailure,
)
from .fusion import FeaturedPointCloud

MIN_HEAD_NORM = 1e-12
MIN_DEGREE = 1e-12
MAX_VERTICES = 5000
TIE_TOL = 1e-9


@dataclass(frozen=True)
class AffinityGraph:
    W: np.ndarray

    def __post_init__(self):
        self.W.setflags(write=False)

    @property
    def n(self):
        return self.W.shape[0]

    @property
    def degree(self):
        return self.W.sum(axis=1)


@dataclass(frozen=True)
class Segmentation:
    labels: np.ndarray      # bool, True = foreground
    ncut_value: float
    fiedler: np.ndarray
    lambda2: float = float("nan")

    @property
    def sizes(self):
        fg = int(self.labels.sum())
        return {"foreground": fg, "background": int(self.labels.size - fg)}

    def summary(self):
        return {"ncut_value": float(self.ncut_value), "lambda2": float(self.lambda2), "sizes": self.sizes}


def _unit_heads(Z):
    norms = np.linalg.norm(Z, axis=-1, keepdims=True)
    if np.any(norms < MIN_HEAD_NORM):
        raise DegenerateFeature("feature has a head with (near) zero norm")
    return Z / norms


def grouped_cosine_similarity(Zi, Zj):
    """Max over heads of the per-head cosine similarity of two (h, d) groups."""
    Zi = _unit_heads(np.asarray(Zi, dtype=float))
    Zj = _unit_heads(np.asarray(Zj, dtype=float))
    if Zi.shape != Zj.shape:
        raise InvalidArgument(f"group shapes differ: {Zi.shape} vs {Zj.shape}")
    return float(np.max(np.sum(Zi * Zj, axis=-1)))


def grouped_cosine_matrix(Z):
    """All-pairs grouped cosine similarity for features of shape (n, h, d)."""
    U = _unit_heads(np.asarray(Z, dtype=float))
    S = None
    for k in range(U.shape[1]):
        Sk = U[:, k, :] @ U[:, k, :].T
        S = Sk if S is None else np.maximum(S, Sk)
    return np.clip(S, -1.0, 1.0)


def default_sigma(positions):
    """0.2 x the radius of the centroid-centred bounding sphere."""
    positions = np.asarray(positions, dtype=float)
    r = np.linalg.norm(positions - positions.mean(axis=0), axis=1).max()
    return 0.2 * r if r > 0 else 1.0


def build_affinity(cloud: FeaturedPointCloud, sigma_s=None, feature_exponent=1.0) -> AffinityGraph:
    n = len(cloud)
    if not 2 <= n <= MAX_VERTICES:
        raise InvalidArgument(f"affinity needs 2 <= n <= {MAX_VERTICES} points, got {n}")
    if sigma_s is None:
        sigma_s = default_sigma(cloud.positions)
    if not sigma_s > 0:
        raise InvalidArgument("sigma_s must be positive")
    S = np.maximum(grouped_cosine_matrix(cloud.features), 0.0)
    if feature_exponent != 1.0:
        S = S ** feature_exponent
    P = cloud.positions
    sq = np.sum(P * P, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * P @ P.T, 0.0)
    W = S * np.exp(-d2 / (2.0 * sigma_s ** 2))
    W = 0.5 * (W + W.T)
    np.fill_diagonal(W, 0.0)
    deg = W.sum(axis=1)
    bad = np.flatnonzero(deg < MIN_DEGREE)
    if bad.size:
        raise DisconnectedVertex(int(bad[0]))
    return AffinityGraph(W)


def ncut_value(graph: AffinityGraph, labels) -> float:
    """cut(A,B)/assoc(A,V) + cut(A,B)/assoc(B,V)."""
    a = np.asarray(labels, dtype=bool)
    if a.all() or not a.any():
        raise InvalidPartition("both sides of the partition must be non-empty")
    W = graph.W
    cut = W[a][:, ~a].sum()
    deg = W.sum(axis=1)
    return float(cut / deg[a].sum() + cut / deg[~a].sum())


def normalized_laplacian(graph: AffinityGraph):
    d_isqrt = 1.0 / np.sqrt(graph.degree)
    L = np.eye(graph.n) - d_isqrt[:, None] * graph.W * d_isqrt[None, :]
    return 0.5 * (L + L.T)


def smallest_eigenpairs(graph: AffinityGraph, k=2):
    """The ``k`` smallest eigenpairs of the symmetric normalized Laplacian."""
    L = normalized_laplacian(graph)
    k = min(k, graph.n)
    try:
        vals, vecs = scipy.linalg.eigh(L, subset_by_index=[0, k - 1], driver="evr")
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalFailure(f"eigensolver failed: {exc}") from None
    if not np.all(np.isfinite(vals)) or not np.all(np.isfinite(vecs)):
        raise NumericalFailure("eigensolver returned non-finite values")
    return vals, vecs


def second_eigenpair(graph: AffinityGraph):
    """(lambda2, z) of the symmetric normalized Laplacian, z unit norm."""
    vals, vecs = smallest_eigenpairs(graph, 2)
    return float(vals[1]), vecs[:, 1]


def sweep_threshold(graph: AffinityGraph, y):
    """Best split of ``y`` over all thresholds between distinct sorted entries.

    Returns (labels, ncut); labels are True on the ``y > threshold`` side.
    """
    y = np.asarray(y, dtype=float)
    order = np.argsort(y, kind="stable")
    Ws = graph.W[np.ix_(order, order)]
    deg = Ws.sum(axis=1)
    vol = deg.sum()
    # cut of the prefix {order[:k+1]} grows by deg(v) - 2 * w(v, prefix)
    inner = np.tril(Ws, -1).sum(axis=1)
    cut = np.cumsum(deg - 2.0 * inner)[:-1]
    vol_a = np.cumsum(deg)[:-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        nc = cut / vol_a + cut / (vol - vol_a)
    ys = y[order]
    nc[ys[1:] <= ys[:-1]] = np.inf  # no threshold separates equal entries
    if not np.any(np.isfinite(nc)):
        raise NumericalFailure("indicator vector is constant")
    k = int(np.argmin(nc))
    labels = np.zeros(graph.n, dtype=bool)
    labels[order[k + 1:]] = True
    return labels, float(ncut_value(graph, labels))


def _ncut_terms(W, deg, a):
    w_in_a = W @ a.astype(float)
    cut = float(deg[a].sum() - w_in_a[a].sum())
    return w_in_a, cut, float(deg[a].sum())


def refine_partition(graph: AffinityGraph, labels, max_passes=20):
    """Fiduccia-Mattheyses style local search on the NCut objective.

    Each pass moves every vertex at most once, always taking the best
    available single-vertex move (even uphill), then rolls back to the best
    labelling seen. Passes repeat while they improve, so the result is never
    worse than the input.
    """
    W = graph.W
    n = graph.n
    deg = W.sum(axis=1)
    vol = deg.sum()
    best = np.asarray(labels, dtype=bool).copy()
    best_val = ncut_value(graph, best)
    for _ in range(max_passes):
        a = best.copy()
        w_in_a, cut, vol_a = _ncut_terms(W, deg, a)
        locked = np.zeros(n, dtype=bool)
        pass_best, pass_val = None, best_val
        for _ in range(n):
            # moving v out of its side: cut += w(v, own side) - w(v, other side)
            sign = np.where(a, 1.0, -1.0)
            w_own = np.where(a, w_in_a, deg - w_in_a)
            new_cut = cut + w_own - (deg - w_own)
            new_vol_a = vol_a - sign * deg
            with np.errstate(divide="ignore", invalid="ignore"):
                cand = new_cut / new_vol_a + new_cut / (vol - new_vol_a)
            cand[locked] = np.inf
            n_a = int(a.sum())
            if n_a == 1:
                cand[a] = np.inf
            if n_a == n - 1:
                cand[~a] = np.inf
            v = int(np.argmin(cand))
            if not np.isfinite(cand[v]):
                break
            cut, vol_a = float(new_cut[v]), float(new_vol_a[v])
            w_in_a -= sign[v] * W[:, v]
            a[v] = not a[v]
            locked[v] = True
            if cand[v] < pass_val * (1.0 - 1e-12):
                pass_best, pass_val = a.copy(), float(cand[v])
        if pass_best is None:
            break
        exact = ncut_value(graph, pass_best)
        if not exact < best_val:
            break
        best, best_val = pass_best, exact
    return best


def spectral_bipartition(graph: AffinityGraph, refine=True, n_vectors=3) -> Segmentation:
    """Normalized Cut bipartition.

    The generalized eigenvector of the second-smallest eigenvalue is swept
    over all thresholds. With ``n_vectors > 1`` the next eigenvectors are
    swept too, since on graphs with several weakly linked groups the best
    two-way split can be encoded by a later vector. Each candidate is then
    polished by :func:`refine_partition` and the lowest NCut wins.
    Disconnected graphs are split along their components.
    """
    n_comp, comp = connected_components(graph.W > 0, directed=False)
    if n_comp > 1:
        labels = comp != comp[0]
        return Segmentation(labels, 0.0, labels.astype(float) - labels.mean(), 0.0)
    vals, vecs = smallest_eigenpairs(graph, 1 + max(1, n_vectors))
    d_isqrt = 1.0 / np.sqrt(graph.degree)
    fiedler = vecs[:, 1] * d_isqrt
    best, best_val = None, np.inf
    for k in range(1, vecs.shape[1]):
        labels, value = sweep_threshold(graph, vecs[:, k] * d_isqrt)
        if refine:
            labels = refine_partition(graph, labels)
            value = ncut_value(graph, labels)
        if value < best_val:
            best, best_val = labels, value
    return Segmentation(best, best_val, fiedler, float(vals[1]))


def _aabb_volume(points):
    if len(points) == 0:
        return 0.0
    return float(np.prod(np.ptp(points, axis=0)))


def select_foreground(cloud: FeaturedPointCloud, seg: Segmentation) -> Segmentation:
    """Orient ``seg`` so the side whose mean feature best matches cls is True.

    Ties go to the side with the smaller bounding-box volume.
    """
    labels = np.asarray(seg.labels, dtype=bool)
    if labels.all() or not labels.any():
        raise InvalidPartition("both classes must be non-empty")
    flat = cloud.flat_features
    cls = np.asarray(cloud.cls, dtype=float)

    def score(mask):
        m = flat[mask].mean(axis=0)
        denom = np.linalg.norm(m) * np.linalg.norm(cls)
        return float(m @ cls / denom) if denom > 0 else 0.0

    s_true, s_false = score(labels), score(~labels)
    if abs(s_true - s_false) < TIE_TOL:
        keep = _aabb_volume(cloud.positions[labels]) <= _aabb_volume(cloud.positions[~labels])
    else:
        keep = s_true > s_false
    if keep:
        return seg
    return Segmentation(~labels, seg.ncut_value, -np.asarray(seg.fiedler), seg.lambda2)
