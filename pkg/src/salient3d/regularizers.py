"""Loss evaluators for SDF fields regularized by a coarse point decomposition.

All functions are pure: callers provide SDF values and gradients (from an
analytic SDF or a trained field) and get scalar losses back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidArgument

DEFAULT_K = 8
DEFAULT_LAMBDA = 1.0
DEFAULT_BIN_EPS = 0.1
DEFAULT_WEIGHT = 0.1


@dataclass(frozen=True)
class KnnStats:
    """Per-query neighbour distance statistics; ``bound`` is mu + lambda * sigma.

    The same bound serves as the ground-plane lower bound and as the
    foreground positional uncertainty, depending on the point set.
    """

    mu: np.ndarray
    sigma: np.ndarray
    bound: np.ndarray
    k: int
    lam: float

    # aliases matching the two uses of the bound
    @property
    def theta(self):
        return self.bound

    @property
    def tau(self):
        return self.bound


@dataclass(frozen=True)
class LossWeights:
    eikonal: float = DEFAULT_WEIGHT
    ground: float = DEFAULT_WEIGHT
    foreground: float = DEFAULT_WEIGHT
    binary: float = DEFAULT_WEIGHT

    def __post_init__(self):
        for name in ("eikonal", "ground", "foreground", "binary"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise InvalidArgument(f"loss weight {name} must be finite and >= 0, got {v}")

    def scaled(self, factor):
        return LossWeights(self.eikonal * factor, self.ground * factor,
                           self.foreground * factor, self.binary * factor)


@dataclass(frozen=True)
class SdfSampleSet:
    points: np.ndarray
    sdf: np.ndarray
    gradients: np.ndarray = None

    def __post_init__(self):
        n = len(self.points)
        if len(self.sdf) != n or (self.gradients is not None and len(self.gradients) != n):
            raise InvalidArgument("points, sdf and gradients must have equal length")
        for arr in (self.points, self.sdf, self.gradients):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise InvalidArgument("sample set contains non-finite values")


def neighbor_distances(query, reference=None, k=DEFAULT_K):
    """Distances to the ``k`` nearest reference points, ascending, shape (m, k).

    With ``reference=None`` the query set is its own reference and each
    point's own entry is excluded.
    """
    query = np.atleast_2d(np.asarray(query, dtype=float))
    self_ref = reference is None
    reference = query if self_ref else np.atleast_2d(np.asarray(reference, dtype=float))
    available = len(reference) - (1 if self_ref else 0)
    if not 1 <= k <= available:
        raise InvalidArgument(f"need 1 <= K <= {available} reference points, got K={k}")
    tree = cKDTree(reference)
    kk = k + 1 if self_ref else k
    _, idx = tree.query(query, k=kk)
    idx = np.asarray(idx).reshape(len(query), kk)
    if self_ref:
        rows = np.arange(len(query))[:, None]
        mask = idx != rows
        # drop the self match; if coincident duplicates hid it, drop the last column
        has_self = ~mask.all(axis=1)
        mask[~has_self, -1] = False
        idx = idx[mask].reshape(len(query), k)
    # distances recomputed explicitly so results do not depend on the tree internals
    d = np.sqrt(np.sum((reference[idx] - query[:, None, :]) ** 2, axis=-1))
    return np.sort(d, axis=1)


def knn_stats(query, reference=None, k=DEFAULT_K, lam=DEFAULT_LAMBDA) -> KnnStats:
    d = neighbor_distances(query, reference, k)
    mu = d.mean(axis=1)
    sigma = d.std(axis=1)
    return KnnStats(mu, sigma, mu + lam * sigma, int(k), float(lam))


def _bound(stats):
    return stats.bound if isinstance(stats, KnnStats) else np.asarray(stats, dtype=float)


def _sdf(samples):
    return np.asarray(samples.sdf if isinstance(samples, SdfSampleSet) else samples, dtype=float)


def loss_ground(samples, stats) -> float:
    """Mean hinge pushing |f| on ground points above the lower bound."""
    f, theta = _sdf(samples), _bound(stats)
    if f.shape != theta.shape:
        raise InvalidArgument("samples and stats are not aligned")
    if f.size == 0:
        return 0.0
    return float(np.mean(np.maximum(theta - np.abs(f), 0.0)))


def loss_fg(samples, stats) -> float:
    """Mean hinge keeping |f| on foreground points below their uncertainty."""
    f, tau = _sdf(samples), _bound(stats)
    if f.shape != tau.shape:
        raise InvalidArgument("samples and stats are not aligned")
    if f.size == 0:
        return 0.0
    return float(np.mean(np.maximum(np.abs(f) - tau, 0.0)))


def loss_bin(opacities, eps=DEFAULT_BIN_EPS) -> float:
    """Beta-prior log barrier on accumulated ray opacity, zero at O in {0, 1}."""
    o = np.asarray(opacities, dtype=float)
    if np.any(o < 0) or np.any(o > 1) or not np.all(np.isfinite(o)):
        raise InvalidArgument("opacities must lie in [0, 1]")
    if o.size == 0:
        return 0.0
    shift = np.log(eps) + np.log(1.0 + eps)
    return float(np.mean(np.log(o + eps) + np.log(1.0 - o + eps)) - shift)


def loss_eikonal(gradients) -> float:
    g = np.atleast_2d(np.asarray(gradients, dtype=float))
    if not np.all(np.isfinite(g)):
        raise InvalidArgument("gradients must be finite")
    if g.size == 0:
        return 0.0
    return float(np.mean((np.linalg.norm(g, axis=1) - 1.0) ** 2))


def total_loss(l_color, l_eik, l_g, l_fg, l_bin, weights: LossWeights = LossWeights()) -> float:
    terms = (l_color, l_eik, l_g, l_fg, l_bin)
    if not all(np.isfinite(t) for t in terms):
        raise InvalidArgument("loss terms must be finite")
    w = weights
    return float(l_color + w.eikonal * l_eik + w.ground * l_g + w.foreground * l_fg + w.binary * l_bin)


def anneal_weight(w0, step, anneal_steps) -> float:
    """Linear decay from ``w0`` at step 0 to zero at ``anneal_steps``."""
    if anneal_steps <= 0:
        raise InvalidArgument("anneal_steps must be positive")
    if step < 0:
        raise InvalidArgument("step must be >= 0")
    return float(w0 * max(0.0, 1.0 - step / anneal_steps))


def evaluate_all(ground: SdfSampleSet, foreground: SdfSampleSet, opacities, l_color=0.0,
                 weights: LossWeights = LossWeights(), k=DEFAULT_K, lam=DEFAULT_LAMBDA,
                 eps=DEFAULT_BIN_EPS, step=None, anneal_steps=None):
    """Evaluate every regularizer and the weighted total for one batch.

    Eikonal gradients come from ``foreground.gradients``. If ``step`` and
    ``anneal_steps`` are given, the weights are annealed first.
    """
    l_g = loss_ground(ground, knn_stats(ground.points, k=k, lam=lam)) if len(ground.points) else 0.0
    l_fg = loss_fg(foreground, knn_stats(foreground.points, k=k, lam=lam)) if len(foreground.points) else 0.0
    l_eik = loss_eikonal(foreground.gradients) if foreground.gradients is not None else 0.0
    l_b = loss_bin(opacities, eps)
    if step is not None and anneal_steps is not None:
        weights = weights.scaled(anneal_weight(1.0, step, anneal_steps))
    return {
        "l_color": float(l_color), "l_eik": l_eik, "l_g": l_g, "l_fg": l_fg, "l_bin": l_b,
        "total": total_loss(l_color, l_eik, l_g, l_fg, l_b, weights),
    }


def box_sdf(box, points):
    """Exact signed distance to an oriented box and its gradient.

    Inside the box the gradient is the outward axis of the nearest face.
    """
    p = box.to_local(points)
    q = np.abs(p) - box.half_extents
    outside = np.maximum(q, 0.0)
    dist_out = np.linalg.norm(outside, axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    sdf = dist_out + inside
    g_local = np.zeros_like(p)
    out = dist_out > 0
    g_local[out] = np.sign(p[out]) * outside[out] / dist_out[out, None]
    rows = np.flatnonzero(~out)
    axis = np.argmax(q[rows], axis=1)
    g_local[rows, axis] = np.where(p[rows, axis] >= 0, 1.0, -1.0)
    return sdf, g_local @ np.asarray(box.rotation).T
