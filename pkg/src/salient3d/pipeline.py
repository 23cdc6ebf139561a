"""Coarse decomposition: NCut segmentation, ground plane, box and pseudo-labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .fusion import DEFAULT_TARGET_COUNT, FeaturedPointCloud, downsample_to, upsample_labels
from .geometry import (
    DEFAULT_MARGIN,
    OrientedBox,
    PlaneModel,
    assign_pseudo_labels,
    fit_ground_plane,
    plane_aligned_obb,
)
from .ncut import Segmentation, build_affinity, select_foreground, spectral_bipartition


@dataclass(frozen=True)
class CoarseResult:
    segmentation: Segmentation     # on the downsampled cloud
    labels: np.ndarray             # foreground mask on the full cloud
    plane: PlaneModel
    box: OrientedBox
    pseudo_labels: np.ndarray


def segment_ncut(cloud: FeaturedPointCloud, target_count=DEFAULT_TARGET_COUNT, voxel=None,
                 sigma_s=None, feature_exponent=1.0):
    """Foreground mask for ``cloud`` from NCut on its downsampled version.

    Returns (full-resolution labels, segmentation of the downsampled cloud).
    """
    down = downsample_to(cloud, target_count, voxel)
    graph = build_affinity(down, sigma_s=sigma_s, feature_exponent=feature_exponent)
    seg = select_foreground(down, spectral_bipartition(graph))
    return upsample_labels(seg.labels, down), seg


def largest_component(positions, labels, link_factor=4.0):
    """Foreground mask reduced to its largest spatially connected piece.

    Two foreground points are linked when closer than ``link_factor`` times
    the median foreground nearest-neighbour spacing. A single stray
    foreground point far from the object would otherwise stretch the box.
    """
    labels = np.asarray(labels, dtype=bool)
    idx = np.flatnonzero(labels)
    if len(idx) < 3:
        return labels.copy()
    tree = cKDTree(positions[idx])
    d, _ = tree.query(positions[idx], k=2)
    radius = link_factor * np.median(d[:, 1])
    if radius <= 0:
        return labels.copy()
    _, comp = connected_components(tree.sparse_distance_matrix(tree, radius, output_type="coo_matrix"),
                                   directed=False)
    out = np.zeros_like(labels)
    out[idx[comp == np.bincount(comp).argmax()]] = True
    return out


def box_from_labels(cloud: FeaturedPointCloud, labels, ransac_iters=1000, ransac_tol=None,
                    margin=DEFAULT_MARGIN, rng=0):
    """Ground plane from the background, box around the main foreground component."""
    labels = np.asarray(labels, dtype=bool)
    plane = fit_ground_plane(cloud, labels, iters=ransac_iters, tol=ransac_tol, rng=rng)
    box = plane_aligned_obb(cloud.positions[largest_component(cloud.positions, labels)], plane, margin=margin)
    return plane, box


def coarse_decompose(cloud: FeaturedPointCloud, target_count=DEFAULT_TARGET_COUNT, voxel=None,
                     sigma_s=None, feature_exponent=1.0, ransac_iters=1000, ransac_tol=None,
                     margin=DEFAULT_MARGIN, rng=0) -> CoarseResult:
    labels, seg = segment_ncut(cloud, target_count, voxel, sigma_s, feature_exponent)
    plane, box = box_from_labels(cloud, labels, ransac_iters, ransac_tol, margin, rng)
    return CoarseResult(seg, labels, plane, box, assign_pseudo_labels(cloud, labels, box))


def mask_iou(pred, gt):
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    union = np.sum(pred | gt)
    return float(np.sum(pred & gt) / union) if union else 1.0
