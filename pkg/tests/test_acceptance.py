"""Acceptance suite: one test per criterion.

Each test stores a short detail string; the terminal summary (see conftest)
prints one PASS/FAIL line per criterion. Run alone with

    pytest tests/test_acceptance.py -v
"""
import time

import numpy as np
from scipy.spatial.transform import Rotation

from oracles import exhaustive_min_ncut, grouped_cosine_direct, jacobi_eigh, linear_attention_quadratic, \
    random_connected_graph
from salient3d.fixtures import generate_synthetic_scene
from salient3d.fusion import fuse_point_features
from salient3d.geometry import IGNORE, OrientedBox, PlaneModel, box_iou, detection_ap, fit_ground_plane, \
    plane_aligned_obb
from salient3d.ncut import AffinityGraph, grouped_cosine_similarity, normalized_laplacian, second_eigenpair, \
    spectral_bipartition
from salient3d.pipeline import box_from_labels, coarse_decompose, mask_iou
from salient3d.regularizers import LossWeights, knn_stats, loss_bin, loss_eikonal, loss_fg, loss_ground, \
    total_loss
from salient3d.seg_transformer import Adam, SegTransformer, TransformerConfig, linear_attention, loss_and_grad, \
    loss_value, predict_labels, train, train_step


def test_criterion_01_ncut_optimality(record_property):
    rng = np.random.default_rng(1)
    kinds = ("uniform", "sparse", "clusters")
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(200):
        n = int(rng.integers(2, 13))
        W = random_connected_graph(rng, n, kinds[i % 3])
        ratio = spectral_bipartition(AffinityGraph(W)).ncut_value / exhaustive_min_ncut(W)
        worst = max(worst, ratio)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"worst ratio {worst:.4f}, {elapsed:.1f} s")
    assert worst <= 1.05
    assert elapsed < 30


def test_criterion_02_eigensolver(record_property):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(3, 65))
        g = AffinityGraph(random_connected_graph(rng, n))
        lam, z = second_eigenpair(g)
        vals, vecs = jacobi_eigh(normalized_laplacian(g))
        ref = vecs[:, 1]
        err = max(abs(lam - vals[1]), min(np.abs(z - ref).max(), np.abs(z + ref).max()))
        worst = max(worst, err)
    record_property("detail", f"max error {worst:.2e}")
    assert worst < 1e-8


def test_criterion_03_grouped_similarity(record_property):
    rng = np.random.default_rng(3)
    worst = scale_worst = 0.0
    for _ in range(1000):
        h, d = int(rng.integers(1, 7)), int(rng.integers(2, 17))
        Zi, Zj = rng.normal(size=(2, h, d))
        s = grouped_cosine_similarity(Zi, Zj)
        worst = max(worst, abs(s - grouped_cosine_direct(Zi, Zj)))
        a, b = rng.uniform(0.01, 100, size=(2, h, 1))
        scale_worst = max(scale_worst, abs(grouped_cosine_similarity(a * Zi, b * Zj) - s))
    record_property("detail", f"oracle error {worst:.2e}, scaling error {scale_worst:.2e}")
    assert worst < 1e-7
    assert scale_worst < 1e-7


def test_criterion_04_linear_attention(record_property):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 33))
        heads = int(rng.choice([1, 2, 4]))
        d = heads * int(rng.integers(1, 9))
        Q, K, V = rng.normal(size=(3, n, d))
        worst = max(worst, np.abs(linear_attention(Q, K, V, heads) - linear_attention_quadratic(Q, K, V, heads)).max())
    record_property("detail", f"max error {worst:.2e}")
    assert worst < 1e-6


def _scene_cloud(seed, **kw):
    sc = generate_synthetic_scene(seed=seed, **kw)
    return sc, fuse_point_features(sc.sfm, sc.store)


def test_criterion_05_gradient_check(record_property):
    t0 = time.perf_counter()
    sc, cloud = _scene_cloud(1, n_foreground=120, n_ground=150, n_clutter=60)
    labels = sc.labels_for(cloud.point_ids).astype(np.int8)
    labels[::7] = IGNORE
    cfg = TransformerConfig(d_feat=cloud.heads * cloud.dim)
    h = 1e-4
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        m = SegTransformer.init(cfg, rng=seed)
        for v in m.params.values():
            v += rng.normal(scale=0.1, size=v.shape)
        _, grads = loss_and_grad(m, cloud, labels)
        names = list(m.params)
        for _ in range(20):
            name = names[rng.integers(len(names))]
            idx = tuple(int(rng.integers(s)) for s in m.params[name].shape)
            old = m.params[name][idx]
            m.params[name][idx] = old + h
            lp = loss_value(m, cloud, labels)
            m.params[name][idx] = old - h
            lm = loss_value(m, cloud, labels)
            m.params[name][idx] = old
            fd, an = (lp - lm) / (2 * h), grads[name][idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max relative error {worst:.2e}, {elapsed:.1f} s")
    assert worst < 1e-4
    assert elapsed < 60


def test_criterion_06_overfit(record_property):
    sc, cloud = _scene_cloud(6, n_foreground=180, n_ground=220, n_clutter=100)
    gt = sc.labels_for(cloud.point_ids)
    t0 = time.perf_counter()
    m = SegTransformer.init(TransformerConfig(d_feat=cloud.heads * cloud.dim), rng=0)
    opt = Adam()
    iou, steps = 0.0, 0
    while steps < 200 and iou < 0.99:
        train_step(m, cloud, gt.astype(np.int8), 1e-3, opt)
        steps += 1
        iou = mask_iou(predict_labels(m, cloud), gt)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{len(cloud)} points, IoU {iou:.3f} after {steps} steps, {elapsed:.1f} s")
    assert iou >= 0.99
    assert elapsed < 60


def test_criterion_07_end_to_end(record_property):
    t0 = time.perf_counter()
    seg_ok = box_ok = 0
    for seed in range(20):
        sc, cloud = _scene_cloud(seed)
        res = coarse_decompose(cloud)
        seg_ok += mask_iou(res.labels, sc.labels_for(cloud.point_ids)) >= 0.95
        box_ok += box_iou(res.box, sc.gt_box) >= 0.5
    elapsed = time.perf_counter() - t0
    record_property("detail", f"segmentation {seg_ok}/20, box {box_ok}/20, {elapsed:.1f} s")
    assert seg_ok >= 18 and box_ok >= 18
    assert elapsed < 120


def test_criterion_08_transformer_vs_ncut(record_property):
    samples = []
    for seed in range(100, 116):
        _, cloud = _scene_cloud(seed)
        samples.append((cloud, coarse_decompose(cloud).pseudo_labels))
    m = SegTransformer.init(TransformerConfig(d_feat=samples[0][0].heads * samples[0][0].dim), rng=0)
    train(m, samples, 1600, augment_rng=1)
    pred_t, pred_n, gt = {}, {}, {}
    for seed in range(200, 208):
        sc, cloud = _scene_cloud(seed)
        pred_n[seed] = coarse_decompose(cloud).box
        pred_t[seed] = box_from_labels(cloud, predict_labels(m, cloud))[1]
        gt[seed] = sc.gt_box
    ap_t, ap_n = detection_ap(pred_t, gt, 0.5), detection_ap(pred_n, gt, 0.5)
    record_property("detail", f"AP@0.5 transformer {ap_t:.3f}, NCut {ap_n:.3f}")
    assert ap_t >= ap_n


def test_criterion_09_losses(record_property):
    rng = np.random.default_rng(9)
    checks = {}
    pts = rng.uniform(size=(200, 3))
    stats = knn_stats(pts, k=8)
    bound = stats.mu + stats.sigma
    checks["ground zero when satisfied"] = loss_ground(bound + 0.1, bound) == 0.0
    checks["fg zero when satisfied"] = loss_fg(0.5 * bound, bound) == 0.0
    checks["ground hinge"] = abs(loss_ground(np.array([0.0, 0.3]), np.array([0.2, 0.2])) - 0.1) < 1e-12
    checks["fg hinge"] = abs(loss_fg(np.array([0.5, -0.05]), np.array([0.1, 0.1])) - 0.2) < 1e-12
    x = rng.normal(size=(1000, 3))
    checks["eikonal sphere"] = loss_eikonal(x / np.linalg.norm(x, axis=1, keepdims=True)) < 1e-9
    o = rng.uniform(size=200)
    checks["bin symmetric"] = abs(loss_bin(o) - loss_bin(1 - o)) < 1e-12
    checks["bin endpoints"] = abs(loss_bin([0.0])) < 1e-15 and abs(loss_bin([1.0])) < 1e-15
    w = LossWeights()
    checks["default weights"] = (w.eikonal, w.ground, w.foreground, w.binary) == (0.1, 0.1, 0.1, 0.1)
    a, b = rng.uniform(size=(2, 4))
    lin = total_loss(0.2, *(a + 2 * b)) - (total_loss(0.2, *a) + 2 * total_loss(0.0, *b))
    checks["combiner linear"] = abs(lin) < 1e-12
    failed = [k for k, v in checks.items() if not v]
    record_property("detail", f"{len(checks) - len(failed)}/{len(checks)} checks" + (f", failed {failed}" if failed else ""))
    assert not failed


def test_criterion_10_geometry(record_property):
    a = OrientedBox(np.zeros(3), np.eye(3), np.full(3, 0.5))
    b = OrientedBox(np.array([0.5, 0, 0]), np.eye(3), np.full(3, 0.5))
    iou_err = abs(box_iou(a, b) - 1 / 3)
    angles = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        ground = np.c_[rng.uniform(-1, 1, size=(500, 2)), rng.normal(0, 0.002, size=500)]
        outliers = rng.uniform([-1, -1, 0.05], [1, 1, 1.0], size=(100, 3))
        fg = np.c_[rng.uniform(-0.2, 0.2, size=(100, 2)), rng.uniform(0.05, 0.4, size=100)]
        pts = np.vstack([ground, outliers, fg])
        labels = np.r_[np.zeros(600, bool), np.ones(100, bool)]
        n = fit_ground_plane(pts, labels, rng=seed, radius_factor=5.0).normal
        angles.append(np.degrees(np.arccos(min(abs(n[2]), 1.0))))
    plane = PlaneModel(np.array([0.0, 0.0, 1.0]), 0.0)
    equi = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(200, 3)) * [1.0, 0.4, 0.3]
        R = Rotation.from_rotvec([0, 0, rng.uniform(0, 2 * np.pi)]).as_matrix()
        t = np.r_[rng.normal(size=2), 0.0]
        p, q = plane_aligned_obb(pts, plane), plane_aligned_obb(pts @ R.T + t, plane)
        equi = max(equi, np.abs(p.half_extents - q.half_extents).max(), np.abs(R @ p.center + t - q.center).max())
    ok_planes = sum(x < 1.0 for x in angles)
    record_property("detail", f"1/3 IoU error {iou_err:.1e}, planes {ok_planes}/20 within 1 deg, "
                              f"equivariance error {equi:.1e}")
    assert iou_err < 1e-9
    assert ok_planes == 20
    assert equi < 1e-6


def test_criterion_11_cli_determinism(tmp_path, record_property):
    from test_cli import run_all_commands

    fa, oa = run_all_commands(tmp_path / "a")
    fb, ob = run_all_commands(tmp_path / "b")
    same = [x.read_bytes() == y.read_bytes() for x, y in zip(fa, fb)]
    record_property("detail", f"{sum(same)}/{len(same)} artifacts identical, {len(oa)} summaries compared")
    assert len(fa) == len(fb) and all(same)
    assert oa == ob
