import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from salient3d.errors import InvalidArgument
from salient3d.geometry import OrientedBox
from salient3d.regularizers import (
    LossWeights,
    SdfSampleSet,
    anneal_weight,
    box_sdf,
    evaluate_all,
    knn_stats,
    loss_bin,
    loss_eikonal,
    loss_fg,
    loss_ground,
    neighbor_distances,
    total_loss,
)


def test_lattice_interior():
    x = np.arange(21) * 0.1
    pts = np.c_[x, np.zeros(21), np.zeros(21)]
    s = knn_stats(pts[10:11], pts, k=3)  # query coincides with a lattice node
    s2 = knn_stats(pts, k=2)
    assert s2.mu[10] == pytest.approx(0.1, abs=1e-12)
    assert s2.sigma[10] == pytest.approx(0.0, abs=1e-12)
    assert s.mu[0] == pytest.approx(2 * 0.1 / 3, abs=1e-12)


def test_coincident_k1():
    ref = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    s = knn_stats(np.array([[1.0, 0, 0]]), ref, k=1)
    assert s.mu[0] == 0.0 and s.sigma[0] == 0.0 and s.theta[0] == 0.0


def test_knn_brute_force(rng):
    pts = rng.uniform(size=(500, 3))
    d = neighbor_distances(pts, k=8)
    full = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    np.fill_diagonal(full, np.inf)
    assert np.array_equal(d, np.sort(full, axis=1)[:, :8])
    q = rng.uniform(size=(50, 3))
    d2 = neighbor_distances(q, pts, k=8)
    full2 = np.sqrt(((q[:, None] - pts[None]) ** 2).sum(-1))
    assert np.array_equal(d2, np.sort(full2, axis=1)[:, :8])


def test_knn_stats_population_form(rng):
    pts = rng.uniform(size=(100, 3))
    s = knn_stats(pts, k=5, lam=2.0)
    d = neighbor_distances(pts, k=5)
    assert np.allclose(s.sigma, np.sqrt(((d - d.mean(1, keepdims=True)) ** 2).mean(1)))
    assert np.allclose(s.bound, s.mu + 2.0 * s.sigma)
    assert np.all(s.theta >= s.mu) and np.all(s.sigma >= 0)


def test_knn_too_few():
    with pytest.raises(InvalidArgument):
        knn_stats(np.zeros((1, 3)), np.zeros((3, 3)), k=4)
    with pytest.raises(InvalidArgument):
        knn_stats(np.zeros((3, 3)), k=3)


def test_ground_hinge():
    assert loss_ground(np.array([0.3, -0.5]), np.array([0.2, 0.5])) == 0.0
    assert loss_ground(np.array([0.0]), np.array([0.2])) == pytest.approx(0.2)


def test_fg_hinge():
    assert loss_fg(np.array([0.05, -0.1]), np.array([0.1, 0.1])) == 0.0
    assert loss_fg(np.array([0.5]), np.array([0.1])) == pytest.approx(0.4)


def test_hinges_vs_direct(rng):
    f = rng.normal(size=200)
    b = rng.uniform(0, 1, size=200)
    g_ref = sum(max(bi - abs(fi), 0.0) for fi, bi in zip(f, b)) / 200
    fg_ref = sum(max(abs(fi) - bi, 0.0) for fi, bi in zip(f, b)) / 200
    assert abs(loss_ground(f, b) - g_ref) < 1e-9
    assert abs(loss_fg(f, b) - fg_ref) < 1e-9


def test_hinges_misaligned():
    with pytest.raises(InvalidArgument):
        loss_ground(np.zeros(3), np.zeros(2))


def test_hinge_subgradients(rng):
    f = rng.normal(size=30)
    b = rng.uniform(0.1, 1.0, size=30)
    h = 1e-5
    for loss, sign in ((loss_ground, -1.0), (loss_fg, 1.0)):
        for i in range(30):
            margin = abs(abs(f[i]) - b[i])
            if margin < 10 * h:
                continue
            fp, fm = f.copy(), f.copy()
            fp[i] += h
            fm[i] -= h
            fd = (loss(fp, b) - loss(fm, b)) / (2 * h)
            active = (b[i] > abs(f[i])) if sign < 0 else (abs(f[i]) > b[i])
            analytic = sign * np.sign(f[i]) / 30 if active else 0.0
            assert abs(fd - analytic) < 1e-6


def test_bin_values():
    assert loss_bin([0.0]) == pytest.approx(0.0, abs=1e-15)
    assert loss_bin([1.0]) == pytest.approx(0.0, abs=1e-15)
    assert loss_bin([0.5]) == pytest.approx(2 * np.log(0.6) - np.log(0.1) - np.log(1.1), abs=1e-12)
    assert loss_bin([0.5]) == pytest.approx(1.185623665657739, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 1.0))
def test_bin_symmetric_and_bounded(o):
    assert loss_bin([o]) == pytest.approx(loss_bin([1.0 - o]), abs=1e-12)
    assert -1e-12 <= loss_bin([o]) <= loss_bin([0.5]) + 1e-12


def test_bin_range():
    with pytest.raises(InvalidArgument):
        loss_bin([1.2])


def test_eikonal_sphere(rng):
    x = rng.normal(size=(1000, 3))
    assert loss_eikonal(x / np.linalg.norm(x, axis=1, keepdims=True)) < 1e-9
    assert loss_eikonal(np.zeros((10, 3))) == 1.0


def test_eikonal_plane_and_rotation(rng):
    n = np.tile([0.0, 0.6, 0.8], (20, 1))
    assert loss_eikonal(n) < 1e-9
    g = rng.normal(size=(50, 3))
    R = Rotation.random(random_state=rng).as_matrix()
    assert loss_eikonal(g @ R.T) == pytest.approx(loss_eikonal(g), rel=1e-12)
    ref = np.mean([(np.sqrt(v @ v) - 1) ** 2 for v in g])
    assert abs(loss_eikonal(g) - ref) < 1e-9


def test_total_loss_defaults():
    w = LossWeights()
    assert (w.eikonal, w.ground, w.foreground, w.binary) == (0.1, 0.1, 0.1, 0.1)
    assert total_loss(0.7, 0, 0, 0, 0) == 0.7
    a = total_loss(0.7, 0.1, 0.2, 0.3, 0.4) - 0.7
    b = total_loss(0.7, 0.2, 0.4, 0.6, 0.8) - 0.7
    assert b == pytest.approx(2 * a, rel=1e-12)
    assert a == pytest.approx(0.1, rel=1e-12)


def test_weights_validated():
    with pytest.raises(InvalidArgument):
        LossWeights(eikonal=-1.0)


def test_anneal():
    assert anneal_weight(0.1, 0, 15000) == 0.1
    assert anneal_weight(0.1, 15000, 15000) == 0.0
    assert anneal_weight(0.1, 7500, 15000) == pytest.approx(0.05)
    assert anneal_weight(0.1, 30000, 15000) == 0.0
    with pytest.raises(InvalidArgument):
        anneal_weight(0.1, 0, 0)


def test_box_sdf(rng):
    box = OrientedBox(np.array([1.0, 2.0, 3.0]), Rotation.random(random_state=rng).as_matrix(),
                      np.array([0.5, 0.3, 0.2]))
    pts = box.center + rng.normal(size=(400, 3))
    sdf, grad = box_sdf(box, pts)
    assert np.all((sdf <= 0) == box.contains(pts, tol=0.0))
    assert loss_eikonal(grad) < 1e-20
    # finite-difference check of the gradient away from kinks
    h = 1e-6
    for i in range(50):
        fd = np.array([(box_sdf(box, pts[i:i + 1] + h * e)[0] - box_sdf(box, pts[i:i + 1] - h * e)[0])[0] / (2 * h)
                       for e in np.eye(3)])
        if sdf[i] > 0:
            assert np.allclose(fd, grad[i], atol=1e-5)
    assert box_sdf(box, box.center[None])[0][0] == pytest.approx(-0.2)


def test_evaluate_all_sphere(rng):
    x = rng.normal(size=(300, 3))
    on = x / np.linalg.norm(x, axis=1, keepdims=True)
    fg = SdfSampleSet(on, np.zeros(300), on.copy())
    ground = SdfSampleSet(np.c_[rng.uniform(-3, 3, (200, 2)), np.full(200, -2.0)], np.full(200, 5.0))
    out = evaluate_all(ground, fg, np.array([0.0, 1.0]), l_color=0.3)
    assert out["l_eik"] < 1e-9 and out["l_fg"] == 0.0 and out["l_g"] == 0.0 and out["l_bin"] == 0.0
    assert out["total"] == pytest.approx(0.3)
    annealed = evaluate_all(ground, fg, np.array([0.5]), step=10, anneal_steps=10)
    assert annealed["total"] == 0.0
