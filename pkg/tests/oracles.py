"""Independent reference implementations used only by the tests."""

import itertools

import numpy as np


def jacobi_eigh(A, tol=1e-15, max_sweeps=100):
    """Cyclic Jacobi rotations for a dense symmetric matrix; ascending eigenpairs."""
    A = np.array(A, dtype=float)
    n = len(A)
    V = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(A, -1) ** 2))
        if off < tol * max(1.0, np.linalg.norm(A)):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * A[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q], J[q, p] = s, -s
                A = J.T @ A @ J
                V = V @ J
    vals = np.diag(A)
    order = np.argsort(vals)
    return vals[order], V[:, order]


def ncut_direct(W, labels):
    a = np.asarray(labels, dtype=bool)
    cut = sum(W[i, j] for i in np.flatnonzero(a) for j in np.flatnonzero(~a))
    vol_a = W[a].sum()
    vol_b = W[~a].sum()
    return cut / vol_a + cut / vol_b


def exhaustive_min_ncut(W):
    """Minimum NCut over all 2^(n-1) - 1 bipartitions (vertex 0 fixed on side A)."""
    n = len(W)
    deg = W.sum(axis=1)
    vol = deg.sum()
    best = np.inf
    for bits in itertools.product([False, True], repeat=n - 1):
        a = np.array((True,) + bits)
        if a.all():
            continue
        cut = W[a][:, ~a].sum()
        va = deg[a].sum()
        best = min(best, cut / va + cut / (vol - va))
    return best


def grouped_cosine_direct(Zi, Zj):
    vals = []
    for k in range(len(Zi)):
        a, b = Zi[k], Zj[k]
        vals.append(float(np.dot(a, b) / (np.sqrt(np.dot(a, a)) * np.sqrt(np.dot(b, b)))))
    return max(vals)


def linear_attention_quadratic(Q, K, V, heads, eps=1e-6):
    """Explicit n x n weight matrix per head."""
    def phi(x):
        return np.where(x > 0, x + 1.0, np.exp(x))

    n, D = Q.shape
    dh = D // heads
    out = np.zeros((n, D))
    for h in range(heads):
        s = slice(h * dh, (h + 1) * dh)
        fq, fk = phi(Q[:, s]), phi(K[:, s])
        A = fq @ fk.T
        out[:, s] = (A @ V[:, s]) / (A.sum(axis=1, keepdims=True) + eps)
    return out


def random_connected_graph(rng, n, kind="uniform"):
    if kind == "uniform":
        W = rng.uniform(0.0, 1.0, size=(n, n))
    elif kind == "sparse":
        W = rng.uniform(0.0, 1.0, size=(n, n)) * (rng.uniform(size=(n, n)) < 0.4)
        path = rng.permutation(n)
        for a, b in zip(path[:-1], path[1:]):
            W[a, b] = W[b, a] = max(W[a, b], 0.05)
    else:
        groups = rng.integers(0, 3, size=n)
        same = groups[:, None] == groups[None, :]
        W = np.where(same, rng.uniform(0.5, 1.0, size=(n, n)), rng.uniform(0.0, 0.1, size=(n, n)))
    W = np.triu(W, 1)
    W = W + W.T
    return W
