"""Deliberately naive reference implementations used as test oracles.

Each oracle takes a route independent of the engine: explicit loops,
explicit matrix inverses, pairwise counting. Keep them slow and obvious.
"""

import numpy as np


def nn_cosine_oracle(train, test):
    """Double-loop maximum cosine similarity."""
    out = np.empty(len(test))
    for j, t in enumerate(test):
        best = -np.inf
        for x in train:
            sim = float(np.dot(t, x) / (np.linalg.norm(t) * np.linalg.norm(x)))
            best = max(best, sim)
        out[j] = best
    return out


def gaussian_stats_oracle(features, labels, n_classes):
    """Naive per-sample summation of means and pooled covariance."""
    features = np.asarray(features, dtype=np.float64)
    n, d = features.shape
    means = np.zeros((n_classes, d))
    counts = np.zeros(n_classes)
    for z, y in zip(features, labels):
        means[y] += z
        counts[y] += 1
    means /= counts[:, None]

    cov = np.zeros((d, d))
    for z, y in zip(features, labels):
        delta = (z - means[y])[:, None]
        cov += delta @ delta.T
    cov /= n

    mu0 = features.mean(axis=0)
    cov0 = np.zeros((d, d))
    for z in features:
        delta = (z - mu0)[:, None]
        cov0 += delta @ delta.T
    cov0 /= n
    return means, cov, mu0, cov0


def md_oracle(means, cov, epsilon, test):
    """Explicit-inverse Mahalanobis score, looped over samples and classes."""
    inv = np.linalg.inv(cov + epsilon * np.eye(cov.shape[0]))
    out = np.empty(len(test))
    for j, z in enumerate(test):
        dists = [float((z - mu) @ inv @ (z - mu)) for mu in means]
        out[j] = -min(dists)
    return out


def rmd_oracle(means, cov, mu0, cov0, epsilon, test):
    inv = np.linalg.inv(cov + epsilon * np.eye(cov.shape[0]))
    inv0 = np.linalg.inv(cov0 + epsilon * np.eye(cov0.shape[0]))
    out = np.empty(len(test))
    for j, z in enumerate(test):
        md0 = float((z - mu0) @ inv0 @ (z - mu0))
        dists = [float((z - mu) @ inv @ (z - mu)) - md0 for mu in means]
        out[j] = -min(dists)
    return out


def auroc_pair_count_oracle(in_scores, out_scores):
    """O(n^2) pairwise counting: wins plus half ties."""
    total = 0.0
    for a in in_scores:
        for b in out_scores:
            if a > b:
                total += 1.0
            elif a == b:
                total += 0.5
    return total / (len(in_scores) * len(out_scores))


def smoothness_oracle(rho):
    """Direct double-loop evaluation of the squared finite differences."""
    c, h, w = rho.shape
    total = 0.0
    for k in range(c):
        for i in range(h):
            for j in range(w):
                dh = rho[k, i + 1, j] - rho[k, i, j] if i + 1 < h else 0.0
                dw = rho[k, i, j + 1] - rho[k, i, j] if j + 1 < w else 0.0
                total += dh * dh + dw * dw
    return total / (c * h * w)


def finite_difference_grad(fn, x, h=1e-6):
    """Central finite differences of a scalar function over an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    base = x.copy().ravel()
    for i in range(x.size):
        up = base.copy()
        down = base.copy()
        up[i] += h
        down[i] -= h
        flat[i] = (fn(up.reshape(x.shape)) - fn(down.reshape(x.shape))) / (2 * h)
    return grad
