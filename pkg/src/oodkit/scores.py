"""Anomaly scoring on precomputed feature embeddings.

Every score follows one orientation: HIGHER means MORE in-distribution.
Available score kinds:

    nn         max cosine similarity to the in-distribution training set
    md         negated minimum squared Mahalanobis distance over classes
    rmd        md relative to a single background Gaussian over all data
    kmeans-md  md with k-means cluster assignments as pseudo-labels
    msp        maximum softmax probability of classifier logits
    rmd-logits rmd fitted on linear-head logits instead of raw features

All fitted models are immutable after construction; scoring functions are
pure and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .store import LabelVector

SCORE_KINDS = ("nn", "md", "rmd", "kmeans-md", "msp", "rmd-logits")


class DimensionMismatchError(ValueError):
    """Feature dimensionality of two inputs disagrees."""


class SingularCovarianceError(ValueError):
    """Covariance factorization failed even after regularization."""


@dataclass(frozen=True)
class ScoreVector:
    """Per-sample anomaly scores, higher = more in-distribution."""

    scores: np.ndarray
    kind: str

    def __post_init__(self):
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))
        if not np.isfinite(self.scores).all():
            raise ValueError(f"non-finite {self.kind} score")


@dataclass(frozen=True)
class GaussianStats:
    """Class-conditional Gaussian fit with one shared covariance.

    ``class_means[c]`` is the mean of class c; ``shared_cov`` is the pooled
    covariance normalized by the total sample count. The background fields
    describe a single Gaussian over all samples regardless of class, used by
    the relative score. Both factorizations are of (cov + epsilon*I).
    """

    class_means: np.ndarray
    shared_cov: np.ndarray
    background_mean: np.ndarray
    background_cov: np.ndarray
    epsilon: float
    _shared_factor: tuple
    _background_factor: tuple

    @property
    def n_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def dim(self) -> int:
        return self.class_means.shape[1]


@dataclass(frozen=True)
class ClusterModel:
    """k-means result: centers, hard assignments, and final inertia."""

    centers: np.ndarray
    assignments: np.ndarray
    k: int
    n_iter: int
    inertia: float


def _as_float64(matrix: np.ndarray, name: str) -> np.ndarray:
    out = np.asarray(matrix, dtype=np.float64)
    if out.ndim != 2 or out.shape[0] < 1 or out.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D matrix, got shape {out.shape}")
    return out


def _check_dims(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatchError(
            f"{what}: dimension mismatch ({a.shape[1]} vs {b.shape[1]})"
        )


def _unit_rows(matrix: np.ndarray, name: str) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if (norms == 0.0).any():
        raise ValueError(f"zero-norm row in {name}; cosine similarity undefined")
    return matrix / norms


def nn_score(train: np.ndarray, test: np.ndarray) -> ScoreVector:
    """1-NN score: maximum cosine similarity to any training row.

    score[j] = max_i cos(test[j], train[i]), in [-1, 1].
    """
    train = _as_float64(train, "train")
    test = _as_float64(test, "test")
    _check_dims(train, test, "nn_score")
    sims = _unit_rows(test, "test") @ _unit_rows(train, "train").T
    return ScoreVector(sims.max(axis=1), "nn")


def knn_classify(train: np.ndarray, train_labels: LabelVector,
                 test: np.ndarray, k: int) -> np.ndarray:
    """Predict classes by majority vote over the k most cosine-similar rows.

    Vote ties are broken by the higher summed similarity of the tied class's
    neighbors, then by the lower class index.
    """
    train = _as_float64(train, "train")
    test = _as_float64(test, "test")
    _check_dims(train, test, "knn_classify")
    if not 1 <= k <= train.shape[0]:
        raise ValueError(f"k must be in [1, {train.shape[0]}], got {k}")

    labels = train_labels.labels
    n_classes = train_labels.n_classes
    sims = _unit_rows(test, "test") @ _unit_rows(train, "train").T
    # Stable sort so equal similarities resolve to the lowest train index.
    nearest = np.argsort(-sims, axis=1, kind="stable")[:, :k]

    preds = np.empty(test.shape[0], dtype=np.int64)
    for j in range(test.shape[0]):
        neigh_labels = labels[nearest[j]]
        neigh_sims = sims[j, nearest[j]]
        counts = np.bincount(neigh_labels, minlength=n_classes)
        sums = np.bincount(neigh_labels, weights=neigh_sims, minlength=n_classes)
        best = counts.max()
        tied = np.flatnonzero(counts == best)
        preds[j] = tied[np.argmax(sums[tied])] if len(tied) > 1 else tied[0]
    return preds


def fit_gaussian_stats(features: np.ndarray, labels: LabelVector,
                       epsilon: float | None = None) -> GaussianStats:
    """Fit per-class means with a shared covariance, plus background stats.

    The shared covariance pools centered deviations over all classes and
    divides by the total sample count N (not N - C). The background Gaussian
    is fitted on all samples ignoring labels. Both covariances are
    regularized as cov + epsilon*I before Cholesky factorization; epsilon
    defaults to 1e-6 * trace(cov) / dim.

    Raises:
        SingularCovarianceError: factorization fails after regularization.
    """
    features = _as_float64(features, "features")
    n, d = features.shape
    y = labels.labels
    if len(y) != n:
        raise ValueError(f"{len(y)} labels for {n} samples")
    counts = np.bincount(y, minlength=labels.n_classes)
    if (counts == 0).any():
        missing = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(f"class {missing} has no samples")

    means = np.zeros((labels.n_classes, d))
    np.add.at(means, y, features)
    means /= counts[:, None]

    centered = features - means[y]
    shared_cov = centered.T @ centered / n

    mu0 = features.mean(axis=0)
    centered0 = features - mu0
    background_cov = centered0.T @ centered0 / n

    if epsilon is None:
        epsilon = 1e-6 * float(np.trace(shared_cov)) / d
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")

    eye = np.eye(d)
    try:
        shared_factor = cho_factor(shared_cov + epsilon * eye, lower=True)
        background_factor = cho_factor(background_cov + epsilon * eye, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError("covariance singular; increase epsilon") from exc

    return GaussianStats(
        class_means=means,
        shared_cov=shared_cov,
        background_mean=mu0,
        background_cov=background_cov,
        epsilon=float(epsilon),
        _shared_factor=shared_factor,
        _background_factor=background_factor,
    )


def _mahalanobis_sq(factor: tuple, mean: np.ndarray, test: np.ndarray) -> np.ndarray:
    delta = test - mean
    solved = cho_solve(factor, delta.T)
    return np.einsum("ij,ji->i", delta, solved)


def _class_distances(stats: GaussianStats, test: np.ndarray) -> np.ndarray:
    test = _as_float64(test, "test")
    if test.shape[1] != stats.dim:
        raise DimensionMismatchError(
            f"test dim {test.shape[1]} vs fitted dim {stats.dim}"
        )
    dists = np.empty((test.shape[0], stats.n_classes))
    for c in range(stats.n_classes):
        dists[:, c] = _mahalanobis_sq(stats._shared_factor, stats.class_means[c], test)
    return dists


def md_score(stats: GaussianStats, test: np.ndarray) -> ScoreVector:
    """Mahalanobis score: negated minimum squared distance over classes.

    score[j] = -min_c (z_j - mu_c)^T (cov + eps*I)^{-1} (z_j - mu_c), <= 0.
    """
    return ScoreVector(-_class_distances(stats, test).min(axis=1), "md")


def rmd_score(stats: GaussianStats, test: np.ndarray) -> ScoreVector:
    """Relative Mahalanobis score.

    score[j] = -min_c (MD_c(z_j) - MD_0(z_j)), where MD_0 is the squared
    distance under the background Gaussian. Positive when the best class
    explains the sample better than the background.
    """
    class_d = _class_distances(stats, test)
    background_d = _mahalanobis_sq(
        stats._background_factor, stats.background_mean,
        np.asarray(test, dtype=np.float64),
    )
    return ScoreVector(-(class_d.min(axis=1) - background_d), "rmd")


def _kmeans_pp_init(features: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = features.shape[0]
    centers = np.empty((k, features.shape[1]))
    centers[0] = features[rng.integers(n)]
    closest = ((features - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # All remaining points coincide with a center; any choice works.
            centers[i] = features[rng.integers(n)]
            continue
        idx = rng.choice(n, p=closest / total)
        centers[i] = features[idx]
        closest = np.minimum(closest, ((features - centers[i]) ** 2).sum(axis=1))
    return centers


def kmeans_fit(features: np.ndarray, k: int, max_iters: int = 300,
               seed: int = 0) -> ClusterModel:
    """Lloyd's algorithm from a seeded k-means++ initialization.

    Runs until assignments stop changing or ``max_iters`` is reached. Empty
    clusters are repaired by promoting the point farthest from its assigned
    center, so the output never contains an empty cluster. Inertia is
    checked to be non-increasing at every iteration.
    """
    features = _as_float64(features, "features")
    n = features.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(features, k, rng)

    sq_norms = (features ** 2).sum(axis=1)
    prev_inertia = np.inf
    assignments = np.full(n, -1, dtype=np.int64)
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        d2 = sq_norms[:, None] - 2.0 * features @ centers.T + (centers ** 2).sum(axis=1)
        np.maximum(d2, 0.0, out=d2)
        new_assignments = d2.argmin(axis=1)
        point_d2 = d2[np.arange(n), new_assignments]

        counts = np.bincount(new_assignments, minlength=k)
        while (counts == 0).any():
            # Promote the farthest point whose donor cluster keeps >= 1 member.
            empty = int(np.flatnonzero(counts == 0)[0])
            candidates = counts[new_assignments] >= 2
            donor_d2 = np.where(candidates, point_d2, -np.inf)
            farthest = int(donor_d2.argmax())
            counts[new_assignments[farthest]] -= 1
            counts[empty] += 1
            new_assignments[farthest] = empty
            point_d2[farthest] = 0.0

        inertia = float(point_d2.sum())
        assert inertia <= prev_inertia * (1 + 1e-12) + 1e-12, (
            f"inertia increased at iteration {n_iter}: {prev_inertia} -> {inertia}"
        )
        converged = np.array_equal(new_assignments, assignments)
        assignments = new_assignments
        prev_inertia = inertia
        if converged:
            break
        sums = np.zeros_like(centers)
        np.add.at(sums, assignments, features)
        centers = sums / counts[:, None]

    final_d2 = ((features - centers[assignments]) ** 2).sum(axis=1)
    return ClusterModel(centers=centers, assignments=assignments, k=k,
                        n_iter=n_iter, inertia=float(final_d2.sum()))


def kmeans_md_score(features: np.ndarray, test: np.ndarray, k: int,
                    epsilon: float | None = None, seed: int = 0) -> ScoreVector:
    """Label-free Mahalanobis: k-means assignments act as pseudo-labels."""
    model = kmeans_fit(features, k, seed=seed)
    pseudo = LabelVector(model.assignments, k)
    stats = fit_gaussian_stats(features, pseudo, epsilon=epsilon)
    return ScoreVector(md_score(stats, test).scores, "kmeans-md")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for overflow safety."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def msp_score(logits: np.ndarray) -> ScoreVector:
    """Maximum softmax probability per sample, in (1/C, 1]."""
    logits = _as_float64(logits, "logits")
    if not np.isfinite(logits).all():
        raise ValueError("non-finite logit")
    return ScoreVector(softmax(logits).max(axis=1), "msp")


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """L2-normalize feature rows (optional preprocessing for md/rmd)."""
    matrix = _as_float64(matrix, "matrix")
    return _unit_rows(matrix, "matrix")
