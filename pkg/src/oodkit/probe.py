"""Linear probing on frozen features.

Trains a single linear layer with Adam, decoupled weight decay (weights
only, never the bias), a cosine learning-rate schedule, and multinomial
cross-entropy. Mini-batches are drawn by reshuffling the full dataset each
epoch from a seeded generator, so training is bit-reproducible.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import store
from .scores import ScoreVector, fit_gaussian_stats, msp_score, rmd_score, softmax
from .store import LabelVector, Manifest

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 20_000
    batch_size: int = 256
    weight_decay: float = 1e-2
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.lr_end <= self.lr_start:
            raise ValueError(
                f"need 0 < lr_end <= lr_start, got {self.lr_end}, {self.lr_start}"
            )
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass(frozen=True)
class LinearHead:
    """Trained classification head: logits(x) = x @ weights.T + bias."""

    weights: np.ndarray
    bias: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    def logits(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[1] != self.feature_dim:
            raise ValueError(
                f"feature dim {features.shape[1]} vs head dim {self.feature_dim}"
            )
        return features @ self.weights.T + self.bias


@dataclass(frozen=True)
class PseudoLabelSet:
    """Confidently pseudo-labeled subset of a training set."""

    kept_indices: np.ndarray
    pseudo_labels: np.ndarray
    confidence_threshold: float


def cosine_lr(step: int, config: ProbeConfig) -> float:
    """Cosine schedule from lr_start at step 0 to lr_end at the last step.

    lr(t) = lr_end + 0.5 * (lr_start - lr_end) * (1 + cos(pi * t / (steps-1)))
    """
    if not 0 <= step < config.steps:
        raise ValueError(f"step {step} outside [0, {config.steps})")
    if config.steps == 1:
        return config.lr_start
    span = config.lr_start - config.lr_end
    return config.lr_end + 0.5 * span * (1.0 + np.cos(np.pi * step / (config.steps - 1)))


class AdamW:
    """Adam with decoupled weight decay on a list of parameter arrays.

    Decay multiplies decayed parameters by (1 - lr * wd) independently of
    the gradient moments, so a zero gradient still shrinks the weights.
    """

    def __init__(self, params: list[np.ndarray], weight_decay: float,
                 decay_mask: list[bool]):
        self.params = params
        self.weight_decay = weight_decay
        self.decay_mask = decay_mask
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1 ** self.t
        bc2 = 1.0 - ADAM_BETA2 ** self.t
        for p, g, m, v, decay in zip(self.params, grads, self.m, self.v,
                                     self.decay_mask):
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            if decay:
                p -= lr * self.weight_decay * p
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


def cross_entropy_grads(weights: np.ndarray, bias: np.ndarray,
                        features: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over a batch and its analytic W/b gradients."""
    logits = features @ weights.T + bias
    probs = softmax(logits)
    batch = len(labels)
    idx = np.arange(batch)
    # log softmax of the true class, computed stably from shifted logits
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[idx, labels].mean()

    dlogits = probs
    dlogits[idx, labels] -= 1.0
    dlogits /= batch
    grad_w = dlogits.T @ features
    grad_b = dlogits.sum(axis=0)
    return loss, grad_w, grad_b


def train_probe(features: np.ndarray, labels: LabelVector, config: ProbeConfig,
                loss_trace: list | None = None) -> LinearHead:
    """Train a linear head on frozen features.

    Deterministic for a fixed config seed: initialization is zeros and the
    only randomness is the epoch shuffling. Pass ``loss_trace`` to collect
    the per-step training loss.

    Raises:
        ValueError: fewer than 2 classes, a class with no samples, or a
            non-finite loss (reported with the offending step index).
    """
    features = np.asarray(features, dtype=np.float64)
    y = labels.labels
    n, d = features.shape
    if labels.n_classes < 2:
        raise ValueError("at least 2 classes required")
    if len(y) != n:
        raise ValueError(f"{len(y)} labels for {n} samples")
    counts = np.bincount(y, minlength=labels.n_classes)
    if (counts == 0).any():
        missing = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(f"class {missing} absent from labels")

    rng = np.random.default_rng(config.seed)
    weights = np.zeros((labels.n_classes, d))
    bias = np.zeros(labels.n_classes)
    opt = AdamW([weights, bias], config.weight_decay, decay_mask=[True, False])

    order = rng.permutation(n)
    cursor = 0
    for step in range(config.steps):
        if cursor >= n:
            order = rng.permutation(n)
            cursor = 0
        batch_idx = order[cursor : cursor + config.batch_size]
        cursor += config.batch_size

        loss, grad_w, grad_b = cross_entropy_grads(
            weights, bias, features[batch_idx], y[batch_idx]
        )
        if not np.isfinite(loss):
            raise ValueError(f"non-finite loss at step {step}")
        if loss_trace is not None:
            loss_trace.append(float(loss))
        opt.step([grad_w, grad_b], cosine_lr(step, config))

    return LinearHead(weights=weights, bias=bias)


def probe_accuracy(head: LinearHead, features: np.ndarray,
                   labels: LabelVector) -> float:
    preds = head.logits(features).argmax(axis=1)
    return float((preds == labels.labels).mean())


def pseudo_label_filter(zero_shot_logits: np.ndarray,
                        threshold: float = 0.9) -> PseudoLabelSet:
    """Keep samples whose maximum softmax probability reaches ``threshold``.

    The argmax class becomes the pseudo-label of each kept sample.
    """
    logits = np.asarray(zero_shot_logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise ValueError("non-finite logit")
    probs = softmax(logits)
    confidence = probs.max(axis=1)
    kept = np.flatnonzero(confidence >= threshold)
    return PseudoLabelSet(
        kept_indices=kept,
        pseudo_labels=probs.argmax(axis=1)[kept],
        confidence_threshold=float(threshold),
    )


def few_shot_select(labels: LabelVector, p: int, seed: int = 0) -> np.ndarray:
    """Pick exactly p sample indices per class, without replacement."""
    rng = np.random.default_rng(seed)
    y = labels.labels
    chosen = []
    for c in range(labels.n_classes):
        members = np.flatnonzero(y == c)
        if len(members) < p:
            raise ValueError(f"class {c} has {len(members)} samples, need {p}")
        chosen.append(rng.choice(members, size=p, replace=False))
    return np.concatenate(chosen)


def evaluate_probe(head: LinearHead, in_test: np.ndarray, out_test: np.ndarray,
                   score_kind: str, train_features: np.ndarray | None = None,
                   train_labels: LabelVector | None = None,
                   epsilon: float | None = None):
    """Score test sets through a trained head.

    ``msp`` takes the maximum softmax probability of the head's logits.
    ``rmd-logits`` fits Gaussian stats on the TRAIN logits (with the train
    labels) and computes the relative Mahalanobis score on test logits.

    Returns:
        (in ScoreVector, out ScoreVector)
    """
    if score_kind == "msp":
        return msp_score(head.logits(in_test)), msp_score(head.logits(out_test))
    if score_kind == "rmd-logits":
        if train_features is None or train_labels is None:
            raise ValueError("rmd-logits needs train features and labels")
        stats = fit_gaussian_stats(head.logits(train_features), train_labels,
                                   epsilon=epsilon)
        s_in = rmd_score(stats, head.logits(in_test))
        s_out = rmd_score(stats, head.logits(out_test))
        return (ScoreVector(s_in.scores, "rmd-logits"),
                ScoreVector(s_out.scores, "rmd-logits"))
    raise ValueError(f"unknown probe score kind {score_kind!r}")


def write_linear_head(head: LinearHead, path: str | os.PathLike,
                      name: str = "linear-head") -> None:
    """Serialize a head into the standard container.

    The payload is a single row: the weight matrix row-major, then the bias.
    The manifest records the shape needed to undo the flattening.
    """
    row = np.concatenate([
        head.weights.astype(np.float32).ravel(),
        head.bias.astype(np.float32),
    ])
    manifest = Manifest(
        name=name, role="linear-head",
        extra={"n_classes": head.n_classes, "feature_dim": head.feature_dim},
    )
    store.write_embeddings(row[None, :], None, manifest, path)


def read_linear_head(path: str | os.PathLike) -> LinearHead:
    matrix, _, manifest = store.read_embeddings(path)
    if manifest.role != "linear-head":
        raise store.InvariantViolationError(
            f"container role {manifest.role!r} is not 'linear-head'"
        )
    try:
        c = int(manifest.extra["n_classes"])
        d = int(manifest.extra["feature_dim"])
    except KeyError as exc:
        raise store.InvariantViolationError(f"head manifest missing {exc}") from exc
    flat = matrix.ravel()
    if flat.size != c * d + c:
        raise store.InvariantViolationError(
            f"head payload has {flat.size} values, expected {c * d + c}"
        )
    return LinearHead(
        weights=flat[: c * d].astype(np.float64).reshape(c, d),
        bias=flat[c * d :].astype(np.float64),
    )
