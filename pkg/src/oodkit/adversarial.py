"""Adversarial manipulation of OOD images toward in-distribution features.

Optimizes a pixel perturbation rho so that the encoder's feature for
x' + rho matches a chosen in-distribution target feature (maximum cosine
similarity), optionally regularized by a smoothness penalty on rho. The
perturbation size is never bounded explicitly; only the step count limits
it. After every optimizer update, x' + rho is clipped to [0, 1] and rho is
redefined as the clipped difference.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Protocol

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class EncoderInterface(Protocol):
    """Deterministic differentiable image encoder.

    ``encode`` maps a (3, H, W) image in [0,1] to a feature vector.
    ``grad_similarity`` returns the cosine similarity between the image's
    feature and ``target``, plus the gradient of NEGATIVE similarity with
    respect to every pixel (same shape as the image).
    """

    def encode(self, image: np.ndarray) -> np.ndarray: ...

    def grad_similarity(self, image: np.ndarray,
                        target: np.ndarray) -> tuple[float, np.ndarray]: ...


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 250
    lr: float = 1e-3
    lambda_smooth: float = 0.0
    init_sigma: float = float(np.sqrt(1e-3))
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.lambda_smooth < 0:
            raise ValueError(f"lambda_smooth must be >= 0, got {self.lambda_smooth}")


@dataclass(frozen=True)
class AttackResult:
    perturbed_image: np.ndarray
    initial_similarity: float
    final_similarity: float
    loss_trace: np.ndarray
    smooth_loss_final: float
    success: bool


def _check_image(image: np.ndarray, name: str = "image") -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"{name} must have shape (3, H, W), got {image.shape}")
    if image.shape[1] < 2 or image.shape[2] < 2:
        raise ValueError(f"{name} needs H, W >= 2, got {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError(f"{name} pixels outside [0, 1]")
    return image


def _forward_diffs(rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Forward differences, zero-padded at the trailing row/column so both
    # gradient images keep the full (3, H, W) shape.
    dh = np.zeros_like(rho)
    dw = np.zeros_like(rho)
    dh[:, :-1, :] = rho[:, 1:, :] - rho[:, :-1, :]
    dw[:, :, :-1] = rho[:, :, 1:] - rho[:, :, :-1]
    return dh, dw


def smoothness_loss(rho: np.ndarray) -> float:
    """Mean squared finite-difference gradient of the perturbation.

    (1 / 3HW) * sum over channels and pixels of (d rho/dh)^2 + (d rho/dw)^2,
    with forward differences and a zero trailing boundary.
    """
    rho = np.asarray(rho, dtype=np.float64)
    dh, dw = _forward_diffs(rho)
    return float((dh * dh + dw * dw).sum() / rho.size)


def smoothness_grad(rho: np.ndarray) -> np.ndarray:
    """Analytic gradient of :func:`smoothness_loss` with respect to rho."""
    rho = np.asarray(rho, dtype=np.float64)
    dh, dw = _forward_diffs(rho)
    grad = np.zeros_like(rho)
    # d/d rho[i] of sum dh^2: -2*dh[i] (as left endpoint) + 2*dh[i-1] (as right)
    grad[:, :-1, :] -= dh[:, :-1, :]
    grad[:, 1:, :] += dh[:, :-1, :]
    grad[:, :, :-1] -= dw[:, :, :-1]
    grad[:, :, 1:] += dw[:, :, :-1]
    return grad * (2.0 / rho.size)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


TOY_ENCODER_VERSION = 1


class ToyEncoder:
    """Desk-scale stand-in for a pretrained backbone.

    A fixed seeded random projection of the flattened pixels, an elementwise
    tanh, then a final linear map. The architecture and weight derivation
    are frozen (version 1) so regression thresholds stay stable.
    """

    def __init__(self, image_shape: tuple[int, int, int] = (3, 8, 8),
                 feature_dim: int = 32, seed: int = 0):
        c, h, w = image_shape
        if c != 3:
            raise ValueError("ToyEncoder expects 3-channel images")
        self.image_shape = (c, h, w)
        self.feature_dim = feature_dim
        n_pixels = c * h * w
        rng = np.random.default_rng(seed)
        self.projection = rng.normal(0.0, 1.0 / np.sqrt(n_pixels),
                                     size=(feature_dim, n_pixels))
        self.output_map = rng.normal(0.0, 1.0 / np.sqrt(feature_dim),
                                     size=(feature_dim, feature_dim))

    def encode(self, image: np.ndarray) -> np.ndarray:
        x = np.asarray(image, dtype=np.float64).ravel()
        if x.size != self.projection.shape[1]:
            raise ValueError(
                f"image has {x.size} pixels, encoder expects {self.projection.shape[1]}"
            )
        return self.output_map @ np.tanh(self.projection @ x)

    def grad_similarity(self, image: np.ndarray,
                        target: np.ndarray) -> tuple[float, np.ndarray]:
        x = np.asarray(image, dtype=np.float64).ravel()
        t = np.asarray(target, dtype=np.float64)
        if t.size != self.feature_dim:
            raise ValueError(
                f"target has {t.size} dims, encoder emits {self.feature_dim}"
            )
        hidden = np.tanh(self.projection @ x)
        z = self.output_map @ hidden
        z_norm = np.linalg.norm(z)
        t_norm = np.linalg.norm(t)
        sim = float(z @ t / (z_norm * t_norm))
        # d sim / dz = (t_hat - sim * z_hat) / ||z||
        dsim_dz = (t / t_norm - sim * z / z_norm) / z_norm
        dz_dhidden = self.output_map.T @ dsim_dz
        dsim_dx = self.projection.T @ (dz_dhidden * (1.0 - hidden * hidden))
        return sim, (-dsim_dx).reshape(self.image_shape)


def attack(x_out: np.ndarray, target_feature: np.ndarray,
           encoder: EncoderInterface, config: AttackConfig) -> AttackResult:
    """Optimize a perturbation of ``x_out`` toward ``target_feature``.

    Minimizes -cos(g(x' + rho), target) + lambda * smoothness(rho) with Adam
    on rho, starting from seeded Gaussian noise. x' + rho is clipped to the
    pixel range after initialization and after each update; Adam moments are
    not reset by clipping. Success means the final similarity strictly
    exceeds the initial one (trivially true if already at the maximum).
    """
    x_out = _check_image(x_out, "x_out")
    rng = np.random.default_rng(config.seed)
    lam = config.lambda_smooth

    initial_similarity = cosine_similarity(encoder.encode(x_out), target_feature)

    rho = rng.normal(0.0, config.init_sigma, size=x_out.shape)
    rho = np.clip(x_out + rho, 0.0, 1.0) - x_out

    m = np.zeros_like(rho)
    v = np.zeros_like(rho)
    trace = np.empty(config.steps)
    for step in range(1, config.steps + 1):
        sim, grad = encoder.grad_similarity(x_out + rho, target_feature)
        loss = -sim
        if lam > 0.0:
            loss += lam * smoothness_loss(rho)
            grad = grad + lam * smoothness_grad(rho)
        if not np.isfinite(loss):
            raise ValueError(f"non-finite attack loss at step {step - 1}")
        trace[step - 1] = loss

        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * grad * grad
        m_hat = m / (1.0 - ADAM_BETA1 ** step)
        v_hat = v / (1.0 - ADAM_BETA2 ** step)
        rho = rho - config.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        rho = np.clip(x_out + rho, 0.0, 1.0) - x_out

    perturbed = x_out + rho
    final_similarity = cosine_similarity(encoder.encode(perturbed), target_feature)
    success = (final_similarity > initial_similarity
               or initial_similarity >= 1.0 - 1e-9)
    return AttackResult(
        perturbed_image=perturbed,
        initial_similarity=initial_similarity,
        final_similarity=final_similarity,
        loss_trace=trace,
        smooth_loss_final=smoothness_loss(rho),
        success=success,
    )


def build_adversarial_dataset(out_images: list[np.ndarray],
                              in_images: list[np.ndarray],
                              encoder: EncoderInterface, config: AttackConfig,
                              seed: int = 0):
    """Attack every OOD image toward a randomly chosen in-distribution target.

    Target choice is seeded; per-image attack seeds are derived as
    seed XOR image-index, so results do not depend on execution order.

    Returns:
        (list of AttackResult, array of chosen target indices). Evaluation
        must drop each chosen target from the in-distribution reference set.
    """
    if not out_images or not in_images:
        raise ValueError("both image lists must be non-empty")
    rng = np.random.default_rng(seed)
    target_indices = rng.integers(0, len(in_images), size=len(out_images))

    results = []
    for i, x_out in enumerate(out_images):
        target_feature = encoder.encode(np.asarray(in_images[target_indices[i]]))
        per_image = replace(config, seed=seed ^ i)
        results.append(attack(x_out, target_feature, encoder, per_image))
    return results, target_indices
