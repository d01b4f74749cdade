"""OOD-detection evaluation engine on precomputed feature embeddings."""

from .adversarial import (
    AttackConfig,
    AttackResult,
    ToyEncoder,
    attack,
    build_adversarial_dataset,
    smoothness_grad,
    smoothness_loss,
)
from .metrics import AurocResult, EvalReport, auroc, knn_accuracy
from .probe import (
    LinearHead,
    ProbeConfig,
    PseudoLabelSet,
    cosine_lr,
    evaluate_probe,
    few_shot_select,
    pseudo_label_filter,
    read_linear_head,
    train_probe,
    write_linear_head,
)
from .scores import (
    ClusterModel,
    GaussianStats,
    ScoreVector,
    fit_gaussian_stats,
    kmeans_fit,
    kmeans_md_score,
    knn_classify,
    md_score,
    msp_score,
    nn_score,
    rmd_score,
)
from .store import (
    LabelVector,
    Manifest,
    read_embeddings,
    read_images,
    write_embeddings,
    write_images,
)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackResult", "ToyEncoder", "attack",
    "build_adversarial_dataset", "smoothness_grad", "smoothness_loss",
    "AurocResult", "EvalReport", "auroc", "knn_accuracy",
    "LinearHead", "ProbeConfig", "PseudoLabelSet", "cosine_lr",
    "evaluate_probe", "few_shot_select", "pseudo_label_filter",
    "read_linear_head", "train_probe", "write_linear_head",
    "ClusterModel", "GaussianStats", "ScoreVector", "fit_gaussian_stats",
    "kmeans_fit", "kmeans_md_score", "knn_classify", "md_score", "msp_score",
    "nn_score", "rmd_score",
    "LabelVector", "Manifest", "read_embeddings", "read_images",
    "write_embeddings", "write_images",
]
