"""Feature extraction and zero-shot logits emission."""

from __future__ import annotations

import numpy as np
import torch

from .container import write_feature_container
from .datasets import ImageDataset, resize_images

DEFAULT_PROMPT = "an image of a {label}"


def _to_tensor(backbone, item) -> torch.Tensor:
    # Container items arrive as ready (3, H, W) f32 pixels; PIL images go
    # through the backbone's own preprocessing.
    if isinstance(item, np.ndarray):
        return torch.from_numpy(item.copy())
    return backbone.preprocess(item)


def _encode_dataset(backbone, dataset: ImageDataset,
                    resize_to: tuple[int, int] | None,
                    batch_size: int) -> np.ndarray:
    chunks = []
    with torch.no_grad():
        for batch in dataset.iter_batches(batch_size):
            if resize_to is not None:
                batch = resize_images(batch, resize_to)
            tensors = torch.stack([_to_tensor(backbone, img) for img in batch])
            chunks.append(backbone.forward_features(tensors).numpy())
    return np.concatenate(chunks, axis=0)


def extract_features(backbone, dataset: ImageDataset, role: str, out_path,
                     resize_to: tuple[int, int] | None = None,
                     batch_size: int = 64, with_labels: bool = True) -> int:
    """Run the dataset through the backbone and write a feature container.

    Returns the number of extracted rows. The manifest records the backbone
    identifier and any applied resize so downstream reports can flag
    mismatched provenance.
    """
    features = _encode_dataset(backbone, dataset, resize_to, batch_size)
    labels = dataset.labels if with_labels else None
    extra = {}
    if resize_to is not None:
        extra["resized_to"] = list(resize_to)
    write_feature_container(
        out_path, features, labels,
        name=dataset.name, role=role,
        class_names=dataset.class_names if labels is not None else None,
        source_checksum=dataset.source_checksum,
        extractor=backbone.name, **extra,
    )
    return features.shape[0]


def zero_shot_logits(backbone, dataset: ImageDataset, class_names: list[str],
                     out_path, prompt_template: str = DEFAULT_PROMPT,
                     resize_to: tuple[int, int] | None = None,
                     batch_size: int = 64) -> int:
    """Write per-image logits against the class prompts.

    Logits are cosine similarities between image and prompt embeddings,
    scaled by the backbone's native logit scale (recorded in the manifest).
    """
    if "{label}" not in prompt_template:
        raise ValueError("prompt template must contain '{label}'")
    if len(set(class_names)) != len(class_names):
        raise ValueError("duplicate class names make pseudo-labels ambiguous")

    text = backbone.encode_class_prompts(class_names, prompt_template)
    text = text / text.norm(dim=1, keepdim=True)
    image = torch.from_numpy(
        _encode_dataset(backbone, dataset, resize_to, batch_size))
    image = image / image.norm(dim=1, keepdim=True)
    logits = (backbone.logit_scale * image @ text.T).numpy()

    write_feature_container(
        out_path, logits, None,
        name=f"{dataset.name}-zeroshot", role="in-train",
        class_names=class_names,
        source_checksum=dataset.source_checksum,
        extractor=backbone.name,
        prompt_template=prompt_template,
        logit_scale=float(backbone.logit_scale),
    )
    return logits.shape[0]
