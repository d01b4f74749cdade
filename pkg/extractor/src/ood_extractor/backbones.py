"""Backbone loading and the common encoder interface.

A backbone exposes:

    preprocess(pil_image) -> float tensor (3, H, W) in [0, 1] at native size
    forward_features(batch in [0, 1])  -> (B, D) features, differentiable
      (normalization and any resizing live INSIDE this call so pixel
      gradients flow back to the raw [0,1] image)
    encode_class_prompts(names, template) -> (C, D) text features, or raises
      for vision-only backbones
    logit_scale -> multiplier applied to cosine similarities for logits

Identifiers:

    toy[:dim[:seed]]        seeded random small CNN (tests, desk-scale runs)
    torchvision:<name>      e.g. torchvision:resnet50 (downloads weights)
    hf-clip:<repo>          e.g. hf-clip:laion/CLIP-ViT-B-16-laion2B-s34B-b88K
"""

from __future__ import annotations

import hashlib
import os

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

CACHE_ENV_VAR = "OOD_EXTRACTOR_CACHE"


def _apply_cache_env() -> None:
    cache = os.environ.get(CACHE_ENV_VAR)
    if cache:
        os.environ.setdefault("HF_HOME", cache)
        os.environ.setdefault("TORCH_HOME", cache)


def pil_to_tensor(image: Image.Image) -> torch.Tensor:
    """PIL image to a float (3, H, W) tensor in [0, 1]."""
    arr = np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


class TextEncoderUnavailable(RuntimeError):
    """Backbone has no text tower; pseudo-labeling is impossible."""


class ToyBackbone(torch.nn.Module):
    """Seeded random CNN standing in for a pretrained model.

    Accepts any input size >= 8 pixels (adaptive pooling). The text
    "encoder" maps each prompt to a fixed hash-seeded random unit vector;
    it exercises the zero-shot plumbing without pretrained weights.
    """

    def __init__(self, feature_dim: int = 32, seed: int = 0):
        super().__init__()
        self.name = f"toy:{feature_dim}:{seed}"
        self.feature_dim = feature_dim
        self.image_size = None
        self.logit_scale = 100.0
        gen = torch.Generator().manual_seed(seed)
        self.conv1 = torch.nn.Conv2d(3, 8, 3, stride=2, padding=1)
        self.conv2 = torch.nn.Conv2d(8, 16, 3, stride=2, padding=1)
        self.fc = torch.nn.Linear(16 * 16, feature_dim)
        for p in self.parameters():
            with torch.no_grad():
                p.copy_(torch.randn(p.shape, generator=gen) * 0.2)
        self.eval()

    def preprocess(self, image: Image.Image) -> torch.Tensor:
        return pil_to_tensor(image)

    def forward_features(self, batch: torch.Tensor) -> torch.Tensor:
        x = (batch - 0.5) / 0.5
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        x = F.adaptive_avg_pool2d(x, (4, 4)).flatten(1)
        return self.fc(x)

    def encode_class_prompts(self, class_names, template: str) -> torch.Tensor:
        rows = []
        for name in class_names:
            prompt = template.format(label=name)
            digest = hashlib.sha256(prompt.encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vec = rng.normal(size=self.feature_dim)
            rows.append(vec / np.linalg.norm(vec))
        return torch.tensor(np.stack(rows), dtype=torch.float32)


class TorchvisionBackbone(torch.nn.Module):
    """ImageNet-pretrained torchvision classifier used as a feature extractor."""

    SUPPORTED = ("resnet50", "vit_b_16", "convnext_base")

    def __init__(self, arch: str):
        super().__init__()
        _apply_cache_env()
        import torchvision.models as models

        if arch not in self.SUPPORTED:
            raise ValueError(f"unsupported torchvision arch {arch!r}; "
                             f"pick one of {self.SUPPORTED}")
        weights = models.get_model_weights(arch).DEFAULT
        model = models.get_model(arch, weights=weights)
        model.eval()
        self.name = f"torchvision:{arch}"
        self.logit_scale = 1.0
        transform = weights.transforms()
        self.image_size = transform.crop_size[0]
        self._mean = torch.tensor(transform.mean).view(3, 1, 1)
        self._std = torch.tensor(transform.std).view(3, 1, 1)
        if arch == "resnet50":
            self._features = torch.nn.Sequential(*list(model.children())[:-1])
            self.feature_dim = 2048
        elif arch == "vit_b_16":
            model.heads = torch.nn.Identity()
            self._features = model
            self.feature_dim = 768
        else:  # convnext_base: drop the classifier linear
            model.classifier[-1] = torch.nn.Identity()
            self._features = model
            self.feature_dim = 1024

    def preprocess(self, image: Image.Image) -> torch.Tensor:
        size = self.image_size
        return pil_to_tensor(image.convert("RGB").resize((size, size),
                                                         Image.BICUBIC))

    def forward_features(self, batch: torch.Tensor) -> torch.Tensor:
        if batch.shape[-1] != self.image_size:
            batch = F.interpolate(batch, size=self.image_size, mode="bicubic",
                                  align_corners=False)
        x = (batch - self._mean) / self._std
        return self._features(x).flatten(1)

    def encode_class_prompts(self, class_names, template):
        raise TextEncoderUnavailable(
            f"{self.name} is vision-only; zero-shot prompts need a CLIP backbone"
        )


class HFClipBackbone(torch.nn.Module):
    """CLIP model from the Hugging Face hub (image + text towers)."""

    def __init__(self, repo: str):
        super().__init__()
        _apply_cache_env()
        from transformers import CLIPModel, CLIPProcessor

        self.name = f"hf-clip:{repo}"
        self._model = CLIPModel.from_pretrained(repo)
        self._model.eval()
        self._processor = CLIPProcessor.from_pretrained(repo)
        image_proc = self._processor.image_processor
        size = image_proc.crop_size["height"]
        self.image_size = size
        self.feature_dim = self._model.config.projection_dim
        self.logit_scale = float(self._model.logit_scale.exp())
        self._mean = torch.tensor(image_proc.image_mean).view(3, 1, 1)
        self._std = torch.tensor(image_proc.image_std).view(3, 1, 1)

    def preprocess(self, image: Image.Image) -> torch.Tensor:
        size = self.image_size
        return pil_to_tensor(image.convert("RGB").resize((size, size),
                                                         Image.BICUBIC))

    def forward_features(self, batch: torch.Tensor) -> torch.Tensor:
        if batch.shape[-1] != self.image_size:
            batch = F.interpolate(batch, size=self.image_size, mode="bicubic",
                                  align_corners=False)
        x = (batch - self._mean) / self._std
        return self._model.get_image_features(pixel_values=x)

    def encode_class_prompts(self, class_names, template: str) -> torch.Tensor:
        prompts = [template.format(label=name) for name in class_names]
        tokens = self._processor(text=prompts, return_tensors="pt", padding=True)
        with torch.no_grad():
            return self._model.get_text_features(**tokens)


def build_backbone(identifier: str):
    parts = identifier.split(":")
    if parts[0] == "toy":
        dim = int(parts[1]) if len(parts) > 1 else 32
        seed = int(parts[2]) if len(parts) > 2 else 0
        return ToyBackbone(feature_dim=dim, seed=seed)
    if parts[0] == "torchvision" and len(parts) == 2:
        return TorchvisionBackbone(parts[1])
    if parts[0] == "hf-clip" and len(parts) >= 2:
        return HFClipBackbone(identifier[len("hf-clip:"):])
    raise ValueError(
        f"unknown backbone {identifier!r}; expected toy[:dim[:seed]], "
        "torchvision:<arch>, or hf-clip:<repo>"
    )
