"""Dataset loading with the OOD resize rule.

Out-of-distribution splits are resized to the in-distribution image size
BEFORE the backbone's own preprocessing, so detection cannot shortcut on
resolution differences. ``resize_to`` records that target size.

Identifiers:

    folder:<path>      directory of images; class subdirectories give labels,
                       a flat directory gives an unlabeled split
    container:<path>   an (N, 3, H, W) pixel container, e.g. an adversarial
                       set emitted by the engine; pixels stay f32 end to end
    cifar10 / cifar100   torchvision downloads (network required)
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


@dataclass
class ImageDataset:
    name: str
    loaders: list[Callable[[], Image.Image]]
    labels: np.ndarray | None
    class_names: list[str] | None
    source_checksum: str

    def __len__(self) -> int:
        return len(self.loaders)

    def iter_batches(self, batch_size: int) -> Iterator[list[Image.Image]]:
        for start in range(0, len(self.loaders), batch_size):
            yield [load() for load in self.loaders[start : start + batch_size]]


def _checksum(parts: list[str]) -> str:
    digest = hashlib.sha256()
    for part in parts:
        digest.update(part.encode("utf-8"))
        digest.update(b"\0")
    return digest.hexdigest()[:16]


def _folder_dataset(root: Path) -> ImageDataset:
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    loaders: list[Callable[[], Image.Image]] = []

    def opener(path: Path) -> Callable[[], Image.Image]:
        return lambda: Image.open(path)

    if class_dirs:
        labels = []
        class_names = [d.name for d in class_dirs]
        files = []
        for idx, class_dir in enumerate(class_dirs):
            for path in sorted(class_dir.iterdir()):
                if path.suffix.lower() in IMAGE_SUFFIXES:
                    loaders.append(opener(path))
                    labels.append(idx)
                    files.append(f"{path.relative_to(root)}:{path.stat().st_size}")
        label_arr = np.asarray(labels, dtype=np.int64)
    else:
        files = []
        for path in sorted(root.iterdir()):
            if path.suffix.lower() in IMAGE_SUFFIXES:
                loaders.append(opener(path))
                files.append(f"{path.name}:{path.stat().st_size}")
        label_arr, class_names = None, None

    if not loaders:
        raise ValueError(f"no images found under {root}")
    return ImageDataset(name=root.name, loaders=loaders, labels=label_arr,
                        class_names=class_names, source_checksum=_checksum(files))


def _container_dataset(path: Path) -> ImageDataset:
    from .container import read_image_container

    images, manifest = read_image_container(path)
    loaders = [(lambda arr=images[i]: arr) for i in range(len(images))]
    return ImageDataset(
        name=manifest.get("name", path.stem),
        loaders=loaders,
        labels=None,
        class_names=None,
        source_checksum=manifest.get("source_checksum", ""),
    )


def _cifar_dataset(which: str, split: str, cache_dir: str) -> ImageDataset:
    import torchvision.datasets as tvd

    cls = tvd.CIFAR10 if which == "cifar10" else tvd.CIFAR100
    data = cls(root=cache_dir, train=split == "train", download=True)
    images = data.data  # (N, H, W, 3) uint8
    loaders = [
        (lambda arr=images[i]: Image.fromarray(arr)) for i in range(len(images))
    ]
    return ImageDataset(
        name=f"{which}-{split}",
        loaders=loaders,
        labels=np.asarray(data.targets, dtype=np.int64),
        class_names=list(data.classes),
        source_checksum=_checksum([which, split, str(len(images))]),
    )


def load_dataset(identifier: str, split: str = "test",
                 cache_dir: str = "~/.cache/ood-extractor") -> ImageDataset:
    cache = str(Path(cache_dir).expanduser())
    if identifier.startswith("folder:"):
        return _folder_dataset(Path(identifier[len("folder:"):]))
    if identifier.startswith("container:"):
        return _container_dataset(Path(identifier[len("container:"):]))
    if identifier in ("cifar10", "cifar100"):
        return _cifar_dataset(identifier, split, cache)
    raise ValueError(
        f"unknown dataset {identifier!r}; expected folder:<path>, "
        "container:<path>, cifar10, or cifar100"
    )


def resize_images(images: list, size: tuple[int, int]) -> list:
    """Resize to (height, width) ahead of backbone preprocessing.

    Container items (f32 arrays) pass through untouched: they are already
    at the size the attack produced them at, and quantizing or resampling
    them would disturb the perturbations.
    """
    h, w = size
    return [
        img if isinstance(img, np.ndarray)
        else img.convert("RGB").resize((w, h), Image.BICUBIC)
        for img in images
    ]
