"""Writer for the engine's binary container format.

Implemented against the documented byte layout (64-byte little-endian
header, f32 payload, optional u32 labels, length-prefixed JSON manifest)
so extracted features interoperate with the evaluation engine without
sharing code with it.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

MAGIC = b"OODK"
VERSION = 1
HEADER_SIZE = 64
DTYPE_FEATURES = 1
DTYPE_PIXELS = 2


def _header(n: int, d: int, dtype_tag: int, has_labels: bool, crc: int,
            height: int = 0, width: int = 0) -> bytes:
    head = struct.pack("<4sIQQBBHIII", MAGIC, VERSION, n, d, dtype_tag,
                       1 if has_labels else 0, 0, crc, height, width)
    return head.ljust(HEADER_SIZE, b"\0")


def _manifest_bytes(name: str, role: str, class_names=None,
                    source_checksum: str = "", extractor: str = "",
                    **extra) -> bytes:
    manifest = {
        "name": name,
        "role": role,
        "class_names": list(class_names) if class_names is not None else None,
        "source_checksum": source_checksum,
        "extractor": extractor,
    }
    manifest.update(extra)
    return json.dumps(manifest, ensure_ascii=False).encode("utf-8")


def write_feature_container(path, features: np.ndarray,
                            labels: np.ndarray | None, *, name: str, role: str,
                            class_names=None, source_checksum: str = "",
                            extractor: str = "", **extra) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {features.shape}")
    if not np.isfinite(features).all():
        raise ValueError("non-finite feature value")
    n, d = features.shape
    payload = features.tobytes()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(_header(n, d, DTYPE_FEATURES, labels is not None, crc))
        fh.write(payload)
        if labels is not None:
            labels = np.asarray(labels)
            if labels.shape != (n,):
                raise ValueError(f"labels shape {labels.shape} for {n} samples")
            fh.write(labels.astype("<u4").tobytes())
        body = _manifest_bytes(name, role, class_names, source_checksum,
                               extractor, **extra)
        fh.write(struct.pack("<I", len(body)))
        fh.write(body)


def read_image_container(path) -> tuple[np.ndarray, dict]:
    """Read an (N, 3, H, W) pixel container (e.g. an adversarial set).

    Returns the f32 pixel stack and the parsed manifest. Lets perturbed
    images round-trip into extraction without uint8 quantization.
    """
    import os

    file_size = os.stat(path).st_size
    with open(path, "rb") as fh:
        head = fh.read(HEADER_SIZE)
        if len(head) < HEADER_SIZE or head[:4] != MAGIC:
            raise ValueError(f"{path} is not a container file")
        _, version, n, d, dtype_tag, label_flag, _, crc, h, w = struct.unpack(
            "<4sIQQBBHIII", head[:40])
        if version != VERSION:
            raise ValueError(f"unsupported container version {version}")
        if dtype_tag != DTYPE_PIXELS:
            raise ValueError("container does not hold pixels")
        if min(n, h, w) < 1 or d != 3 * h * w:
            raise ValueError("inconsistent pixel container header")
        payload_size = n * d * 4
        if file_size < HEADER_SIZE + payload_size + 4:
            raise ValueError("truncated pixel container")
        payload = fh.read(payload_size)
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise ValueError("pixel payload checksum mismatch")
        if label_flag:
            fh.read(n * 4)
        (manifest_len,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(manifest_len).decode("utf-8"))
    images = np.frombuffer(payload, dtype="<f4").reshape(n, 3, h, w)
    return images, manifest


def write_image_container(path, images: np.ndarray, *, name: str, role: str,
                          source_checksum: str = "", extractor: str = "",
                          **extra) -> None:
    images = np.ascontiguousarray(images, dtype="<f4")
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"images must be (n, 3, H, W), got {images.shape}")
    if images.min() < 0.0 or images.max() > 1.0:
        raise ValueError("pixels outside [0, 1]")
    n, _, h, w = images.shape
    payload = images.reshape(n, -1).tobytes()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(_header(n, 3 * h * w, DTYPE_PIXELS, False, crc, h, w))
        fh.write(payload)
        body = _manifest_bytes(name, role, None, source_checksum, extractor,
                               **extra)
        fh.write(struct.pack("<I", len(body)))
        fh.write(body)
