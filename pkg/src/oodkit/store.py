"""Binary container I/O for feature matrices, labels, and image stacks.

One fixed little-endian container carries everything the engine exchanges
with feature extractors:

    offset 0   magic "OODK" (4 bytes)
    offset 4   u32 format version (currently 1)
    offset 8   u64 n_samples
    offset 16  u64 dim            (3*H*W for pixel containers)
    offset 24  u8  dtype tag      (1 = f32 features, 2 = f32 CHW pixels)
    offset 25  u8  label presence flag
    offset 26  u16 reserved (zero)
    offset 28  u32 CRC-32 of the payload bytes
    offset 32  u32 image height   (zero for feature containers)
    offset 36  u32 image width    (zero for feature containers)
    offset 40  24 reserved bytes (zero)
    offset 64  payload: n_samples * dim little-endian f32, row-major
    ...        optional u32 labels, one per sample
    ...        u32 manifest length, then UTF-8 JSON manifest

The header is exactly 64 bytes. Loaded arrays are treated as immutable and
may be shared freely across threads; writers get exclusive use of a path.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"OODK"
VERSION = 1
HEADER_SIZE = 64
DTYPE_FEATURES = 1
DTYPE_PIXELS = 2

ROLES = ("in-train", "in-test", "out-test", "linear-head")

_HEADER_STRUCT = struct.Struct("<4sIQQBBHIII")  # 40 bytes used, padded to 64


class ContainerError(ValueError):
    """Base class for container format violations. ``code`` is stable."""

    code = "container-error"


class BadMagicError(ContainerError):
    code = "bad-magic"


class VersionMismatchError(ContainerError):
    code = "version-mismatch"


class TruncatedPayloadError(ContainerError):
    code = "truncated-payload"


class ChecksumMismatchError(ContainerError):
    code = "checksum-mismatch"


class InvariantViolationError(ContainerError):
    code = "invariant-violation"


@dataclass(frozen=True)
class Manifest:
    """Dataset provenance carried alongside the raw tensors.

    ``role`` is one of ``ROLES``. ``class_names``, when present with labels,
    must have one entry per class and pins the class count on read.
    """

    name: str
    role: str
    class_names: tuple[str, ...] | None = None
    source_checksum: str = ""
    extractor: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "role": self.role,
            "class_names": list(self.class_names) if self.class_names is not None else None,
            "source_checksum": self.source_checksum,
            "extractor": self.extractor,
        }
        out.update(self.extra)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        known = {"name", "role", "class_names", "source_checksum", "extractor"}
        names = d.get("class_names")
        return cls(
            name=d.get("name", ""),
            role=d.get("role", ""),
            class_names=tuple(names) if names is not None else None,
            source_checksum=d.get("source_checksum", ""),
            extractor=d.get("extractor", ""),
            extra={k: v for k, v in d.items() if k not in known},
        )


@dataclass(frozen=True)
class LabelVector:
    """Per-sample class indices in ``[0, n_classes)``."""

    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))


def validate_features(matrix: np.ndarray, require_positive_norms: bool = True) -> np.ndarray:
    """Check FeatureMatrix invariants and return a C-contiguous f32 view.

    Raises:
        InvariantViolationError: non-2D shape, empty axis, non-finite value,
            or (when required) a zero-norm row.
    """
    matrix = np.ascontiguousarray(matrix, dtype=np.float32)
    if matrix.ndim != 2:
        raise InvariantViolationError(f"expected a 2-D matrix, got shape {matrix.shape}")
    n, d = matrix.shape
    if n < 1:
        raise InvariantViolationError("invariant violation: n_samples >= 1")
    if d < 1:
        raise InvariantViolationError("invariant violation: dim >= 1")
    bad = ~np.isfinite(matrix)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise InvariantViolationError(f"non-finite value at row {i}, col {j}")
    if require_positive_norms:
        norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
        if (norms == 0.0).any():
            i = int(np.argmin(norms))
            raise InvariantViolationError(f"zero-norm feature row {i}")
    return matrix


def validate_labels(labels: LabelVector, n_samples: int) -> None:
    vec = labels.labels
    if vec.ndim != 1 or len(vec) != n_samples:
        raise InvariantViolationError(
            f"label count {vec.shape} does not match n_samples {n_samples}"
        )
    if labels.n_classes < 1:
        raise InvariantViolationError("invariant violation: n_classes >= 1")
    if len(vec) and (vec.min() < 0 or vec.max() >= labels.n_classes):
        raise InvariantViolationError(
            f"labels outside [0, {labels.n_classes}): "
            f"min {vec.min()}, max {vec.max()}"
        )


def validate_images(images: np.ndarray) -> np.ndarray:
    """Check an (N, 3, H, W) pixel stack: f32, finite, in [0,1], H,W >= 2."""
    images = np.ascontiguousarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[1] != 3:
        raise InvariantViolationError(
            f"expected shape (n, 3, H, W), got {images.shape}"
        )
    n, _, h, w = images.shape
    if n < 1:
        raise InvariantViolationError("invariant violation: n_samples >= 1")
    if h < 2 or w < 2:
        raise InvariantViolationError("invariant violation: H, W >= 2")
    if not np.isfinite(images).all():
        raise InvariantViolationError("non-finite pixel value")
    lo, hi = float(images.min()), float(images.max())
    if lo < 0.0 or hi > 1.0:
        raise InvariantViolationError(f"pixels outside [0, 1]: min {lo}, max {hi}")
    return images


def _validate_manifest(manifest: Manifest, labels: LabelVector | None) -> None:
    if manifest.role not in ROLES:
        raise InvariantViolationError(
            f"unknown manifest role {manifest.role!r}; expected one of {ROLES}"
        )
    if manifest.class_names is not None and labels is not None:
        if len(manifest.class_names) != labels.n_classes:
            raise InvariantViolationError(
                f"{len(manifest.class_names)} class names for "
                f"{labels.n_classes} classes"
            )


def _pack_header(n: int, d: int, dtype_tag: int, has_labels: bool,
                 crc: int, height: int = 0, width: int = 0) -> bytes:
    head = _HEADER_STRUCT.pack(
        MAGIC, VERSION, n, d, dtype_tag, 1 if has_labels else 0, 0, crc,
        height, width,
    )
    return head.ljust(HEADER_SIZE, b"\0")


def _write_container(payload_array: np.ndarray, dtype_tag: int,
                     labels: LabelVector | None, manifest: Manifest,
                     path: str | os.PathLike, height: int = 0, width: int = 0) -> None:
    payload = payload_array.tobytes()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    n = payload_array.shape[0]
    d = payload_array.size // n
    manifest_bytes = json.dumps(manifest.to_dict(), ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_pack_header(n, d, dtype_tag, labels is not None, crc, height, width))
        fh.write(payload)
        if labels is not None:
            fh.write(labels.labels.astype("<u4").tobytes())
        fh.write(struct.pack("<I", len(manifest_bytes)))
        fh.write(manifest_bytes)


def write_embeddings(matrix: np.ndarray, labels: LabelVector | None,
                     manifest: Manifest, path: str | os.PathLike) -> None:
    """Persist a feature matrix (plus optional labels) to ``path``.

    All invariants are checked before any byte is written, so a failed call
    leaves no partial file behind.
    """
    require_norms = manifest.role != "linear-head"
    matrix = validate_features(matrix, require_positive_norms=require_norms)
    if labels is not None:
        validate_labels(labels, matrix.shape[0])
    _validate_manifest(manifest, labels)
    _write_container(matrix, DTYPE_FEATURES, labels, manifest, path)


def write_images(images: np.ndarray, manifest: Manifest,
                 path: str | os.PathLike) -> None:
    """Persist an (N, 3, H, W) pixel stack in the same framing as features."""
    images = validate_images(images)
    _validate_manifest(manifest, None)
    n, _, h, w = images.shape
    flat = images.reshape(n, 3 * h * w)
    _write_container(flat, DTYPE_PIXELS, None, manifest, path, height=h, width=w)


def _read_container(path: str | os.PathLike, expect_tag: int):
    file_size = os.stat(path).st_size
    with open(path, "rb") as fh:
        head = fh.read(min(HEADER_SIZE, file_size))
        if len(head) < 4 or head[:4] != MAGIC:
            if len(head) < 4:
                raise TruncatedPayloadError(f"file too short for header ({file_size} bytes)")
            raise BadMagicError(f"bad magic {head[:4]!r}")
        if len(head) < HEADER_SIZE:
            raise TruncatedPayloadError("truncated header")
        magic, version, n, d, dtype_tag, label_flag, _, crc, height, width = (
            _HEADER_STRUCT.unpack(head[: _HEADER_STRUCT.size])
        )
        if version != VERSION:
            raise VersionMismatchError(f"format version {version}, expected {VERSION}")
        if dtype_tag != expect_tag:
            raise InvariantViolationError(
                f"dtype tag {dtype_tag} does not match expected {expect_tag}"
            )
        if n < 1:
            raise InvariantViolationError("invariant violation: n_samples >= 1")
        if d < 1:
            raise InvariantViolationError("invariant violation: dim >= 1")
        if label_flag not in (0, 1):
            raise InvariantViolationError(f"bad label flag {label_flag}")

        # Size check against the stat'ed file BEFORE any allocation, so a
        # corrupt header can never trigger an oversized read.
        payload_size = n * d * 4
        labels_size = n * 4 if label_flag else 0
        minimum = HEADER_SIZE + payload_size + labels_size + 4
        if file_size < minimum:
            raise TruncatedPayloadError(
                f"truncated payload: header implies >= {minimum} bytes, file has {file_size}"
            )

        payload = fh.read(payload_size)
        if len(payload) != payload_size:
            raise TruncatedPayloadError("truncated payload")
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise ChecksumMismatchError("payload checksum mismatch")
        matrix = np.frombuffer(payload, dtype="<f4").reshape(n, d)

        raw_labels = None
        if label_flag:
            label_bytes = fh.read(labels_size)
            if len(label_bytes) != labels_size:
                raise TruncatedPayloadError("truncated label block")
            raw_labels = np.frombuffer(label_bytes, dtype="<u4").astype(np.int64)

        len_bytes = fh.read(4)
        if len(len_bytes) != 4:
            raise TruncatedPayloadError("truncated manifest length")
        (manifest_len,) = struct.unpack("<I", len_bytes)
        if file_size != minimum + manifest_len:
            if file_size < minimum + manifest_len:
                raise TruncatedPayloadError("truncated manifest")
            raise InvariantViolationError("trailing bytes after manifest")
        manifest_bytes = fh.read(manifest_len)
        try:
            manifest = Manifest.from_dict(json.loads(manifest_bytes.decode("utf-8")))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise InvariantViolationError(f"manifest is not valid JSON: {exc}") from exc

    return matrix, raw_labels, manifest, height, width


def read_embeddings(path: str | os.PathLike):
    """Inverse of :func:`write_embeddings`.

    Returns:
        (matrix, labels | None, manifest). The matrix is bit-identical to
        what was written.

    Raises:
        ContainerError subclasses with distinct ``code`` values for bad
        magic, version mismatch, truncation, checksum mismatch, and
        invariant violations.
    """
    matrix, raw_labels, manifest, _, _ = _read_container(path, DTYPE_FEATURES)

    labels = None
    if raw_labels is not None:
        if manifest.class_names is not None:
            n_classes = len(manifest.class_names)
        else:
            n_classes = int(raw_labels.max()) + 1
        labels = LabelVector(raw_labels, n_classes)
        validate_labels(labels, matrix.shape[0])

    require_norms = manifest.role != "linear-head"
    validate_features(matrix, require_positive_norms=require_norms)
    _validate_manifest(manifest, labels)
    return matrix, labels, manifest


def read_images(path: str | os.PathLike):
    """Inverse of :func:`write_images`. Returns ``(images, manifest)``."""
    flat, _, manifest, height, width = _read_container(path, DTYPE_PIXELS)
    n, d = flat.shape
    if height < 2 or width < 2 or d != 3 * height * width:
        raise InvariantViolationError(
            f"pixel container dim {d} inconsistent with H={height}, W={width}"
        )
    images = flat.reshape(n, 3, height, width)
    return validate_images(images), manifest
