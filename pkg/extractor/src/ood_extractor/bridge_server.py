"""Bridge protocol server: serve encoder features and pixel gradients.

Speaks the engine's length-prefixed binary protocol on stdio. GRAD_SIM
replies carry the gradient of -cos(g(x), target) with respect to the raw
[0,1] pixels, computed by autograd through the backbone's differentiable
feature path (normalization and resizing included).
"""

from __future__ import annotations

import struct
import sys

import numpy as np
import torch

OP_ENCODE = 1
OP_GRAD_SIM = 2
OP_ERROR = 255


def _read_exact(stream, n: int) -> bytes | None:
    data = b""
    while len(data) < n:
        chunk = stream.read(n - len(data))
        if not chunk:
            return None
        data += chunk
    return data


def _read_message(stream) -> bytes | None:
    raw = _read_exact(stream, 4)
    if raw is None:
        return None
    (length,) = struct.unpack("<I", raw)
    return _read_exact(stream, length)


def _write_message(stream, body: bytes) -> None:
    stream.write(struct.pack("<I", len(body)) + body)
    stream.flush()


def _error(message: str) -> bytes:
    data = message.encode("utf-8")
    return struct.pack("<BI", OP_ERROR, len(data)) + data


def encode_image(backbone, image: torch.Tensor) -> torch.Tensor:
    return backbone.forward_features(image.unsqueeze(0)).squeeze(0)


def grad_neg_cosine(backbone, image: torch.Tensor,
                    target: torch.Tensor) -> tuple[float, torch.Tensor]:
    """Similarity and d(-cos)/dpixels for one image, via autograd."""
    x = image.clone().requires_grad_(True)
    feature = encode_image(backbone, x)
    sim = torch.nn.functional.cosine_similarity(
        feature.unsqueeze(0), target.unsqueeze(0)).squeeze(0)
    (-sim).backward()
    return float(sim.detach()), x.grad.detach()


def _handle(backbone, body: bytes) -> bytes:
    if len(body) < 9:
        return _error(f"request too short ({len(body)} bytes)")
    opcode, h, w = struct.unpack_from("<BII", body, 0)
    if opcode not in (OP_ENCODE, OP_GRAD_SIM):
        return _error(f"unknown opcode {opcode}")
    n_pixels = 3 * h * w
    offset = 9
    if len(body) < offset + 4 * n_pixels:
        return _error("pixel block shorter than 3*H*W")
    pixels = np.frombuffer(body, dtype="<f4", count=n_pixels, offset=offset)
    image = torch.from_numpy(pixels.copy()).reshape(3, h, w)
    offset += 4 * n_pixels

    if opcode == OP_ENCODE:
        if len(body) != offset:
            return _error("trailing bytes in ENCODE request")
        with torch.no_grad():
            feature = encode_image(backbone, image).numpy().astype("<f4")
        return struct.pack("<I", feature.size) + feature.tobytes()

    if len(body) < offset + 4:
        return _error("missing target dimension")
    (dim,) = struct.unpack_from("<I", body, offset)
    offset += 4
    if len(body) != offset + 4 * dim:
        return _error(f"target block length mismatch for dim {dim}")
    target = torch.from_numpy(
        np.frombuffer(body, dtype="<f4", count=dim, offset=offset).copy())
    sim, grad = grad_neg_cosine(backbone, image, target)
    return struct.pack("<f", sim) + grad.numpy().astype("<f4").tobytes()


def serve(backbone, reader=None, writer=None) -> None:
    reader = reader if reader is not None else sys.stdin.buffer
    writer = writer if writer is not None else sys.stdout.buffer
    while True:
        body = _read_message(reader)
        if body is None:
            return
        try:
            reply = _handle(backbone, body)
        except Exception as exc:  # noqa: BLE001 - server must stay alive
            reply = _error(f"{type(exc).__name__}: {exc}")
        _write_message(writer, reply)
