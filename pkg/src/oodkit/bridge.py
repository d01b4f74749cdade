"""Encoder bridge: length-prefixed binary protocol over a byte stream.

Lets the attack loop drive an encoder living in another process (typically
a pretrained backbone served by the extractor). Every message is a u32
little-endian body length followed by the body:

    request   u8 opcode (1=ENCODE, 2=GRAD_SIM), u32 H, u32 W,
              3*H*W f32 pixels (CHW); GRAD_SIM then u32 D, D f32 target
    response  ENCODE:   u32 D, D f32 feature
              GRAD_SIM: f32 similarity, 3*H*W f32 gradient of -cos
    error     u8 255, u32 length, UTF-8 message

The server answers one request at a time and stays alive after malformed
messages. ``python -m oodkit.bridge --toy`` serves the built-in ToyEncoder
for tests and desk-scale runs.
"""

from __future__ import annotations

import shlex
import struct
import subprocess
import sys

import numpy as np

OP_ENCODE = 1
OP_GRAD_SIM = 2
OP_ERROR = 255


class BridgeError(RuntimeError):
    """Bridge subprocess failed, died, or sent an unparseable reply."""


def _read_exact(stream, n: int) -> bytes | None:
    data = b""
    while len(data) < n:
        chunk = stream.read(n - len(data))
        if not chunk:
            return None
        data += chunk
    return data


def _read_message(stream) -> bytes | None:
    raw_len = _read_exact(stream, 4)
    if raw_len is None:
        return None
    (length,) = struct.unpack("<I", raw_len)
    body = _read_exact(stream, length)
    if body is None:
        return None
    return body


def _write_message(stream, body: bytes) -> None:
    stream.write(struct.pack("<I", len(body)) + body)
    stream.flush()


def _encode_request(image: np.ndarray) -> bytes:
    _, h, w = image.shape
    return (struct.pack("<BII", OP_ENCODE, h, w)
            + image.astype("<f4").tobytes())


def _grad_sim_request(image: np.ndarray, target: np.ndarray) -> bytes:
    _, h, w = image.shape
    return (struct.pack("<BII", OP_GRAD_SIM, h, w)
            + image.astype("<f4").tobytes()
            + struct.pack("<I", target.size)
            + np.asarray(target).astype("<f4").tobytes())


def _parse_error(body: bytes) -> str | None:
    # Error replies start with opcode 255 and a consistent inner length.
    if len(body) >= 5 and body[0] == OP_ERROR:
        (inner,) = struct.unpack_from("<I", body, 1)
        if inner == len(body) - 5:
            return body[5:].decode("utf-8", errors="replace")
    return None


class BridgeEncoder:
    """EncoderInterface implementation backed by a spawned subprocess."""

    def __init__(self, command: str | list[str]):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        try:
            self._proc = subprocess.Popen(
                argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            )
        except OSError as exc:
            raise BridgeError(f"cannot spawn bridge command {argv!r}: {exc}") from exc

    def _roundtrip(self, request: bytes) -> bytes:
        proc = self._proc
        if proc.poll() is not None:
            raise BridgeError(f"bridge process exited with code {proc.returncode}")
        try:
            _write_message(proc.stdin, request)
        except (BrokenPipeError, OSError) as exc:
            raise BridgeError(f"bridge process closed its input: {exc}") from exc
        body = _read_message(proc.stdout)
        if body is None:
            code = proc.poll()
            raise BridgeError(f"bridge process stopped responding (exit code {code})")
        message = _parse_error(body)
        if message is not None:
            raise BridgeError(f"bridge error: {message}")
        return body

    def encode(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        body = self._roundtrip(_encode_request(image))
        if len(body) < 4:
            raise BridgeError("short ENCODE reply")
        (dim,) = struct.unpack_from("<I", body, 0)
        if len(body) != 4 + 4 * dim:
            raise BridgeError(f"ENCODE reply length {len(body)} for dim {dim}")
        return np.frombuffer(body, dtype="<f4", count=dim, offset=4).astype(np.float64)

    def grad_similarity(self, image: np.ndarray,
                        target: np.ndarray) -> tuple[float, np.ndarray]:
        image = np.asarray(image, dtype=np.float64)
        body = self._roundtrip(_grad_sim_request(image, np.asarray(target)))
        expected = 4 + 4 * image.size
        if len(body) != expected:
            raise BridgeError(f"GRAD_SIM reply length {len(body)}, expected {expected}")
        (sim,) = struct.unpack_from("<f", body, 0)
        grad = (np.frombuffer(body, dtype="<f4", offset=4)
                .astype(np.float64).reshape(image.shape))
        return float(sim), grad

    def close(self) -> None:
        proc = self._proc
        if proc.poll() is None:
            proc.stdin.close()
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


def _error_reply(message: str) -> bytes:
    data = message.encode("utf-8")
    return struct.pack("<BI", OP_ERROR, len(data)) + data


def _handle_request(encoder, body: bytes) -> bytes:
    if len(body) < 9:
        return _error_reply(f"request too short ({len(body)} bytes)")
    opcode, h, w = struct.unpack_from("<BII", body, 0)
    if opcode not in (OP_ENCODE, OP_GRAD_SIM):
        return _error_reply(f"unknown opcode {opcode}")
    n_pixels = 3 * h * w
    offset = 9
    if len(body) < offset + 4 * n_pixels:
        return _error_reply("pixel block shorter than 3*H*W")
    image = (np.frombuffer(body, dtype="<f4", count=n_pixels, offset=offset)
             .astype(np.float64).reshape(3, h, w))
    offset += 4 * n_pixels

    if opcode == OP_ENCODE:
        if len(body) != offset:
            return _error_reply("trailing bytes in ENCODE request")
        feature = np.asarray(encoder.encode(image), dtype="<f4")
        return struct.pack("<I", feature.size) + feature.tobytes()

    if len(body) < offset + 4:
        return _error_reply("missing target dimension")
    (dim,) = struct.unpack_from("<I", body, offset)
    offset += 4
    if len(body) != offset + 4 * dim:
        return _error_reply(f"target block length mismatch for dim {dim}")
    target = np.frombuffer(body, dtype="<f4", count=dim, offset=offset).astype(np.float64)
    sim, grad = encoder.grad_similarity(image, target)
    return struct.pack("<f", sim) + np.asarray(grad, dtype="<f4").tobytes()


def serve(encoder, reader, writer) -> None:
    """Answer requests until the input stream closes.

    Malformed messages and encoder exceptions produce error replies; the
    loop keeps serving afterwards.
    """
    while True:
        body = _read_message(reader)
        if body is None:
            return
        try:
            reply = _handle_request(encoder, body)
        except Exception as exc:  # noqa: BLE001 - protocol must stay alive
            reply = _error_reply(f"{type(exc).__name__}: {exc}")
        _write_message(writer, reply)


def main(argv: list[str] | None = None) -> int:
    """Serve the ToyEncoder over stdio (test and desk-scale bridge)."""
    import argparse

    from .adversarial import ToyEncoder

    parser = argparse.ArgumentParser(
        prog="python -m oodkit.bridge",
        description="Serve the built-in toy encoder over the bridge protocol.",
    )
    parser.add_argument("--toy", action="store_true", required=True,
                        help="serve the ToyEncoder (only supported backend)")
    parser.add_argument("--height", type=int, default=8)
    parser.add_argument("--width", type=int, default=8)
    parser.add_argument("--dim", type=int, default=32)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    encoder = ToyEncoder(image_shape=(3, args.height, args.width),
                         feature_dim=args.dim, seed=args.seed)
    serve(encoder, sys.stdin.buffer, sys.stdout.buffer)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
