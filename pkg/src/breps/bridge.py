"""Wire-protocol client for out-of-process models.

Newline-delimited JSON over subprocess stdio or TCP. One request, one
reply; ids increase strictly per connection and replies are matched
against the expected id. Retries are never automatic: a deterministic
attack must not silently re-sample a stochastic model.

Message schema (version 1):

    -> {"type": "hello", "version": 1}
    <- {"type": "hello_ok", "version": 1, "images": [...]}
    -> {"type": "register", "image_id": s, "mask_pgm_b64": s}
    <- {"type": "ok", "id": n}
    -> {"type": "eval", "id": n, "image_id": s, "bbox": [x1, y1, x2, y2]}
    <- {"type": "eval_ok", "id": n, "dice_loss": f, "iou": f, "grad": [f, f, f, f]}
    <- {"type": "error", "id": n, "code": s, "message": s}

The reply id of a register frame echoes the server's per-connection
request counter, which the client mirrors (registers and evals share one
counter). The server applies the same clip_and_order as the in-process
model, so the returned gradient is taken at the repaired box.
"""

from __future__ import annotations

import base64
import json
import os
import select
import shlex
import socket
import subprocess
import sys
from dataclasses import dataclass

import numpy as np

from .data import pgm_bytes
from .errors import (
    BridgeProtocolError,
    BridgeServerError,
    BridgeTimeoutError,
    BridgeVersionError,
    InvalidInputError,
    UnknownImageError,
)
from .geometry import BBox
from .segmodel import Instance, ModelEval

PROTOCOL_VERSION = 1


@dataclass(frozen=True)
class BridgeEndpoint:
    """Where and how to reach a model server.

    transport: ``stdio:<command line>`` or ``tcp:<host>:<port>``.
    """

    transport: str
    timeout_ms: int = 30_000
    max_inflight: int = 1

    def __post_init__(self):
        if self.timeout_ms <= 0:
            raise InvalidInputError(f"timeout_ms must be > 0, got {self.timeout_ms}")
        if self.max_inflight < 1:
            raise InvalidInputError(f"max_inflight must be >= 1, got {self.max_inflight}")
        kind = self.transport.split(":", 1)[0]
        if kind not in ("stdio", "tcp"):
            raise InvalidInputError(f"unknown transport {self.transport!r}")


class _StdioTransport:
    def __init__(self, command: str):
        self.proc = subprocess.Popen(
            shlex.split(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=sys.stderr.fileno() if hasattr(sys.stderr, "fileno") else None,
            bufsize=0,
        )
        self._buf = b""

    def send(self, line: bytes) -> None:
        self.proc.stdin.write(line)
        self.proc.stdin.flush()

    def recv_line(self, timeout_s: float) -> bytes:
        fd = self.proc.stdout.fileno()
        while b"\n" not in self._buf:
            ready, _, _ = select.select([fd], [], [], timeout_s)
            if not ready:
                raise BridgeTimeoutError(f"no reply within {timeout_s:.3f}s")
            chunk = os.read(fd, 65536)
            if not chunk:
                raise BridgeProtocolError("server closed the stream")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line

    def close(self) -> None:
        try:
            if self.proc.stdin:
                self.proc.stdin.close()
            self.proc.terminate()
            self.proc.wait(timeout=5)
        except Exception:
            self.proc.kill()


class _TcpTransport:
    def __init__(self, host: str, port: int):
        self.sock = socket.create_connection((host, port))
        self._buf = b""

    def send(self, line: bytes) -> None:
        self.sock.sendall(line)

    def recv_line(self, timeout_s: float) -> bytes:
        self.sock.settimeout(timeout_s)
        while b"\n" not in self._buf:
            try:
                chunk = self.sock.recv(65536)
            except socket.timeout:
                raise BridgeTimeoutError(f"no reply within {timeout_s:.3f}s") from None
            if not chunk:
                raise BridgeProtocolError("server closed the connection")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line

    def close(self) -> None:
        self.sock.close()


def _open_transport(endpoint: BridgeEndpoint):
    kind, _, rest = endpoint.transport.partition(":")
    if kind == "stdio":
        if not rest:
            raise InvalidInputError("stdio transport needs a command")
        return _StdioTransport(rest)
    host, _, port = rest.rpartition(":")
    if not host or not port.isdigit():
        raise InvalidInputError(f"tcp transport needs host:port, got {rest!r}")
    return _TcpTransport(host, int(port))


class BridgeClient:
    """Model-contract client speaking the JSONL protocol.

    Satisfies ``eval(image_id, bbox) -> ModelEval``, so it can drive the
    attack, the sweeps and the metrics directly. Not safe for concurrent
    use from multiple threads without external serialization.
    """

    def __init__(self, endpoint: BridgeEndpoint):
        self.endpoint = endpoint
        self._transport = _open_transport(endpoint)
        self._next_id = 0
        self._server_images: list[str] = []
        try:
            self._handshake()
        except Exception:
            self._transport.close()
            raise

    # -- protocol plumbing --

    def _timeout_s(self) -> float:
        return self.endpoint.timeout_ms / 1000.0

    def _send(self, message: dict) -> None:
        self._transport.send(json.dumps(message).encode("utf-8") + b"\n")

    def _recv(self) -> dict:
        line = self._transport.recv_line(self._timeout_s())
        try:
            reply = json.loads(line)
        except json.JSONDecodeError:
            raise BridgeProtocolError(f"reply is not JSON: {line[:80]!r}") from None
        if not isinstance(reply, dict) or "type" not in reply:
            raise BridgeProtocolError("reply missing field 'type'")
        return reply

    @staticmethod
    def _raise_server_error(reply: dict) -> None:
        code = reply.get("code", "unknown")
        message = reply.get("message", "")
        if code == "unknown_image":
            raise UnknownImageError(code, message)
        if code == "version_mismatch":
            raise BridgeVersionError(f"{code}: {message}")
        raise BridgeServerError(code, message)

    def _expect(self, reply: dict, wanted_type: str, wanted_id: int | None) -> dict:
        if reply["type"] == "error":
            self._raise_server_error(reply)
        if reply["type"] != wanted_type:
            raise BridgeProtocolError(
                f"expected type {wanted_type!r}, got {reply['type']!r}"
            )
        if wanted_id is not None:
            if "id" not in reply:
                raise BridgeProtocolError("reply missing field 'id'")
            if reply["id"] != wanted_id:
                raise BridgeProtocolError(
                    f"reply id {reply['id']} does not match request id {wanted_id}"
                )
        return reply

    def _handshake(self) -> None:
        self._send({"type": "hello", "version": PROTOCOL_VERSION})
        reply = self._recv()
        if reply["type"] == "error":
            self._raise_server_error(reply)
        if reply["type"] != "hello_ok":
            raise BridgeProtocolError(f"expected hello_ok, got {reply['type']!r}")
        if reply.get("version") != PROTOCOL_VERSION:
            raise BridgeVersionError(
                f"server speaks version {reply.get('version')!r}, "
                f"client speaks {PROTOCOL_VERSION}"
            )
        images = reply.get("images", [])
        if not isinstance(images, list):
            raise BridgeProtocolError("hello_ok field 'images' must be a list")
        self._server_images = [str(s) for s in images]

    # -- public API --

    def server_images(self) -> list[str]:
        return list(self._server_images)

    def register(self, image_id: str, mask: np.ndarray) -> None:
        self._next_id += 1
        self._send(
            {
                "type": "register",
                "image_id": image_id,
                "mask_pgm_b64": base64.b64encode(pgm_bytes(mask)).decode("ascii"),
            }
        )
        self._expect(self._recv(), "ok", self._next_id)
        self._server_images.append(image_id)

    def register_instance(self, inst: Instance) -> None:
        self.register(inst.image_id, inst.gt_mask.astype(np.uint8) * 255)

    def eval(self, image_id: str, bbox: BBox) -> ModelEval:
        self._next_id += 1
        self._send(
            {
                "type": "eval",
                "id": self._next_id,
                "image_id": image_id,
                "bbox": [float(bbox.x1), float(bbox.y1), float(bbox.x2), float(bbox.y2)],
            }
        )
        reply = self._expect(self._recv(), "eval_ok", self._next_id)
        for fld in ("dice_loss", "iou", "grad"):
            if fld not in reply:
                raise BridgeProtocolError(f"eval_ok missing field {fld!r}")
        grad = reply["grad"]
        if not isinstance(grad, list) or len(grad) != 4:
            raise BridgeProtocolError("eval_ok field 'grad' must be a list of 4 floats")
        try:
            return ModelEval(
                dice_loss=float(reply["dice_loss"]),
                iou=float(reply["iou"]),
                grad=np.array([float(g) for g in grad]),
            )
        except (TypeError, ValueError):
            raise BridgeProtocolError("eval_ok carries non-numeric fields") from None

    def close(self) -> None:
        self._transport.close()

    def __enter__(self) -> "BridgeClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
