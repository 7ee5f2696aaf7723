"""JSONL protocol loop.

One logical stream per connection; requests are answered in order. The
server never crashes on malformed input: anything unparseable or invalid
is answered with an error frame.

    -> {"type": "hello", "version": 1}
    <- {"type": "hello_ok", "version": 1, "images": [...]}
    -> {"type": "register", "image_id": s, "mask_pgm_b64": s}
    <- {"type": "ok", "id": n}
    -> {"type": "eval", "id": n, "image_id": s, "bbox": [x1, y1, x2, y2]}
    <- {"type": "eval_ok", "id": n, "dice_loss": f, "iou": f, "grad": [f*4]}
    <- {"type": "error", "id": n, "code": s, "message": s}

Reply ids count register+eval requests per connection, starting at 1.
"""

from __future__ import annotations

import base64
import binascii
import json
import socket
from dataclasses import dataclass, field

from .model import ServerInstance, build_instance, evaluate, parse_pgm

PROTOCOL_VERSION = 1


@dataclass
class ServerState:
    instances: dict[str, ServerInstance] = field(default_factory=dict)
    handshaken: bool = False
    counter: int = 0


def handle_line(state: ServerState, line: str) -> dict:
    """Process one request line, returning the reply frame."""
    try:
        msg = json.loads(line)
    except json.JSONDecodeError:
        return _error(0, "parse_error", "request is not valid JSON")
    if not isinstance(msg, dict) or not isinstance(msg.get("type"), str):
        return _error(0, "parse_error", "request must be an object with a 'type'")

    kind = msg["type"]
    if kind == "hello":
        if msg.get("version") != PROTOCOL_VERSION:
            return _error(0, "version_mismatch",
                          f"server speaks version {PROTOCOL_VERSION}")
        state.handshaken = True
        return {
            "type": "hello_ok",
            "version": PROTOCOL_VERSION,
            "images": sorted(state.instances),
        }

    state.counter += 1
    rid = state.counter
    if not state.handshaken:
        return _error(rid, "no_handshake", "say hello first")
    if kind == "register":
        return _handle_register(state, msg, rid)
    if kind == "eval":
        return _handle_eval(state, msg, rid)
    return _error(rid, "bad_type", f"unknown request type {kind!r}")


def _error(rid: int, code: str, message: str) -> dict:
    return {"type": "error", "id": rid, "code": code, "message": message}


def _handle_register(state: ServerState, msg: dict, rid: int) -> dict:
    image_id = msg.get("image_id")
    blob = msg.get("mask_pgm_b64")
    if not isinstance(image_id, str) or not isinstance(blob, str):
        return _error(rid, "bad_request", "register needs image_id and mask_pgm_b64")
    if image_id in state.instances:
        return _error(rid, "duplicate_image", image_id)
    try:
        mask = parse_pgm(base64.b64decode(blob, validate=True))
        state.instances[image_id] = build_instance(image_id, mask)
    except (ValueError, binascii.Error) as exc:
        return _error(rid, "bad_mask", str(exc))
    return {"type": "ok", "id": rid}


def _handle_eval(state: ServerState, msg: dict, rid: int) -> dict:
    image_id = msg.get("image_id")
    box = msg.get("bbox")
    wanted_id = msg.get("id")
    if wanted_id != rid:
        return _error(rid, "bad_id", f"expected id {rid}, got {wanted_id!r}")
    if image_id not in state.instances:
        return _error(rid, "unknown_image", str(image_id))
    if (
        not isinstance(box, list)
        or len(box) != 4
        or not all(isinstance(v, (int, float)) for v in box)
    ):
        return _error(rid, "bad_bbox", "bbox must be [x1, y1, x2, y2]")
    try:
        result = evaluate(state.instances[image_id], tuple(float(v) for v in box))
    except (ValueError, FloatingPointError) as exc:
        return _error(rid, "eval_failed", str(exc))
    return {"type": "eval_ok", "id": rid, **result}


def serve_stream(read_fh, write_fh) -> None:
    """Answer requests from a line stream until EOF."""
    state = ServerState()
    for raw in read_fh:
        line = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        line = line.strip()
        if not line:
            continue
        reply = handle_line(state, line)
        write_fh.write((json.dumps(reply) + "\n").encode("utf-8"))
        write_fh.flush()


def serve_stdio() -> None:
    import sys

    serve_stream(sys.stdin.buffer, sys.stdout.buffer)


def serve_tcp(port: int, host: str = "127.0.0.1", max_connections: int | None = None) -> None:
    """Accept connections sequentially; each gets a fresh state."""
    with socket.create_server((host, port)) as server:
        served = 0
        while max_connections is None or served < max_connections:
            conn, _ = server.accept()
            with conn, conn.makefile("rb") as rd, conn.makefile("wb") as wr:
                serve_stream(rd, wr)
            served += 1
