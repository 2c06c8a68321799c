"""Live session service: boundary-latched events over length-prefixed JSON.

Wire format: 4-byte big-endian length prefix followed by a UTF-8 JSON body,
both directions.  One session per connection; a receive loop queues client
events, a single generation worker applies them at block boundaries
(last writer per kind wins, superseded events are acknowledged as such), and
a sender drains a bounded outbound queue, dropping the oldest block messages
first when the client cannot keep up.
"""
from __future__ import annotations

import json
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cache import to_json_dict
from .camera import ActionSegment
from .engine import (EngineConfig, EngineError, Session, init_session,
                     rollout_block, switch_action, switch_prompt)
from .model import WorldModel

MAX_FRAME_BYTES = 16 * 1024 * 1024


class ProtocolError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# framing
# --------------------------------------------------------------------------

def write_frame(sock: socket.socket, obj: dict) -> None:
    body = json.dumps(obj).encode("utf-8")
    sock.sendall(struct.pack(">I", len(body)) + body)


def _read_exactly(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def read_frame_bytes(sock: socket.socket) -> bytes | None:
    header = _read_exactly(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame of {length} bytes exceeds limit")
    return _read_exactly(sock, length)


def read_frame(sock: socket.socket) -> dict | None:
    body = read_frame_bytes(sock)
    if body is None:
        return None
    return json.loads(body.decode("utf-8"))


# --------------------------------------------------------------------------
# payload encoding
# --------------------------------------------------------------------------

def frames_to_u8(frames: np.ndarray, token_grid: tuple[int, int]) -> list:
    """Per-block min/max normalized 8-bit heatmaps, one grid per frame."""
    rows, cols = token_grid
    mono = frames.mean(axis=-1)  # (K, tokens)
    lo, hi = float(mono.min()), float(mono.max())
    span = hi - lo if hi > lo else 1.0
    scaled = np.clip((mono - lo) / span * 255.0, 0, 255).astype(np.uint8)
    return [grid.reshape(rows, cols).tolist() for grid in scaled]


def poses_to_lists(poses) -> list:
    return [[float(v) for v in np.concatenate([p.rotation, p.position])]
            for p in poses]


# --------------------------------------------------------------------------
# service configuration
# --------------------------------------------------------------------------

@dataclass
class ServiceConfig:
    engine: EngineConfig = field(default_factory=EngineConfig)
    base_prompt: str = "open world"
    initial_frame_seed: int = 0
    max_blocks: int = 64
    block_queue_limit: int = 8
    dump_dir: str | None = None  # full-precision block side channel


def _initial_frame(model: WorldModel, cfg: ServiceConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.initial_frame_seed)
    return rng.standard_normal(
        (model.config.tokens_per_frame, model.config.channels),
        dtype=model.config.np_dtype)


# --------------------------------------------------------------------------
# per-connection state machine
# --------------------------------------------------------------------------

class _Connection:
    def __init__(self, sock: socket.socket, model: WorldModel,
                 cfg: ServiceConfig, conn_id: int):
        self.sock = sock
        self.model = model
        self.cfg = cfg
        self.conn_id = conn_id
        self.lock = threading.Condition()
        self.session: Session | None = None
        self.session_gen = 0
        self.paused = False
        self.closing = False
        self.pending: dict[str, tuple[int, object]] = {}
        self.reset_seed: tuple[int, int] | None = None  # (seq, seed)
        self.dropped = 0
        self.outbox: deque = deque()
        self.out_cond = threading.Condition()
        self.threads: list[threading.Thread] = []

    # -- outbound ----------------------------------------------------------
    def send(self, msg: dict) -> None:
        with self.out_cond:
            if msg["kind"] == "block":
                n_blocks = sum(1 for m in self.outbox if m["kind"] == "block")
                if n_blocks >= self.cfg.block_queue_limit:
                    for idx, m in enumerate(self.outbox):
                        if m["kind"] == "block":
                            del self.outbox[idx]
                            self.dropped += 1
                            break
            self.outbox.append(msg)
            self.out_cond.notify()

    def _sender(self) -> None:
        while True:
            with self.out_cond:
                while not self.outbox and not self.closing:
                    self.out_cond.wait(timeout=0.1)
                if self.closing and not self.outbox:
                    return
                msg = self.outbox.popleft() if self.outbox else None
            if msg is None:
                continue
            try:
                write_frame(self.sock, msg)
            except OSError:
                return

    # -- inbound -----------------------------------------------------------
    def _receiver(self) -> None:
        seq = 0
        while True:
            try:
                body = read_frame_bytes(self.sock)
            except (OSError, ProtocolError):
                body = None
            if body is None:
                with self.lock:
                    self.closing = True
                    self.lock.notify_all()
                with self.out_cond:
                    self.out_cond.notify_all()
                return
            seq += 1
            try:
                msg = json.loads(body.decode("utf-8"))
                if not isinstance(msg, dict):
                    raise ProtocolError("event body must be a JSON object")
                self._handle_event(msg, seq)
            except (ProtocolError, EngineError, KeyError, TypeError,
                    ValueError) as e:
                # malformed or invalid events draw one error; session continues
                self.send({"kind": "error", "seq": seq, "message": str(e)})

    def _handle_event(self, msg: dict, seq: int) -> None:
        kind = msg.get("kind")
        if kind == "reset":
            with self.lock:
                self.reset_seed = (seq, int(msg["seed"]))
                self.pending.clear()
                self.paused = False
                self.lock.notify_all()
            return
        if kind == "pause":
            with self.lock:
                self.paused = True
            self.send({"kind": "turn_ack", "seq": seq, "event_kind": "pause",
                       "status": "applied"})
            return
        if kind == "resume":
            with self.lock:
                self.paused = False
                self.lock.notify_all()
            self.send({"kind": "turn_ack", "seq": seq, "event_kind": "resume",
                       "status": "applied"})
            return
        if kind == "action":
            segments = tuple(
                ActionSegment(s["key"], int(s["duration"]),
                              float(s.get("linear_speed", 0.05)),
                              float(s.get("angular_speed", np.pi / 90)))
                for s in msg["segments"])
            payload: object = segments
        elif kind == "prompt":
            text = msg["text"]
            if not isinstance(text, str) or not text.strip():
                raise ProtocolError("prompt text must be a non-empty string")
            payload = text
        else:
            raise ProtocolError(f"unknown event kind {kind!r}")
        with self.lock:
            if self.session is None and self.reset_seed is None:
                raise ProtocolError("no active session; send reset first")
            prior = self.pending.get(kind)
            if prior is not None:
                self.send({"kind": "turn_ack", "seq": prior[0],
                           "event_kind": kind, "status": "superseded"})
            self.pending[kind] = (seq, payload)
            self.lock.notify_all()

    # -- generation worker ---------------------------------------------------
    def _apply_reset(self) -> None:
        seq, seed = self.reset_seed
        self.reset_seed = None
        self.session_gen += 1
        self.session = init_session(
            self.model, _initial_frame(self.model, self.cfg),
            _identity_pose(), self.cfg.base_prompt, seed, self.cfg.engine)
        self.send({"kind": "turn_ack", "seq": seq, "event_kind": "reset",
                   "status": "applied", "seed": seed,
                   "session": self.session_gen})
        self.send({"kind": "cache_state", "session": self.session_gen,
                   **to_json_dict(self.session.cache)})

    def _worker(self) -> None:
        while True:
            with self.lock:
                while (not self.closing and self.reset_seed is None
                       and (self.session is None or self.paused
                            or len(self.session.blocks) >= self.cfg.max_blocks)):
                    self.lock.wait(timeout=0.1)
                if self.closing:
                    return
                if self.reset_seed is not None:
                    self._apply_reset()
                    continue
                session = self.session
                taken = self.pending
                self.pending = {}
            boundary = len(session.blocks)
            for kind in ("action", "prompt"):
                if kind not in taken:
                    continue
                seq, payload = taken[kind]
                try:
                    if kind == "action":
                        switch_action(session, list(payload))
                    else:
                        switch_prompt(session, payload)
                        self.send({"kind": "cache_state",
                                   "session": self.session_gen,
                                   **to_json_dict(session.cache)})
                    self.send({"kind": "turn_ack", "seq": seq,
                               "event_kind": kind, "status": "applied",
                               "block_index": boundary})
                except EngineError as e:
                    self.send({"kind": "error", "seq": seq, "message": str(e)})
            block = rollout_block(session)
            k = self.model.config.frames_per_block
            first = 1 + block.block_index * k
            poses = session.trajectory.poses[first:first + k]
            self._dump_block(block)
            self.send({
                "kind": "block", "session": self.session_gen,
                "block_index": block.block_index,
                "poses": poses_to_lists(poses),
                "frames_u8": frames_to_u8(block.frames,
                                          self.model.config.token_grid),
                "ms": session.stats.block_ms[-1],
            })
            self.send({"kind": "cache_state", "session": self.session_gen,
                       **to_json_dict(session.cache)})
            self.send({"kind": "stats", "session": self.session_gen,
                       "fps": session.stats.fps, "dropped": self.dropped,
                       "blocks": len(session.blocks)})

    def _dump_block(self, block) -> None:
        if self.cfg.dump_dir is None:
            return
        path = Path(self.cfg.dump_dir)
        path.mkdir(parents=True, exist_ok=True)
        np.save(path / f"conn{self.conn_id}_s{self.session_gen}"
                       f"_b{block.block_index}.npy", block.frames)

    def start(self) -> None:
        for fn in (self._receiver, self._worker, self._sender):
            t = threading.Thread(target=fn, daemon=True)
            t.start()
            self.threads.append(t)

    def close(self) -> None:
        with self.lock:
            self.closing = True
            self.lock.notify_all()
        with self.out_cond:
            self.out_cond.notify_all()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def _identity_pose():
    from .camera import CameraPose
    return CameraPose.identity()


# --------------------------------------------------------------------------
# service
# --------------------------------------------------------------------------

class SessionService:
    """Accepts connections and runs one isolated session per client."""

    def __init__(self, model: WorldModel, config: ServiceConfig | None = None,
                 host: str = "127.0.0.1", port: int = 0):
        self.model = model
        self.config = config or ServiceConfig()
        self._listener = socket.create_server((host, port))
        self._connections: list[_Connection] = []
        self._next_id = 0
        self._running = False
        self._accept_thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()

    def start(self) -> "SessionService":
        self._running = True
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               daemon=True)
        self._accept_thread.start()
        return self

    def _accept_loop(self) -> None:
        while self._running:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            conn = _Connection(sock, self.model, self.config, self._next_id)
            self._next_id += 1
            self._connections.append(conn)
            conn.start()

    def stop(self) -> None:
        self._running = False
        try:
            self._listener.close()
        except OSError:
            pass
        for conn in self._connections:
            conn.close()
        time.sleep(0.05)


def serve(bind_address: str, checkpoint_path: str,
          config: ServiceConfig | None = None) -> SessionService:
    """Load a checkpoint and run the service on host:port."""
    from .checkpoint import load_model
    host, _, port = bind_address.rpartition(":")
    model = load_model(checkpoint_path)
    service = SessionService(model, config, host=host or "127.0.0.1",
                             port=int(port))
    return service.start()
