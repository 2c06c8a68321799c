"""Steering a live session over the wire protocol.

Starts the service in-process, connects a raw socket client, holds W for a
few blocks, switches the prompt, and prints the stream as it arrives.
"""
import socket

import numpy as np

from worldloop.engine import EngineConfig
from worldloop.model import ModelConfig, init_world_model
from worldloop.service import (ServiceConfig, SessionService, read_frame,
                               write_frame)

model = init_world_model(ModelConfig(dtype="float32"), seed=0,
                         zero_residual=False)
service = SessionService(model, ServiceConfig(
    engine=EngineConfig(), base_prompt="a stone corridor",
    initial_frame_seed=4, max_blocks=8)).start()
print(f"service on {service.address}")

sock = socket.create_connection(service.address, timeout=30)
write_frame(sock, {"kind": "reset", "seed": 42})
write_frame(sock, {"kind": "action",
                   "segments": [{"key": "W", "duration": 6,
                                 "linear_speed": 0.1}]})
prompt_sent = False
while True:
    msg = read_frame(sock)
    if msg is None:
        break
    if msg["kind"] == "block":
        pose = msg["poses"][-1]
        print(f"block {msg['block_index']:2d}  {msg['ms']:6.1f} ms  "
              f"pos=({pose[4]:+.2f},{pose[5]:+.2f},{pose[6]:+.2f})")
        if msg["block_index"] == 2 and not prompt_sent:
            write_frame(sock, {"kind": "prompt", "text": "light the torch"})
            prompt_sent = True
    elif msg["kind"] == "turn_ack":
        print(f"ack: {msg.get('event_kind')} -> {msg['status']}"
              + (f" at block {msg['block_index']}"
                 if "block_index" in msg else ""))
    elif msg["kind"] == "stats":
        print(f"stats: {msg['fps']:.0f} fps, {msg['dropped']} dropped")
        if msg["blocks"] >= 8:
            break
sock.close()
service.stop()
