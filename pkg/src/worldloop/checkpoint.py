"""Model checkpoints: flat little-endian tensor archive with a JSON header.

Layout: 8-byte little-endian header length, UTF-8 JSON header, then the raw
tensor bytes back to back.  The header maps each tensor name to its shape,
dtype, and byte offset into the data section.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import ExpertConfig, ModelConfig, Tensor, WorldModel

MAGIC_VERSION = 1


def save_model(model: WorldModel, path: str | Path) -> None:
    tensors = model.parameters()
    header: dict = {
        "version": MAGIC_VERSION,
        "config": asdict(model.config),
        "boundary": model.experts.boundary,
        "high_lr": model.experts.high_lr,
        "low_lr": model.experts.low_lr,
        "tensors": {},
    }
    offset = 0
    blobs = []
    for name, t in tensors:
        arr = np.ascontiguousarray(t.data)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        header["tensors"][name] = {"shape": list(arr.shape),
                                   "dtype": str(arr.dtype), "offset": offset}
        blobs.append(raw)
        offset += len(raw)
    payload = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for raw in blobs:
            fh.write(raw)


def load_model(path: str | Path) -> WorldModel:
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = fh.read()
    if header.get("version") != MAGIC_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    cfg_dict = dict(header["config"])
    cfg_dict["token_grid"] = tuple(cfg_dict["token_grid"])
    cfg = ModelConfig(**cfg_dict)

    def read(name: str) -> Tensor:
        spec = header["tensors"][name]
        dt = np.dtype(spec["dtype"]).newbyteorder("<")
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(data, dtype=dt, count=count,
                            offset=spec["offset"]).reshape(spec["shape"])
        return Tensor(arr.astype(np.dtype(spec["dtype"]), copy=True),
                      requires_grad=True)

    names = list(header["tensors"])
    experts = {"high": {}, "low": {}}
    cam_w = cam_b = None
    for name in names:
        if name == "cam_proj.w":
            cam_w = read(name)
        elif name == "cam_proj.b":
            cam_b = read(name)
        else:
            prefix, key = name.split(".", 1)
            experts[prefix][key] = read(name)
    ex = ExpertConfig(high_expert=experts["high"], low_expert=experts["low"],
                      boundary=header["boundary"], high_lr=header["high_lr"],
                      low_lr=header["low_lr"])
    return WorldModel(config=cfg, experts=ex, cam_proj_w=cam_w, cam_proj_b=cam_b)


def save_blocks(blocks, path: str | Path) -> None:
    """Generated frame blocks as the same archive format."""
    header: dict = {"version": MAGIC_VERSION, "tensors": {}}
    offset = 0
    blobs = []
    for block in blocks:
        arr = np.ascontiguousarray(block.frames)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        header["tensors"][f"block_{block.block_index}"] = {
            "shape": list(arr.shape), "dtype": str(arr.dtype), "offset": offset}
        blobs.append(raw)
        offset += len(raw)
    payload = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for raw in blobs:
            fh.write(raw)


def load_blocks(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = fh.read()
    out = {}
    for name, spec in header["tensors"].items():
        dt = np.dtype(spec["dtype"]).newbyteorder("<")
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        out[name] = np.frombuffer(data, dtype=dt, count=count,
                                  offset=spec["offset"]).reshape(spec["shape"])
    return out
