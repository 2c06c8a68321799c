"""Fixed-capacity per-layer key/value store with a permanent sink segment.

The first ``sink_frames`` appended frames seal into a sink that is never
evicted; later frames roll through a local window with strict oldest-first
eviction.  Entry payloads are whatever the caller stores (numpy arrays at
runtime, autodiff tensors during training rollouts) so the routing and
eviction logic is shared by both paths.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .model import WorldModel, encode_frame, prompt_cross_kv


class CacheError(ValueError):
    pass


@dataclass(frozen=True)
class CacheLayout:
    sink_frames: int = 1
    local_window_frames: int = 6
    layers: int = 2

    def __post_init__(self):
        if self.sink_frames < 0:
            raise CacheError("sink_frames must be non-negative")
        if self.local_window_frames < 1:
            raise CacheError("local window must hold at least one frame")
        if self.layers < 1:
            raise CacheError("need at least one layer")

    @property
    def capacity_frames(self) -> int:
        return self.sink_frames + self.local_window_frames


@dataclass
class KvEntry:
    key: object
    value: object
    absolute_frame_index: int


def _payload(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass
class KvCacheState:
    layout: CacheLayout
    sink: list[list[KvEntry]] = field(default_factory=list)
    local: list[deque] = field(default_factory=list)
    # per-expert, per-layer (K, V) projections of the current prompt
    cross_kv: dict[str, list] | None = None
    next_index: int = 0

    def __post_init__(self):
        if not self.sink:
            self.sink = [[] for _ in range(self.layout.layers)]
        if not self.local:
            self.local = [deque(maxlen=self.layout.local_window_frames)
                          for _ in range(self.layout.layers)]

    @property
    def sink_sealed(self) -> bool:
        return self.next_index >= self.layout.sink_frames

    def occupancy(self, layer: int) -> tuple[int, int]:
        return len(self.sink[layer]), len(self.local[layer])


def init_cache(layout: CacheLayout) -> KvCacheState:
    return KvCacheState(layout=layout)


def append_frame(cache: KvCacheState, layer_entries: list[KvEntry]) -> None:
    """Append one frame's per-layer entries; sink first, then rolling window."""
    if len(layer_entries) != cache.layout.layers:
        raise CacheError(f"expected {cache.layout.layers} layer entries, "
                         f"got {len(layer_entries)}")
    for e in layer_entries:
        if e.absolute_frame_index != cache.next_index:
            raise CacheError(f"out-of-order append: expected index "
                             f"{cache.next_index}, got {e.absolute_frame_index}")
    target_sink = not cache.sink_sealed
    for layer, entry in enumerate(layer_entries):
        if target_sink:
            cache.sink[layer].append(entry)
        else:
            cache.local[layer].append(entry)  # deque evicts oldest when full
    cache.next_index += 1


def attention_context(cache: KvCacheState, layer: int) -> list[KvEntry]:
    """Sink entries followed by local entries, ascending absolute index."""
    if layer >= cache.layout.layers:
        raise CacheError(f"layer {layer} out of range")
    return list(cache.sink[layer]) + list(cache.local[layer])


def context_arrays(cache: KvCacheState):
    """Concatenated (K, V) per layer, ready for a denoise call; None if empty."""
    layers = []
    for layer in range(cache.layout.layers):
        entries = attention_context(cache, layer)
        if not entries:
            return None
        k = np.concatenate([_payload(e.key) for e in entries], axis=0)
        v = np.concatenate([_payload(e.value) for e in entries], axis=0)
        layers.append((k, v))
    return layers


def context_tensors(cache: KvCacheState):
    """Like ``context_arrays`` but keeps autodiff tensors in the graph."""
    from .autodiff import as_tensor, concat
    layers = []
    for layer in range(cache.layout.layers):
        entries = attention_context(cache, layer)
        if not entries:
            return None
        k = concat([as_tensor(e.key) for e in entries], axis=0)
        v = concat([as_tensor(e.value) for e in entries], axis=0)
        layers.append((k, v))
    return layers


def cached_frame_indices(cache: KvCacheState) -> list[int]:
    return [e.absolute_frame_index for e in attention_context(cache, 0)]


def set_prompt(cache: KvCacheState, prompt_emb: np.ndarray, model: WorldModel) -> None:
    cache.cross_kv = prompt_cross_kv(prompt_emb, model)


def append_block(cache: KvCacheState, frames: np.ndarray, prompt_emb,
                 cam_tokens, model: WorldModel, start_index: int) -> None:
    """Encode clean frames and append them in order.

    ``cam_tokens`` has one row per token of the whole block (or None).
    """
    tpf = model.config.tokens_per_frame
    for j, frame in enumerate(frames):
        cam = None if cam_tokens is None else cam_tokens[j * tpf:(j + 1) * tpf]
        kvs = encode_frame(frame, prompt_emb, cam, model)
        entries = [KvEntry(k.data, v.data, start_index + j) for k, v in kvs]
        append_frame(cache, entries)


def recache(cache: KvCacheState, new_prompt_emb: np.ndarray, last_block,
            model: WorldModel, cam_tokens=None) -> KvCacheState:
    """Prompt-switch recache: refresh cross K/V and re-encode the last block.

    The last block's local self-attention entries are overwritten in place
    from its stored clean latents under the new prompt; sink entries and
    absolute indices are untouched.
    """
    frames = np.asarray(last_block.frames if hasattr(last_block, "frames")
                        else last_block)
    n = frames.shape[0]
    if len(cache.local[0]) < min(n, cache.layout.local_window_frames):
        raise CacheError("recache requires a previously generated block")
    set_prompt(cache, new_prompt_emb, model)
    tpf = model.config.tokens_per_frame
    # Overwrite the most recent n local entries (fewer if the window is
    # shorter than a block); frame j of the block maps to the entry whose
    # position from the end is n - j.
    keep = min(n, cache.layout.local_window_frames)
    for j in range(n - keep, n):
        frame = frames[j]
        cam = None if cam_tokens is None else cam_tokens[j * tpf:(j + 1) * tpf]
        kvs = encode_frame(frame, new_prompt_emb, cam, model)
        pos = -(n - j)
        for layer, (k, v) in enumerate(kvs):
            old = cache.local[layer][pos]
            cache.local[layer][pos] = KvEntry(k.data, v.data,
                                              old.absolute_frame_index)
    return cache


# --------------------------------------------------------------------------
# block-sparse mask
# --------------------------------------------------------------------------

def build_block_sparse_mask(num_blocks: int, frames_per_block: int,
                            layout: CacheLayout) -> np.ndarray:
    """(query block, key frame) visibility under sink + rolling window.

    Block b sees every sink frame, the ``local_window_frames`` frames
    immediately preceding it, and its own frames (causally at frame level;
    rows here are block-granular, see ``expand_block_mask``).
    """
    if num_blocks < 1 or frames_per_block < 1:
        raise CacheError("mask dimensions must be positive")
    total = num_blocks * frames_per_block
    mask = np.zeros((num_blocks, total), dtype=bool)
    frames = np.arange(total)
    for b in range(num_blocks):
        start = b * frames_per_block
        window_lo = start - layout.local_window_frames
        own = (frames >= start) & (frames < start + frames_per_block)
        window = (frames >= window_lo) & (frames < start)
        sink = frames < layout.sink_frames
        mask[b] = sink | window | own
    return mask


def expand_block_mask(mask: np.ndarray, frames_per_block: int) -> np.ndarray:
    """Frame-level (query frame, key frame) mask with intra-block causality."""
    num_blocks, total = mask.shape
    out = np.zeros((total, total), dtype=bool)
    for b in range(num_blocks):
        for q in range(b * frames_per_block, (b + 1) * frames_per_block):
            out[q] = mask[b] & (np.arange(total) <= q)
    return out


# --------------------------------------------------------------------------
# inspection
# --------------------------------------------------------------------------

def snapshot(cache: KvCacheState) -> dict:
    """Deep copy of all payloads for mutation checks and read-only export."""
    return {
        "next_index": cache.next_index,
        "sink": [[(e.absolute_frame_index, _payload(e.key).copy(),
                   _payload(e.value).copy()) for e in layer]
                 for layer in cache.sink],
        "local": [[(e.absolute_frame_index, _payload(e.key).copy(),
                    _payload(e.value).copy()) for e in layer]
                  for layer in cache.local],
        "cross_kv": None if cache.cross_kv is None else {
            name: [(k.copy(), v.copy()) for k, v in layers]
            for name, layers in cache.cross_kv.items()
        },
    }


def to_json_dict(cache: KvCacheState) -> dict:
    """Cockpit-facing dump: occupancy and indices, no payloads."""
    return {
        "layers": cache.layout.layers,
        "sink_frames": cache.layout.sink_frames,
        "local_window_frames": cache.layout.local_window_frames,
        "next_index": cache.next_index,
        "per_layer": [
            {
                "sink_occupancy": len(cache.sink[i]),
                "local_occupancy": len(cache.local[i]),
                "sink_indices": [e.absolute_frame_index for e in cache.sink[i]],
                "local_indices": [e.absolute_frame_index for e in cache.local[i]],
            }
            for i in range(cache.layout.layers)
        ],
    }


def dump_json(cache: KvCacheState) -> str:
    return json.dumps(to_json_dict(cache))
