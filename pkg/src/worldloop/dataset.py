"""Synthetic drifting-pattern videos for the training lab.

Each video starts from a smoothed random field over the token grid and
advances by circularly translating the field one column per frame, so the
next frame is an exact, learnable function of the previous one.  Everything
is deterministic from the seed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig


@dataclass
class SyntheticVideo:
    frames: np.ndarray  # (N, tokens, channels)
    video_id: int
    seed: int

    def __len__(self) -> int:
        return self.frames.shape[0]


def _smooth_field(rng: np.random.Generator, rows: int, cols: int,
                  channels: int) -> np.ndarray:
    field = rng.standard_normal((rows, cols, channels))
    # wrap-around box blur, twice, to kill high frequencies
    for _ in range(2):
        acc = np.zeros_like(field)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                acc += np.roll(np.roll(field, dy, axis=0), dx, axis=1)
        field = acc / 9.0
    std = field.std()
    return field / std if std > 0 else field


def make_video(cfg: ModelConfig, num_frames: int, seed: int,
               video_id: int = 0) -> SyntheticVideo:
    if num_frames <= 2 * cfg.frames_per_block:
        raise ValueError("video must be longer than two blocks")
    rows, cols = cfg.token_grid
    rng = np.random.default_rng(seed)
    field = _smooth_field(rng, rows, cols, cfg.channels)
    frames = np.empty((num_frames, cfg.tokens_per_frame, cfg.channels),
                      dtype=cfg.np_dtype)
    for f in range(num_frames):
        shifted = np.roll(field, f, axis=1)
        frames[f] = shifted.reshape(cfg.tokens_per_frame, cfg.channels)
    return SyntheticVideo(frames=frames, video_id=video_id, seed=seed)


def make_dataset(cfg: ModelConfig, num_videos: int, num_frames: int,
                 seed: int) -> list[SyntheticVideo]:
    root = np.random.default_rng(seed)
    child_seeds = root.integers(0, 2 ** 31 - 1, size=num_videos)
    return [make_video(cfg, num_frames, int(s), i)
            for i, s in enumerate(child_seeds)]
