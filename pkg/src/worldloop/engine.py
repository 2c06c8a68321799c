"""Block-wise few-step autoregressive rollout with boundary-latched events.

A session owns a model handle, a KV cache seeded from the initial frame
(the sink), a camera trajectory, and a seeded noise stream.  Each block is
denoised in a few velocity-integration steps against the cached context;
action switches extend the trajectory without touching the cache, prompt
switches trigger a recache of the last block.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import as_tensor, no_grad
from .cache import (CacheLayout, KvCacheState, append_block,
                    cached_frame_indices, context_arrays, init_cache, recache,
                    set_prompt)
from .camera import (ActionSegment, CameraPose, Intrinsics, Trajectory,
                     action_to_trajectory, pool_plucker_map, pose_to_plucker)
from .model import (FrameBlock, WorldModel, camera_tokens_for_frames, denoise,
                    encode_prompt)


class EngineError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerSchedule:
    """Strictly decreasing denoising timesteps in (0, 1].

    The defaults sit exactly on the model's 16-bin noise grid (15ths), two
    steps per expert at the 0.9 boundary; off-grid steps would condition the
    denoiser on a neighbouring bin and skew the velocity scale.
    """

    timesteps: tuple[float, ...] = (1.0, 14.0 / 15.0, 0.6, 1.0 / 3.0)

    def __post_init__(self):
        ts = self.timesteps
        if not ts:
            raise ValueError("schedule must be non-empty")
        if any(not 0.0 < t <= 1.0 for t in ts):
            raise ValueError("timesteps must lie in (0, 1]")
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ValueError("timesteps must be strictly decreasing")


@dataclass(frozen=True)
class TurnEvent:
    at_block: int
    new_segments: tuple[ActionSegment, ...] | None = None
    new_prompt: str | None = None

    def __post_init__(self):
        if self.at_block < 0:
            raise ValueError("at_block must be non-negative")
        if self.new_segments is None and self.new_prompt is None:
            raise ValueError("event must carry segments or a prompt")


@dataclass(frozen=True)
class EngineConfig:
    schedule: SamplerSchedule = SamplerSchedule()
    layout: CacheLayout = CacheLayout()
    intrinsics: Intrinsics = Intrinsics()
    plucker_hw: tuple[int, int] = (8, 8)
    vocab_seed: int = 7


@dataclass
class TimingStats:
    block_ms: list[float] = field(default_factory=list)
    total_frames: int = 0
    total_seconds: float = 0.0

    def record(self, seconds: float, frames: int) -> None:
        self.block_ms.append(seconds * 1000.0)
        self.total_frames += frames
        self.total_seconds += seconds

    @property
    def fps(self) -> float:
        return self.total_frames / self.total_seconds if self.total_seconds else 0.0


@dataclass
class Session:
    model: WorldModel
    config: EngineConfig
    seed: int
    cache: KvCacheState
    trajectory: Trajectory
    prompt_text: str
    prompt_emb: np.ndarray
    initial_frame: np.ndarray
    rng: np.random.Generator
    blocks: list[FrameBlock] = field(default_factory=list)
    turn_log: list[dict] = field(default_factory=list)
    stats: TimingStats = field(default_factory=TimingStats)
    last_cam_tokens: object | None = None  # camera-token tensor of the last block

    @property
    def frames_generated(self) -> int:
        return len(self.blocks) * self.model.config.frames_per_block


def draw_block_noise(rng: np.random.Generator, model: WorldModel) -> np.ndarray:
    cfg = model.config
    return rng.standard_normal(
        (cfg.frames_per_block, cfg.tokens_per_frame, cfg.channels),
        dtype=cfg.np_dtype)


def block_camera_tokens(poses: list[CameraPose], model: WorldModel,
                        config: EngineConfig):
    """Stack per-frame pooled ray embeddings and project to token addends."""
    h, w = config.plucker_hw
    pooled = []
    for pose in poses:
        pmap = pose_to_plucker(pose, config.intrinsics, h, w)
        pooled.append(pool_plucker_map(pmap, model.config.token_grid))
    stacked = np.concatenate(pooled, axis=0).astype(model.config.np_dtype)
    return camera_tokens_for_frames(stacked, model)


def generate_block(model: WorldModel, context_kv, prompt_emb, cam_tokens,
                   noise, schedule: SamplerSchedule, context_frame_ids=None,
                   block_start: int | None = None):
    """Integrate the velocity field from t=1 noise down to t=0.

    Runs under whatever gradient mode the caller set; training uses the same
    path with recording enabled.
    """
    x = as_tensor(noise)
    ts = schedule.timesteps
    for i, t in enumerate(ts):
        t_next = ts[i + 1] if i + 1 < len(ts) else 0.0
        v = denoise(x, t, context_kv, prompt_emb, cam_tokens, model,
                    context_frame_ids=context_frame_ids,
                    block_start=block_start)
        x = x + (t_next - t) * v
    return x


def init_session(model: WorldModel, initial_frame: np.ndarray,
                 initial_pose: CameraPose, base_prompt: str, seed: int,
                 config: EngineConfig | None = None) -> Session:
    config = config or EngineConfig()
    cfg = model.config
    frame = np.asarray(initial_frame, dtype=cfg.np_dtype)
    if frame.shape != (cfg.tokens_per_frame, cfg.channels):
        raise EngineError(f"initial frame must be "
                          f"({cfg.tokens_per_frame}, {cfg.channels})")
    if not np.isfinite(frame).all():
        raise EngineError("initial frame must be finite")
    prompt_emb = encode_prompt(base_prompt, config.vocab_seed, cfg.channels,
                               cfg.vocab_size, cfg.dtype)
    cache = init_cache(config.layout)
    session = Session(model=model, config=config, seed=seed, cache=cache,
                      trajectory=Trajectory([initial_pose]),
                      prompt_text=base_prompt, prompt_emb=prompt_emb,
                      initial_frame=frame,
                      rng=np.random.default_rng(seed))
    with no_grad():
        set_prompt(cache, prompt_emb, model)
        cam = block_camera_tokens([initial_pose], model, config)
        append_block(cache, frame[None], prompt_emb, cam, model, start_index=0)
    return session


def _ensure_poses(session: Session, through_frame: int) -> None:
    # Missing poses hold the last one (implicit Idle).
    while len(session.trajectory) < through_frame + 1:
        session.trajectory.poses.append(session.trajectory.poses[-1])


def block_poses(session: Session, block_index: int) -> list[CameraPose]:
    k = session.model.config.frames_per_block
    first = 1 + block_index * k
    _ensure_poses(session, first + k - 1)
    return session.trajectory.poses[first:first + k]


def rollout_block(session: Session) -> FrameBlock:
    """Generate the next block, append its K/V to the cache, advance stats."""
    if session.cache.next_index == 0:
        raise EngineError("session has no sink frame; initialize it first")
    start = time.perf_counter()
    b = len(session.blocks)
    k = session.model.config.frames_per_block
    poses = block_poses(session, b)
    noise = draw_block_noise(session.rng, session.model)
    with no_grad():
        cam = block_camera_tokens(poses, session.model, session.config)
        ctx = context_arrays(session.cache)
        x = generate_block(session.model, ctx, session.prompt_emb, cam, noise,
                           session.config.schedule,
                           context_frame_ids=cached_frame_indices(session.cache),
                           block_start=1 + b * k)
        frames = x.data
        append_block(session.cache, frames, session.prompt_emb, cam,
                     session.model, start_index=1 + b * k)
    session.last_cam_tokens = cam
    block = FrameBlock(frames, b)
    session.blocks.append(block)
    session.stats.record(time.perf_counter() - start, k)
    return block


def switch_action(session: Session, segments: list[ActionSegment]) -> None:
    """Extend the trajectory from the current last pose; cache untouched."""
    extension = action_to_trajectory(list(segments), session.trajectory.poses[-1])
    session.trajectory.extend(extension)
    session.turn_log.append({
        "kind": "action", "block_index": len(session.blocks),
        "segments": [
            {"key": s.key, "duration": s.duration_frames,
             "linear_speed": s.linear_speed, "angular_speed": s.angular_speed}
            for s in segments],
        "timestamp": time.time(),
    })


def switch_prompt(session: Session, text: str) -> None:
    """Encode the new prompt and recache the last generated block."""
    if not session.blocks:
        raise EngineError("prompt switch requires at least one generated block")
    cfg = session.model.config
    emb = encode_prompt(text, session.config.vocab_seed, cfg.channels,
                        cfg.vocab_size, cfg.dtype)
    with no_grad():
        recache(session.cache, emb, session.blocks[-1], session.model,
                cam_tokens=session.last_cam_tokens)
    session.prompt_text = text
    session.prompt_emb = emb
    session.turn_log.append({
        "kind": "prompt", "block_index": len(session.blocks),
        "text": text, "timestamp": time.time(),
    })


def run_session(model: WorldModel, initial_frame: np.ndarray,
                initial_pose: CameraPose, base_prompt: str,
                events: list[TurnEvent], num_blocks: int, seed: int,
                config: EngineConfig | None = None):
    """Event-driven multi-turn generation; returns (blocks, trajectory, log)."""
    if num_blocks < 1:
        raise EngineError("num_blocks must be >= 1")
    boundaries = [e.at_block for e in events]
    if any(b <= a for a, b in zip(boundaries, boundaries[1:])):
        raise EngineError("events must be sorted by at_block without duplicates")
    session = init_session(model, initial_frame, initial_pose, base_prompt,
                           seed, config)
    by_boundary = {e.at_block: e for e in events}
    for b in range(num_blocks):
        event = by_boundary.get(b)
        if event is not None:
            if event.new_segments is not None:
                switch_action(session, list(event.new_segments))
            if event.new_prompt is not None:
                switch_prompt(session, event.new_prompt)
        rollout_block(session)
    return session.blocks, session.trajectory, session.turn_log


def event_to_dict(event: TurnEvent) -> dict:
    d: dict = {"at_block": event.at_block}
    if event.new_segments is not None:
        d["segments"] = [
            {"key": s.key, "duration": s.duration_frames,
             "linear_speed": s.linear_speed, "angular_speed": s.angular_speed}
            for s in event.new_segments]
    if event.new_prompt is not None:
        d["prompt"] = event.new_prompt
    return d


def event_from_dict(d: dict) -> TurnEvent:
    segments = None
    if "segments" in d:
        segments = tuple(
            ActionSegment(s["key"], int(s["duration"]),
                          float(s.get("linear_speed", 0.05)),
                          float(s.get("angular_speed", np.pi / 90)))
            for s in d["segments"])
    return TurnEvent(at_block=int(d["at_block"]), new_segments=segments,
                     new_prompt=d.get("prompt"))
