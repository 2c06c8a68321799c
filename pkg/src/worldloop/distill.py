"""Training laboratory: flow-matching pretraining, score-difference
distillation, and the randomized long-video tuning loop.

The tuning loop per step: sample a video and a block-aligned rollout length,
roll the student autoregressively (sink + KV cache, gradients kept), sample
a window uniformly, build the self-forced and teacher-forced conditions,
noise the window on the shared linear path, and update the generator with
the frozen score difference pushed through the window.  The trainable
critic ("fake" score) then takes one regression step on the freshly noised
window.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .cache import (KvEntry, append_frame, cached_frame_indices,
                    context_tensors, init_cache)
from .camera import CameraPose
from .dataset import SyntheticVideo
from .engine import (EngineConfig, block_camera_tokens, generate_block)
from .model import (Conditioning, WorldModel, clone_model, denoise,
                    encode_frame, encode_prompt, flow_matching_loss, sgd_step)


class TrainerError(ValueError):
    pass


@dataclass
class TrainerConfig:
    engine: EngineConfig = field(default_factory=EngineConfig)
    window_frames: int = 3        # K: tuning window / chunk size
    max_frames: int = 12          # N_max: longest randomized rollout
    p_teacher: float = 0.25       # per-step probability of teacher forcing
    high_lr: float = 5e-4
    low_lr: float = 1e-3
    pretrain_clip_frames: int = 7
    base_prompt: str = "drifting pattern"

    def __post_init__(self):
        if self.window_frames > self.max_frames:
            raise TrainerError("window_frames must not exceed max_frames")
        if not 0.0 <= self.p_teacher <= 1.0:
            raise TrainerError("p_teacher must lie in [0, 1]")

    @property
    def timesteps(self) -> tuple[float, ...]:
        return self.engine.schedule.timesteps


@dataclass
class ScorePair:
    real_score: WorldModel   # frozen teacher
    fake_score: WorldModel   # trainable critic

    def real_fingerprint(self) -> bytes:
        return b"".join(t.data.tobytes() for _, t in self.real_score.parameters())


def init_score_pair(generator: WorldModel) -> ScorePair:
    return ScorePair(real_score=clone_model(generator, trainable=False),
                     fake_score=clone_model(generator, trainable=True))


def _apply_lrs(model: WorldModel, cfg: TrainerConfig) -> None:
    model.experts.high_lr = cfg.high_lr
    model.experts.low_lr = cfg.low_lr


def _prompt(cfg: TrainerConfig, model: WorldModel) -> np.ndarray:
    return encode_prompt(cfg.base_prompt, cfg.engine.vocab_seed,
                         model.config.channels, model.config.vocab_size,
                         model.config.dtype)


def _cam_tokens(model: WorldModel, cfg: TrainerConfig, frames: int) -> np.ndarray:
    # Synthetic videos carry no camera; frames sit at the identity pose.
    return block_camera_tokens([CameraPose.identity()] * frames, model,
                               cfg.engine)


def draw_frames_noise(rng: np.random.Generator, model: WorldModel,
                      frames: int) -> np.ndarray:
    cfg = model.config
    return rng.standard_normal((frames, cfg.tokens_per_frame, cfg.channels),
                               dtype=cfg.np_dtype)


def sample_pretrain_t(rng: np.random.Generator, t_bins: int,
                      min_t: float = 0.0) -> float:
    """Noise level on the bin grid the conditioning can resolve.

    Drawing off-grid t would leave an irreducible velocity-scale ambiguity
    inside each bin; the top bin backs off from 1.0 by an epsilon to stay on
    the open interval.  ``min_t`` concentrates pretraining on the noise range
    the few-step sampler actually queries.
    """
    lo = max(1, int(np.ceil(min_t * (t_bins - 1))))
    b = int(rng.integers(lo, t_bins))
    t = b / (t_bins - 1)
    return min(t, 1.0 - 1e-9)


# --------------------------------------------------------------------------
# randomized samplers
# --------------------------------------------------------------------------

def sample_rollout_length(k: int, n_max: int, rng: np.random.Generator,
                          frames_per_block: int) -> int:
    """Uniform over block-aligned lengths in [k, n_max]."""
    if k > n_max:
        raise TrainerError("k must not exceed n_max")
    support = [n for n in range(k, n_max + 1) if n % frames_per_block == 0]
    if not support:
        raise TrainerError("no block-aligned lengths in [k, n_max]")
    return support[int(rng.integers(len(support)))]


def sample_window(n: int, k: int, rng: np.random.Generator) -> int:
    """Uniform start index over {1, ..., n - k + 1} (1-based)."""
    if n < k:
        raise TrainerError("rollout shorter than the window")
    return int(rng.integers(1, n - k + 2))


def make_conditions(v_pred: list, v_gt: np.ndarray, i: int):
    """Self-forced and teacher-forced condition frames for window start i."""
    if i < 1 or i - 1 >= len(v_pred) or i - 1 >= len(v_gt):
        raise TrainerError(f"window start {i} out of range")
    return v_pred[i - 1], v_gt[i - 1]


# --------------------------------------------------------------------------
# rollout with gradients
# --------------------------------------------------------------------------

def autoregressive_rollout(model: WorldModel, first_frame: np.ndarray, n: int,
                           cfg: TrainerConfig, rng: np.random.Generator,
                           keep_grad: bool = True) -> list:
    """Sink-anchored block-wise rollout of ``n`` generated frames.

    Returns [first_frame, frame_1, ..., frame_n] where generated frames stay
    on the autodiff tape when ``keep_grad`` holds.  Matches the interactive
    engine's rollout numerically for the same seed stream and config.
    """
    fpb = model.config.frames_per_block
    if n % fpb:
        raise TrainerError(f"rollout length {n} not divisible by block size {fpb}")
    prompt = _prompt(cfg, model)
    first = Tensor(np.asarray(first_frame, dtype=model.config.np_dtype))
    cache = init_cache(cfg.engine.layout)
    cam_one = _cam_tokens(model, cfg, 1)
    cam_block = _cam_tokens(model, cfg, fpb)
    tpf = model.config.tokens_per_frame

    def run():
        kvs = encode_frame(first, prompt, cam_one, model)
        append_frame(cache, [KvEntry(k, v, 0) for k, v in kvs])
        v_pred = [first]
        for b in range(n // fpb):
            noise = draw_frames_noise(rng, model, fpb)
            ctx = context_tensors(cache)
            x = generate_block(model, ctx, prompt, cam_block, noise,
                               cfg.engine.schedule,
                               context_frame_ids=cached_frame_indices(cache),
                               block_start=1 + b * fpb)
            for j in range(fpb):
                frame = x[j]
                cam_j = cam_block[j * tpf:(j + 1) * tpf]
                kvs = encode_frame(frame, prompt, cam_j, model)
                append_frame(cache, [KvEntry(k, v, 1 + b * fpb + j)
                                     for k, v in kvs])
                v_pred.append(frame)
        return v_pred

    if keep_grad:
        return run()
    with no_grad():
        return run()


# --------------------------------------------------------------------------
# score difference
# --------------------------------------------------------------------------

def _score_velocity(score: WorldModel, x_t: np.ndarray, t: float,
                    condition: np.ndarray, prompt: np.ndarray,
                    cam_window: np.ndarray, cam_one: np.ndarray,
                    cond_index: int = 0, window_start: int = 1):
    ctx_entries = encode_frame(condition, prompt, cam_one, score)
    ctx = [(k, v) for k, v in ctx_entries]
    return denoise(x_t, t, ctx, prompt, cam_window, score,
                   context_frame_ids=[cond_index], block_start=window_start)


def dmd_gradient(score_pair: ScorePair, x_t: np.ndarray, t: float,
                 c_student: np.ndarray, c_teacher: np.ndarray,
                 cfg: TrainerConfig, cond_index: int = 0,
                 window_start: int = 1) -> np.ndarray:
    """Frozen score difference fake(x_t | student cond) - real(x_t | teacher cond).

    Both networks predict velocities; the score of the noising marginal at
    x_t = (1-t) x0 + t eps is s = -(x_t + (1-t) v) / t, so the difference
    reduces to (1-t)/t * (v_real - v_fake).  Gradient descent on <W, g> then
    moves the window toward the frozen teacher's denoising direction and away
    from the critic's.  No gradient flows into either score network here.
    """
    if t not in cfg.timesteps:
        raise TrainerError(f"t={t} not in the configured timestep list")
    x_t = np.asarray(x_t)
    if np.asarray(c_student).shape != np.asarray(c_teacher).shape:
        raise TrainerError("condition shapes disagree")
    model = score_pair.fake_score
    prompt = _prompt(cfg, model)
    cam_window = _cam_tokens(model, cfg, x_t.shape[0])
    cam_one = _cam_tokens(model, cfg, 1)
    with no_grad():
        fake_v = _score_velocity(score_pair.fake_score, x_t, t, c_student,
                                 prompt, cam_window, cam_one, cond_index,
                                 window_start)
        real_v = _score_velocity(score_pair.real_score, x_t, t, c_teacher,
                                 prompt, cam_window, cam_one, cond_index,
                                 window_start)
    return (1.0 - t) / t * (real_v.data - fake_v.data)


def window_inner_product(window: list, g: np.ndarray) -> Tensor:
    """<W, g> with g constant, so d(loss)/dW = g exactly."""
    loss = None
    for j, frame in enumerate(window):
        term = (frame * Tensor(g[j])).sum()
        loss = term if loss is None else loss + term
    return loss


def _fake_score_regression(score_pair: ScorePair, w_arr: np.ndarray, t: float,
                           eps: np.ndarray, c_student: np.ndarray,
                           cfg: TrainerConfig, cond_index: int = 0,
                           window_start: int = 1) -> float:
    """One denoising regression step for the critic on the generator sample."""
    fake = score_pair.fake_score
    prompt = _prompt(cfg, fake)
    cam_window = _cam_tokens(fake, cfg, w_arr.shape[0])
    cam_one = _cam_tokens(fake, cfg, 1)
    x_t = (1.0 - t) * w_arr + t * eps
    target = eps - w_arr
    pred = _score_velocity(fake, x_t, t, c_student, prompt, cam_window,
                           cam_one, cond_index, window_start)
    err = pred - Tensor(target)
    loss = (err * err).mean()
    loss.backward()
    sgd_step(fake)
    return loss.item()


# --------------------------------------------------------------------------
# tuning steps
# --------------------------------------------------------------------------

def _choose_mode(cfg: TrainerConfig, rng: np.random.Generator) -> str:
    # Degenerate probabilities skip the draw so the p=1 path consumes the
    # same rng stream as the plain teacher-forced implementation.
    if cfg.p_teacher >= 1.0:
        return "teacher"
    if cfg.p_teacher <= 0.0:
        return "self"
    return "teacher" if rng.random() < cfg.p_teacher else "self"


def _teacher_window(generator: WorldModel, video: SyntheticVideo, i: int,
                    cfg: TrainerConfig, rng: np.random.Generator) -> list:
    """Generate the window chunk conditioned on ground-truth history."""
    k = cfg.window_frames
    prompt = _prompt(cfg, generator)
    cam_one = _cam_tokens(generator, cfg, 1)
    cam_window = _cam_tokens(generator, cfg, k)
    gt = video.frames
    sink_kvs = encode_frame(Tensor(gt[0]), prompt, cam_one, generator)
    ctx = [[(k_, v_)] for k_, v_ in sink_kvs]
    if i > 1:
        cond_kvs = encode_frame(Tensor(gt[i - 1]), prompt, cam_one, generator)
        for layer, (k_, v_) in enumerate(cond_kvs):
            ctx[layer].append((k_, v_))
    from .autodiff import concat
    context = [(concat([kv[0] for kv in layer], axis=0),
                concat([kv[1] for kv in layer], axis=0)) for layer in ctx]
    ctx_ids = [0] if i == 1 else [0, i - 1]
    noise = draw_frames_noise(rng, generator, k)
    x = generate_block(generator, context, prompt, cam_window, noise,
                       cfg.engine.schedule, context_frame_ids=ctx_ids,
                       block_start=i)
    return [x[j] for j in range(k)]


def tuning_step(generator: WorldModel, score_pair: ScorePair,
                dataset: list[SyntheticVideo], cfg: TrainerConfig,
                rng: np.random.Generator) -> dict:
    """One randomized long-video tuning iteration; returns the step trace."""
    if not dataset:
        raise TrainerError("dataset is empty")
    k = cfg.window_frames
    fpb = generator.config.frames_per_block
    if k % fpb:
        raise TrainerError("window_frames must be divisible by the block size")
    _apply_lrs(generator, cfg)
    _apply_lrs(score_pair.fake_score, cfg)

    vid_idx = int(rng.integers(len(dataset)))
    video = dataset[vid_idx]
    mode = _choose_mode(cfg, rng)
    n = sample_rollout_length(k, cfg.max_frames, rng, fpb)
    gt = video.frames

    if mode == "self":
        v_pred = autoregressive_rollout(generator, gt[0], n, cfg, rng)
        i = sample_window(n, k, rng)
        window = v_pred[i:i + k]
        c_student_t, c_teacher = make_conditions(v_pred, gt, i)
        c_student = c_student_t.data if isinstance(c_student_t, Tensor) \
            else np.asarray(c_student_t)
    else:
        i = sample_window(n, k, rng)
        window = _teacher_window(generator, video, i, cfg, rng)
        c_student = gt[i - 1]
        c_teacher = gt[i - 1]

    t = cfg.timesteps[int(rng.integers(len(cfg.timesteps)))]
    eps = draw_frames_noise(rng, generator, k)
    w_arr = np.stack([f.data for f in window])
    x_t = (1.0 - t) * w_arr + t * eps

    g = dmd_gradient(score_pair, x_t, t, c_student, np.asarray(c_teacher),
                     cfg, cond_index=i - 1, window_start=i)
    loss = window_inner_product(window, g)
    loss.backward()
    sgd_step(generator)
    fake_loss = _fake_score_regression(score_pair, w_arr, t, eps, c_student,
                                       cfg, cond_index=i - 1, window_start=i)

    return {"video": vid_idx, "N": n, "i": i, "t": t, "forcing_mode": mode,
            "gen_loss": loss.item(), "g_norm": float(np.abs(g).mean()),
            "fake_loss": fake_loss}


def teacher_forced_distill_step(generator: WorldModel, score_pair: ScorePair,
                                dataset: list[SyntheticVideo],
                                cfg: TrainerConfig,
                                rng: np.random.Generator) -> dict:
    """Plain teacher-forced score-difference distillation, written straight.

    The randomized tuning loop with p_teacher = 1 must reproduce this update
    exactly; it also backs the standalone distillation stage.
    """
    if not dataset:
        raise TrainerError("dataset is empty")
    k = cfg.window_frames
    _apply_lrs(generator, cfg)
    _apply_lrs(score_pair.fake_score, cfg)
    vid_idx = int(rng.integers(len(dataset)))
    video = dataset[vid_idx]
    n = sample_rollout_length(k, cfg.max_frames, rng,
                              generator.config.frames_per_block)
    i = sample_window(n, k, rng)
    window = _teacher_window(generator, video, i, cfg, rng)
    cond = video.frames[i - 1]

    t = cfg.timesteps[int(rng.integers(len(cfg.timesteps)))]
    eps = draw_frames_noise(rng, generator, k)
    w_arr = np.stack([f.data for f in window])
    x_t = (1.0 - t) * w_arr + t * eps
    g = dmd_gradient(score_pair, x_t, t, cond, cond, cfg, cond_index=i - 1,
                     window_start=i)
    loss = window_inner_product(window, g)
    loss.backward()
    sgd_step(generator)
    fake_loss = _fake_score_regression(score_pair, w_arr, t, eps, cond, cfg,
                                       cond_index=i - 1, window_start=i)
    return {"video": vid_idx, "N": n, "i": i, "t": t,
            "forcing_mode": "teacher", "gen_loss": loss.item(),
            "fake_loss": fake_loss}


def tune_long(generator: WorldModel, score_pair: ScorePair,
              dataset: list[SyntheticVideo], cfg: TrainerConfig, steps: int,
              seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    return [tuning_step(generator, score_pair, dataset, cfg, rng)
            for _ in range(steps)]


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------

def pretrain_flow_matching(model: WorldModel, dataset: list[SyntheticVideo],
                           steps: int, cfg: TrainerConfig,
                           rng: np.random.Generator) -> list[float]:
    """Teacher-forced flow-matching descent on short clips; returns the trace."""
    if steps < 1:
        raise TrainerError("steps must be >= 1")
    if not dataset:
        raise TrainerError("dataset is empty")
    _apply_lrs(model, cfg)
    fpb = model.config.frames_per_block
    window = cfg.engine.layout.local_window_frames
    prompt = _prompt(cfg, model)
    cam_one = _cam_tokens(model, cfg, 1)
    cam_block = _cam_tokens(model, cfg, fpb)
    tpf = model.config.tokens_per_frame
    losses = []
    for _ in range(steps):
        video = dataset[int(rng.integers(len(dataset)))]
        clip = min(cfg.pretrain_clip_frames, len(video.frames))
        if clip < fpb + 1:
            raise TrainerError("pretrain clip shorter than one block plus sink")
        j = int(rng.integers(1, clip - fpb + 1))
        block = video.frames[j:j + fpb]
        ctx_frames = list(range(max(1, j - window), j))
        entries = [[] for _ in range(model.config.layers)]
        sink_kvs = encode_frame(Tensor(video.frames[0]), prompt, cam_one, model)
        for layer, kv in enumerate(sink_kvs):
            entries[layer].append(kv)
        for f in ctx_frames:
            kvs = encode_frame(Tensor(video.frames[f]), prompt, cam_one, model)
            for layer, kv in enumerate(kvs):
                entries[layer].append(kv)
        from .autodiff import concat
        context = [(concat([kv[0] for kv in layer], axis=0),
                    concat([kv[1] for kv in layer], axis=0))
                   for layer in entries]
        t = sample_pretrain_t(rng, model.config.t_bins, min_t=min(cfg.timesteps))
        noise = draw_frames_noise(rng, model, fpb)
        cond = Conditioning(context=context, prompt_emb=prompt,
                            cam_tokens=cam_block,
                            context_frame_ids=[0] + ctx_frames, block_start=j)
        loss = flow_matching_loss(model, block, t, noise, cond)
        loss.backward()
        sgd_step(model, update_shared=True)
        losses.append(loss.item())
    return losses


# --------------------------------------------------------------------------
# evaluation helper for the long-horizon property
# --------------------------------------------------------------------------

def long_horizon_error(model: WorldModel, videos: list[SyntheticVideo],
                       rollout_frames: int, beyond_frame: int,
                       cfg: TrainerConfig, seed: int) -> float:
    """Mean per-frame MSE of rollouts against ground truth at far horizons.

    Only generated frames with index > ``beyond_frame`` count, so the score
    isolates behaviour past the pretraining clip length.
    """
    errs = []
    rng = np.random.default_rng(seed)
    for video in videos:
        v_pred = autoregressive_rollout(model, video.frames[0], rollout_frames,
                                        cfg, rng, keep_grad=False)
        for f in range(beyond_frame + 1, rollout_frames + 1):
            pred = v_pred[f].data
            errs.append(float(((pred - video.frames[f]) ** 2).mean()))
    return float(np.mean(errs))
