"""Toy causal flow-matching denoiser over latent frame blocks.

A small pre-LN transformer: camera tokens enter by addition, a timestep
table conditions on the noise level, self-attention is frame-causal over
(cached context + current block), and each layer cross-attends to a prompt
embedding.  Two parameter sets of identical shape ("high" and "low" noise
experts) are routed by the noise level against a configurable boundary.

The camera-token projection (6 -> channels) is shared across experts and
frozen outside pretraining, mirroring a camera encoder trained once and
reused by both experts.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor, concat, softmax

LN_EPS = 1e-5
MASK_NEG = -1e30

EXPERT_HIGH = "high"
EXPERT_LOW = "low"


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 2
    channels: int = 16
    tokens_per_frame: int = 16
    frames_per_block: int = 3
    token_grid: tuple[int, int] = (4, 4)
    ff_mult: int = 4
    t_bins: int = 16
    rel_buckets: int = 12  # frame-distance buckets; >= rel_buckets shares one
    vocab_size: int = 4096
    dtype: str = "float32"

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError("channels must divide evenly over heads")
        rows, cols = self.token_grid
        if rows * cols != self.tokens_per_frame:
            raise ValueError("token_grid must tile tokens_per_frame")

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)


@dataclass
class FrameBlock:
    """K latent frames, shaped (K, tokens, channels)."""

    frames: np.ndarray
    block_index: int = 0

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3:
            raise ValueError("frames must be (K, tokens, channels)")
        if not np.isfinite(self.frames).all():
            raise ValueError("frame latents must be finite")
        if self.block_index < 0:
            raise ValueError("block_index must be non-negative")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class ExpertConfig:
    """Dual noise-range experts with per-expert learning rates."""

    high_expert: dict[str, Tensor]
    low_expert: dict[str, Tensor]
    boundary: float = 0.9
    high_lr: float = 5e-4
    low_lr: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.boundary < 1.0:
            raise ValueError("boundary must lie strictly inside (0, 1)")

    def expert(self, name: str) -> dict[str, Tensor]:
        return self.high_expert if name == EXPERT_HIGH else self.low_expert


@dataclass
class WorldModel:
    config: ModelConfig
    experts: ExpertConfig
    cam_proj_w: Tensor = field(repr=False, default=None)
    cam_proj_b: Tensor = field(repr=False, default=None)
    opt_state: dict = field(default_factory=dict, repr=False)

    def parameters(self) -> list[tuple[str, Tensor]]:
        named = [("cam_proj.w", self.cam_proj_w), ("cam_proj.b", self.cam_proj_b)]
        for expert in (EXPERT_HIGH, EXPERT_LOW):
            for key, tensor in self.experts.expert(expert).items():
                named.append((f"{expert}.{key}", tensor))
        return named

    def num_parameters(self) -> int:
        return sum(t.data.size for _, t in self.parameters())


def route_expert(t: float, cfg: ExpertConfig) -> str:
    """Noise level to expert id; the boundary is inclusive on the high side."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"noise level {t} outside [0, 1]")
    return EXPERT_HIGH if t >= cfg.boundary else EXPERT_LOW


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------

def _init_expert(cfg: ModelConfig, rng: np.random.Generator,
                 zero_residual: bool = True) -> dict[str, Tensor]:
    c, f = cfg.channels, cfg.channels * cfg.ff_mult
    dt = cfg.np_dtype

    def w(*shape):
        scale = 1.0 / math.sqrt(shape[0])
        return Tensor((rng.standard_normal(shape) * scale).astype(dt),
                      requires_grad=True)

    def w_out(*shape):
        # zero-initialized residual-branch outputs start the stream clean
        t = w(*shape)
        if zero_residual:
            t.data = np.zeros_like(t.data)
        return t

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dt), requires_grad=True)

    params: dict[str, Tensor] = {
        "t_table": Tensor((rng.standard_normal((cfg.t_bins, c)) * 0.02).astype(dt),
                          requires_grad=True),
        # spatial position of each token within a frame
        "pos_table": Tensor(
            (rng.standard_normal((cfg.tokens_per_frame, c)) * 0.3).astype(dt),
            requires_grad=True),
    }
    for i in range(cfg.layers):
        p = f"l{i}."
        params[p + "ln1.g"] = ones(c)
        params[p + "ln1.b"] = zeros(c)
        params[p + "attn.wq"] = w(c, c)
        params[p + "attn.wk"] = w(c, c)
        params[p + "attn.wv"] = w(c, c)
        params[p + "attn.wo"] = w_out(c, c)
        params[p + "attn.rel_bias"] = zeros(cfg.heads, cfg.rel_buckets + 1)
        params[p + "ln2.g"] = ones(c)
        params[p + "ln2.b"] = zeros(c)
        params[p + "xattn.wq"] = w(c, c)
        params[p + "xattn.wk"] = w(c, c)
        params[p + "xattn.wv"] = w(c, c)
        params[p + "xattn.wo"] = w_out(c, c)
        params[p + "ln3.g"] = ones(c)
        params[p + "ln3.b"] = zeros(c)
        # per-noise-bin scale/shift on the FF branch (zero-init is neutral)
        params[p + "tmod.g"] = zeros(cfg.t_bins, c)
        params[p + "tmod.b"] = zeros(cfg.t_bins, c)
        params[p + "ff.w1"] = w(c, f)
        params[p + "ff.b1"] = zeros(f)
        params[p + "ff.w2"] = w_out(f, c)
        params[p + "ff.b2"] = zeros(c)
    params["ln_f.g"] = ones(c)
    params["ln_f.b"] = zeros(c)
    params["out.tg"] = zeros(cfg.t_bins, c)
    params["out.tb"] = zeros(cfg.t_bins, c)
    params["out.w"] = w(c, c)
    params["out.b"] = zeros(c)
    return params


def init_world_model(cfg: ModelConfig, seed: int, boundary: float = 0.9,
                     high_lr: float = 5e-4, low_lr: float = 1e-3,
                     zero_residual: bool = True) -> WorldModel:
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    cam_w = Tensor((rng.standard_normal((6, cfg.channels)) / math.sqrt(6.0)).astype(dt),
                   requires_grad=True)
    cam_b = Tensor(np.zeros(cfg.channels, dtype=dt), requires_grad=True)
    experts = ExpertConfig(high_expert=_init_expert(cfg, rng, zero_residual),
                           low_expert=_init_expert(cfg, rng, zero_residual),
                           boundary=boundary, high_lr=high_lr, low_lr=low_lr)
    return WorldModel(config=cfg, experts=experts, cam_proj_w=cam_w, cam_proj_b=cam_b)


def clone_model(model: WorldModel, trainable: bool = True) -> WorldModel:
    """Deep parameter copy with the same architecture."""

    def dup(t: Tensor) -> Tensor:
        return Tensor(t.data.copy(), requires_grad=trainable)

    experts = ExpertConfig(
        high_expert={k: dup(v) for k, v in model.experts.high_expert.items()},
        low_expert={k: dup(v) for k, v in model.experts.low_expert.items()},
        boundary=model.experts.boundary,
        high_lr=model.experts.high_lr, low_lr=model.experts.low_lr)
    return WorldModel(config=model.config, experts=experts,
                      cam_proj_w=dup(model.cam_proj_w),
                      cam_proj_b=dup(model.cam_proj_b))


# --------------------------------------------------------------------------
# prompt encoding
# --------------------------------------------------------------------------

def _token_row(token: str, vocab_size: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab_size


def encode_prompt(text: str, vocab_seed: int, channels: int = 16,
                  vocab_size: int = 4096, dtype: str = "float32") -> np.ndarray:
    """Deterministic (tokens, channels) embedding from a seeded hash table."""
    tokens = text.split()
    if not tokens:
        raise ValueError("prompt text is empty")
    table = np.random.default_rng(vocab_seed).standard_normal((vocab_size, channels))
    rows = [_token_row(tok, vocab_size) for tok in tokens]
    return table[rows].astype(np.dtype(dtype))


# --------------------------------------------------------------------------
# forward pass
# --------------------------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / ((var + LN_EPS) ** 0.5) * gain + bias


def gelu(x: Tensor) -> Tensor:
    inner = 0.7978845608028654 * (x + 0.044715 * (x ** 3))
    return 0.5 * x * (1.0 + inner.tanh())


def frame_causal_mask(frame_tokens: list[int], ctx_tokens: int,
                      dtype: np.dtype) -> np.ndarray:
    """Additive mask (S, ctx + S): context fully visible, block frame-causal."""
    s = sum(frame_tokens)
    mask = np.full((s, ctx_tokens + s), MASK_NEG, dtype=dtype)
    mask[:, :ctx_tokens] = 0.0
    row = 0
    for i, n in enumerate(frame_tokens):
        visible = sum(frame_tokens[:i + 1])
        mask[row:row + n, ctx_tokens:ctx_tokens + visible] = 0.0
        row += n
    return mask


def rel_bucket_matrix(query_frame_ids, key_frame_ids, tokens_per_frame: int,
                      rel_buckets: int) -> np.ndarray:
    """Token-level frame-distance buckets; distances >= rel_buckets share one.

    Attention reads a learned bias per (head, bucket), so cached keys stay
    pure content and temporal geometry is applied at use time.
    """
    q = np.asarray(query_frame_ids, dtype=np.int64)[:, None]
    k = np.asarray(key_frame_ids, dtype=np.int64)[None, :]
    buckets = np.clip(q - k, 0, rel_buckets)
    return np.repeat(np.repeat(buckets, tokens_per_frame, axis=0),
                     tokens_per_frame, axis=1)


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int,
            add_mask: np.ndarray | None, capture: list | None,
            rel_bias: Tensor | None = None) -> Tensor:
    sq, c = q.shape
    sk = k.shape[0]
    dh = c // heads
    qh = q.reshape(sq, heads, dh).swapaxes(0, 1)
    kh = k.reshape(sk, heads, dh).swapaxes(0, 1)
    vh = v.reshape(sk, heads, dh).swapaxes(0, 1)
    scores = (qh @ kh.swapaxes(1, 2)) * (1.0 / math.sqrt(dh))
    if rel_bias is not None:
        scores = scores + rel_bias
    if add_mask is not None:
        scores = scores + Tensor(add_mask)
    probs = softmax(scores, axis=-1)
    if capture is not None:
        capture.append(probs.data)
    out = probs @ vh
    return out.swapaxes(0, 1).reshape(sq, c)


def _t_bin(t: float, cfg: ModelConfig) -> int:
    return int(round(t * (cfg.t_bins - 1)))


def _tile_positions(params: dict[str, Tensor], frames: int) -> Tensor:
    pos = params["pos_table"]
    if frames == 1:
        return pos
    return concat([pos] * frames, axis=0)


def _t_embedding(t: float, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    return params["t_table"][_t_bin(t, cfg)]


def _forward(x: Tensor, frame_tokens: list[int], context_kv, prompt_emb,
             params: dict[str, Tensor], cfg: ModelConfig, t_idx: int = 0,
             context_frame_ids=None, block_start: int = 0,
             capture_kv: list | None = None, capture_attn: list | None = None,
             apply_head: bool = True) -> Tensor:
    prompt = as_tensor(prompt_emb)
    query_ids = [block_start + j for j in range(len(frame_tokens))]
    ctx_ids = list(context_frame_ids) if context_frame_ids is not None else []
    buckets = rel_bucket_matrix(query_ids, ctx_ids + query_ids,
                                cfg.tokens_per_frame, cfg.rel_buckets)
    for i in range(cfg.layers):
        p = f"l{i}."
        h = layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = h @ params[p + "attn.wq"]
        k_cur = h @ params[p + "attn.wk"]
        v_cur = h @ params[p + "attn.wv"]
        if capture_kv is not None:
            capture_kv.append((k_cur, v_cur))
        if context_kv is not None and context_kv[i] is not None:
            ctx_k, ctx_v = context_kv[i]
            k = concat([as_tensor(ctx_k), k_cur], axis=0)
            v = concat([as_tensor(ctx_v), v_cur], axis=0)
            n_ctx = k.shape[0] - k_cur.shape[0]
        else:
            k, v, n_ctx = k_cur, v_cur, 0
        if n_ctx != len(ctx_ids) * cfg.tokens_per_frame:
            raise ValueError("context frame ids do not cover the context keys")
        mask = frame_causal_mask(frame_tokens, n_ctx, x.data.dtype)
        bias = params[p + "attn.rel_bias"][:, buckets]
        x = x + _attend(q, k, v, cfg.heads, mask, capture_attn,
                        rel_bias=bias) @ params[p + "attn.wo"]

        h = layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        xq = h @ params[p + "xattn.wq"]
        xk = prompt @ params[p + "xattn.wk"]
        xv = prompt @ params[p + "xattn.wv"]
        x = x + _attend(xq, xk, xv, cfg.heads, None, capture_attn) @ params[p + "xattn.wo"]

        h = layer_norm(x, params[p + "ln3.g"], params[p + "ln3.b"])
        h = h * (1.0 + params[p + "tmod.g"][t_idx]) + params[p + "tmod.b"][t_idx]
        x = x + gelu(h @ params[p + "ff.w1"] + params[p + "ff.b1"]) \
            @ params[p + "ff.w2"] + params[p + "ff.b2"]
    if apply_head:
        y = layer_norm(x, params["ln_f.g"], params["ln_f.b"])
        y = y * (1.0 + params["out.tg"][t_idx]) + params["out.tb"][t_idx]
        x = y @ params["out.w"] + params["out.b"]
    return x


def _as_block_tensor(block, cfg: ModelConfig) -> tuple[Tensor, int]:
    if isinstance(block, FrameBlock):
        block = block.frames
    if isinstance(block, Tensor):
        frames = block.shape[0]
        return block.reshape(frames * cfg.tokens_per_frame, cfg.channels), frames
    arr = np.asarray(block)
    if not np.isfinite(arr).all():
        raise ValueError("block latents must be finite")
    frames = arr.shape[0]
    return Tensor(arr.reshape(frames * cfg.tokens_per_frame, cfg.channels)), frames


def denoise(noisy, t: float, context, prompt_emb, cam_tokens, model: WorldModel,
            context_frame_ids=None, block_start: int | None = None,
            capture_attn: list | None = None) -> Tensor:
    """Predict the velocity field for a noisy block at noise level ``t``.

    ``context`` is a per-layer list of (keys, values) over cached frames or
    None; ``context_frame_ids`` gives their absolute frame indices and
    ``block_start`` the absolute index of the block's first frame (attention
    reads a learned bias over the frame distances).  When omitted, context
    frames are assumed consecutive right before the block.  ``cam_tokens``
    is the additive camera conditioning with one row per block token, or
    None for no camera signal.  Output shape matches the input block.
    """
    cfg = model.config
    expert = model.experts.expert(route_expert(t, model.experts))
    x, frames = _as_block_tensor(noisy, cfg)
    if cam_tokens is not None:
        cam = as_tensor(cam_tokens)
        if cam.shape != x.shape:
            raise ValueError(f"camera tokens {cam.shape} do not match block {x.shape}")
        x = x + cam
    x = x + _t_embedding(t, expert, cfg)
    x = x + _tile_positions(expert, frames)
    if context is not None and context_frame_ids is None:
        n_ctx_frames = np.asarray(context[0][0].data if isinstance(
            context[0][0], Tensor) else context[0][0]).shape[0] \
            // cfg.tokens_per_frame
        context_frame_ids = list(range(n_ctx_frames))
        if block_start is None:
            block_start = n_ctx_frames
    if block_start is None:
        block_start = 0
    out = _forward(x, [cfg.tokens_per_frame] * frames, context, prompt_emb,
                   expert, cfg, t_idx=_t_bin(t, cfg),
                   context_frame_ids=context_frame_ids,
                   block_start=block_start, capture_attn=capture_attn)
    return out.reshape(frames, cfg.tokens_per_frame, cfg.channels)


def encode_frame(latents, prompt_emb, cam_token, model: WorldModel):
    """Per-layer (key, value) projections of one clean frame.

    The encoding runs at noise level 0 with no history, so a cached entry is
    a pure function of (frame latents, camera token, prompt, parameters) and
    can be recomputed exactly from stored clean latents.
    """
    cfg = model.config
    expert = model.experts.expert(route_expert(0.0, model.experts))
    x = as_tensor(latents).reshape(cfg.tokens_per_frame, cfg.channels)
    if cam_token is not None:
        x = x + as_tensor(cam_token)
    x = x + _t_embedding(0.0, expert, cfg)
    x = x + _tile_positions(expert, 1)
    captured: list[tuple[Tensor, Tensor]] = []
    _forward(x, [cfg.tokens_per_frame], None, prompt_emb, expert, cfg,
             t_idx=_t_bin(0.0, cfg), capture_kv=captured, apply_head=False)
    return captured


def prompt_cross_kv(prompt_emb, model: WorldModel) -> dict[str, list]:
    """Per-expert, per-layer cross-attention K/V derived from the prompt."""
    out: dict[str, list] = {}
    prompt = np.asarray(prompt_emb)
    for name in (EXPERT_HIGH, EXPERT_LOW):
        params = model.experts.expert(name)
        layers = []
        for i in range(model.config.layers):
            k = prompt @ params[f"l{i}.xattn.wk"].data
            v = prompt @ params[f"l{i}.xattn.wv"].data
            layers.append((k, v))
        out[name] = layers
    return out


def camera_tokens_for_frames(pooled_rays: np.ndarray, model: WorldModel) -> Tensor:
    """Project pooled 6-channel ray vectors to additive camera tokens.

    Kept on the autodiff tape so pretraining can move the shared projection;
    the optimizer freezes it elsewhere.
    """
    return as_tensor(pooled_rays) @ model.cam_proj_w + model.cam_proj_b


# --------------------------------------------------------------------------
# flow matching
# --------------------------------------------------------------------------

@dataclass
class Conditioning:
    """Bundle of everything a denoise call needs besides the block itself."""

    context: list | None = None
    prompt_emb: np.ndarray | None = None
    cam_tokens: np.ndarray | None = None
    context_frame_ids: list | None = None
    block_start: int | None = None


def flow_matching_loss(model: WorldModel, clean, t: float, noise,
                       cond: Conditioning) -> Tensor:
    """MSE between the predicted velocity and noise - clean on the linear path."""
    if not 0.0 < t < 1.0:
        raise ValueError("flow-matching t must lie strictly inside (0, 1)")
    clean_arr = np.asarray(clean.frames if isinstance(clean, FrameBlock) else clean)
    noise_arr = np.asarray(noise.frames if isinstance(noise, FrameBlock) else noise)
    if clean_arr.shape != noise_arr.shape:
        raise ValueError("clean and noise shapes disagree")
    x_t = (1.0 - t) * clean_arr + t * noise_arr
    target = noise_arr - clean_arr
    pred = denoise(x_t, t, cond.context, cond.prompt_emb, cond.cam_tokens,
                   model, context_frame_ids=cond.context_frame_ids,
                   block_start=cond.block_start)
    err = pred - Tensor(target)
    return (err * err).mean()


# --------------------------------------------------------------------------
# optimizer step
# --------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def _adam_update(state: dict, name: str, tensor: Tensor, lr: float) -> None:
    g = tensor.grad.astype(tensor.data.dtype, copy=False)
    slot = state.setdefault(name, {
        "m": np.zeros_like(tensor.data), "v": np.zeros_like(tensor.data),
        "step": 0})
    slot["step"] += 1
    slot["m"] = ADAM_BETA1 * slot["m"] + (1 - ADAM_BETA1) * g
    slot["v"] = ADAM_BETA2 * slot["v"] + (1 - ADAM_BETA2) * g * g
    m_hat = slot["m"] / (1 - ADAM_BETA1 ** slot["step"])
    v_hat = slot["v"] / (1 - ADAM_BETA2 ** slot["step"])
    tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    tensor.grad = None


def sgd_step(model: WorldModel, update_shared: bool = False,
             shared_lr: float | None = None) -> None:
    """Adam update with per-expert learning rates; clears consumed grads.

    Moment buffers live on the model and advance per tensor only when that
    tensor received a gradient, so an expert untouched by a step stays put.
    The shared camera projection only moves when ``update_shared`` is set
    (pretraining); distillation and tuning keep it frozen.
    """
    ex = model.experts
    state = model.opt_state
    for name, lr in ((EXPERT_HIGH, ex.high_lr), (EXPERT_LOW, ex.low_lr)):
        for key, t in ex.expert(name).items():
            if t.grad is not None:
                _adam_update(state, f"{name}.{key}", t, lr)
    for key, t in (("cam_proj.w", model.cam_proj_w),
                   ("cam_proj.b", model.cam_proj_b)):
        if t.grad is not None:
            if update_shared:
                lr = shared_lr if shared_lr is not None else ex.low_lr
                _adam_update(state, key, t, lr)
            t.grad = None


def zero_model_grads(model: WorldModel) -> None:
    for _, t in model.parameters():
        t.grad = None
