"""Desk-scale interactive autoregressive world-model runtime and training lab."""

from .autodiff import Tensor, no_grad
from .cache import (CacheLayout, KvCacheState, KvEntry, append_frame,
                    attention_context, build_block_sparse_mask, init_cache,
                    recache)
from .camera import (ActionSegment, CameraPose, Intrinsics, PluckerMap,
                     Trajectory, action_to_trajectory, parse_action_script,
                     plucker_to_tokens, pose_to_plucker)
from .checkpoint import load_model, save_model
from .dataset import SyntheticVideo, make_dataset, make_video
from .distill import (ScorePair, TrainerConfig, autoregressive_rollout,
                      dmd_gradient, init_score_pair, make_conditions,
                      pretrain_flow_matching, sample_rollout_length,
                      sample_window, tune_long, tuning_step)
from .engine import (EngineConfig, SamplerSchedule, Session, TurnEvent,
                     init_session, rollout_block, run_session, switch_action,
                     switch_prompt)
from .metrics import (CategoryReport, InterBenchRecord, RpeResult, Sim3,
                      aggregate, aligned_rpe, dynamic_average,
                      interbench_overall, rpe, umeyama_align)
from .model import (Conditioning, ExpertConfig, FrameBlock, ModelConfig,
                    WorldModel, denoise, encode_frame, encode_prompt,
                    flow_matching_loss, init_world_model, route_expert)
from .service import ServiceConfig, SessionService, read_frame, serve, write_frame

__version__ = "0.1.0"
