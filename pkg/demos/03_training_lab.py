"""The three training stages at a small budget.

Pretrains the flow-matching denoiser on drifting patterns, runs a few
teacher-forced distillation steps, then the randomized long-video tuning
loop, and compares long-horizon rollout error before and after tuning.
Expect a couple of minutes of CPU time.
"""
import numpy as np

from worldloop.dataset import make_dataset
from worldloop.distill import (TrainerConfig, init_score_pair,
                               long_horizon_error, pretrain_flow_matching,
                               teacher_forced_distill_step, tune_long)
from worldloop.engine import EngineConfig
from worldloop.model import ModelConfig, clone_model, init_world_model

cfg = ModelConfig(dtype="float64")
engine = EngineConfig(plucker_hw=(4, 4))
pre = TrainerConfig(engine=engine, high_lr=1e-2, low_lr=1e-2)
dataset = make_dataset(cfg, num_videos=64, num_frames=24, seed=10)
holdout = make_dataset(cfg, num_videos=3, num_frames=24, seed=99)

model = init_world_model(cfg, seed=0)
losses = pretrain_flow_matching(model, dataset, 3000, pre,
                                np.random.default_rng(1))
print(f"pretrain: loss {np.mean(losses[:50]):.3f} -> {np.mean(losses[-50:]):.3f}")

pair = init_score_pair(model)
tune = TrainerConfig(engine=engine, p_teacher=0.25, high_lr=1.5e-4, low_lr=3e-4)
rng = np.random.default_rng(2)
for _ in range(5):
    m = teacher_forced_distill_step(model, pair, dataset, tune, rng)
print(f"distill sample step: N={m['N']} i={m['i']} t={m['t']:.3f} "
      f"fake_loss={m['fake_loss']:.3f}")

untuned = clone_model(model)
trace = tune_long(model, pair, dataset, tune, steps=200, seed=3)
modes = [t["forcing_mode"] for t in trace]
print(f"tune-long: 200 steps, {modes.count('teacher')} teacher-forced")

before = long_horizon_error(untuned, holdout, 18, 14, tune, seed=0)
after = long_horizon_error(model, holdout, 18, 14, tune, seed=0)
print(f"long-horizon error (frames 15-18): untuned {before:.4f} "
      f"tuned {after:.4f} ({'improved' if after < before else 'regressed'})")
