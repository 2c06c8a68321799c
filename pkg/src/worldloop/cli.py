"""Command-line entry points.

Subcommands: rollout, pretrain, distill, tune-long, eval (rpe | interbench),
and serve.  Training and rollout commands take a JSON config file; missing
keys fall back to the toy defaults below.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from .cache import CacheLayout
from .camera import CameraPose, trajectory_from_csv, trajectory_to_csv
from .checkpoint import load_model, save_blocks, save_model
from .dataset import make_dataset
from .distill import (TrainerConfig, init_score_pair, pretrain_flow_matching,
                      teacher_forced_distill_step, tuning_step)
from .engine import (EngineConfig, SamplerSchedule, event_from_dict,
                     run_session)
from .metrics import (aggregate, aligned_rpe, read_records_csv,
                      report_to_json)
from .model import ModelConfig, init_world_model
from .service import ServiceConfig, SessionService


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def build_model_config(cfg: dict) -> ModelConfig:
    m = cfg.get("model", {})
    if "token_grid" in m:
        m = dict(m, token_grid=tuple(m["token_grid"]))
    return ModelConfig(**m)


def build_engine_config(cfg: dict, layers: int) -> EngineConfig:
    e = cfg.get("engine", {})
    return EngineConfig(
        schedule=SamplerSchedule(tuple(e.get("schedule", (1.0, 0.93, 0.6, 0.3)))),
        layout=CacheLayout(e.get("sink_frames", 1),
                           e.get("local_window_frames", 6), layers),
        plucker_hw=tuple(e.get("plucker_hw", (8, 8))),
        vocab_seed=e.get("vocab_seed", 7))


def build_model(cfg: dict, checkpoint: str | None = None):
    if checkpoint:
        return load_model(checkpoint)
    mc = build_model_config(cfg)
    return init_world_model(mc, cfg.get("model_seed", 0),
                            boundary=cfg.get("boundary", 0.9),
                            high_lr=cfg.get("high_lr", 5e-4),
                            low_lr=cfg.get("low_lr", 1e-3))


def build_trainer_config(cfg: dict, engine: EngineConfig) -> TrainerConfig:
    t = cfg.get("train", {})
    return TrainerConfig(engine=engine,
                         window_frames=t.get("window_frames", 3),
                         max_frames=t.get("max_frames", 12),
                         p_teacher=t.get("p_teacher", 0.25),
                         high_lr=cfg.get("high_lr", 5e-4),
                         low_lr=cfg.get("low_lr", 1e-3),
                         pretrain_clip_frames=t.get("pretrain_clip_frames", 7),
                         base_prompt=t.get("base_prompt", "drifting pattern"))


def build_dataset(cfg: dict, model_cfg: ModelConfig):
    d = cfg.get("train", {}).get("dataset", {})
    return make_dataset(model_cfg, d.get("videos", 8), d.get("frames", 24),
                        d.get("seed", 3))


def _write_metrics_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "N", "i", "t", "forcing_mode"])
        for step, row in enumerate(rows):
            writer.writerow([step, row.get("loss", row.get("gen_loss", "")),
                             row.get("N", ""), row.get("i", ""),
                             row.get("t", ""), row.get("forcing_mode", "")])


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_rollout(args) -> int:
    cfg = load_config(args.config)
    model = build_model(cfg, cfg.get("rollout", {}).get("checkpoint"))
    engine = build_engine_config(cfg, model.config.layers)
    r = cfg.get("rollout", {})
    events = []
    if args.events:
        events = [event_from_dict(d)
                  for d in json.loads(Path(args.events).read_text())]
        events.sort(key=lambda e: e.at_block)
    frame_rng = np.random.default_rng(r.get("initial_frame_seed", 0))
    initial = frame_rng.standard_normal(
        (model.config.tokens_per_frame, model.config.channels),
        dtype=model.config.np_dtype)
    start = time.perf_counter()
    blocks, trajectory, turn_log = run_session(
        model, initial, CameraPose.identity(), r.get("prompt", "open world"),
        events, r.get("num_blocks", 4), r.get("seed", 7), engine)
    elapsed = time.perf_counter() - start
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_blocks(blocks, out / "blocks.bin")
    (out / "trajectory.csv").write_text(trajectory_to_csv(trajectory))
    frames = len(blocks) * model.config.frames_per_block
    (out / "session.json").write_text(json.dumps({
        "seed": r.get("seed", 7), "num_blocks": len(blocks),
        "turn_log": turn_log,
        "timing": {"seconds": elapsed, "frames": frames,
                   "fps": frames / elapsed if elapsed > 0 else 0.0},
    }, indent=2))
    print(f"wrote {len(blocks)} blocks to {out}")
    return 0


def _train_common(args):
    cfg = load_config(args.config)
    t = cfg.get("train", {})
    model = build_model(cfg, t.get("init_checkpoint"))
    engine = build_engine_config(cfg, model.config.layers)
    trainer = build_trainer_config(cfg, engine)
    ds = build_dataset(cfg, model.config)
    steps = t.get("steps", 200)
    rng = np.random.default_rng(t.get("seed", 1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, model, trainer, ds, steps, rng, out


def cmd_pretrain(args) -> int:
    _, model, trainer, ds, steps, rng, out = _train_common(args)
    losses = pretrain_flow_matching(model, ds, steps, trainer, rng)
    _write_metrics_csv(out / "metrics.csv",
                       [{"loss": v, "forcing_mode": "pretrain"} for v in losses])
    save_model(model, out / "pretrained.ckpt")
    print(f"pretrain: {steps} steps, loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return 0


def cmd_distill(args) -> int:
    _, model, trainer, ds, steps, rng, out = _train_common(args)
    pair = init_score_pair(model)
    rows = [teacher_forced_distill_step(model, pair, ds, trainer, rng)
            for _ in range(steps)]
    _write_metrics_csv(out / "metrics.csv", rows)
    save_model(model, out / "distilled.ckpt")
    print(f"distill: {steps} teacher-forced steps")
    return 0


def cmd_tune_long(args) -> int:
    _, model, trainer, ds, steps, rng, out = _train_common(args)
    pair = init_score_pair(model)
    rows = [tuning_step(model, pair, ds, trainer, rng) for _ in range(steps)]
    _write_metrics_csv(out / "metrics.csv", rows)
    save_model(model, out / "tuned.ckpt")
    n_teacher = sum(1 for r in rows if r["forcing_mode"] == "teacher")
    print(f"tune-long: {steps} steps ({n_teacher} teacher-forced)")
    return 0


def cmd_eval_rpe(args) -> int:
    est = trajectory_from_csv(Path(args.est).read_text())
    gt = trajectory_from_csv(Path(args.gt).read_text())
    res = aligned_rpe(est, gt, args.delta)
    payload = json.dumps({"trans_rmse": res.trans_rmse,
                          "rot_rmse": res.rot_rmse, "delta": args.delta,
                          "steps": len(res.trans_residuals)}, indent=2)
    if args.out:
        Path(args.out).write_text(payload)
    print(payload)
    return 0


def cmd_eval_interbench(args) -> int:
    records, categories, _ = read_records_csv(Path(args.records).read_text())
    reports, global_report = aggregate(records, categories)
    payload = report_to_json(reports, global_report)
    if args.out:
        Path(args.out).write_text(payload)
    print(payload)
    return 0


def cmd_serve(args) -> int:
    host, _, port = args.addr.rpartition(":")
    cfg = load_config(args.config)
    model = load_model(args.ckpt) if args.ckpt else build_model(cfg)
    engine = build_engine_config(cfg, model.config.layers)
    s = cfg.get("serve", {})
    service = SessionService(
        model,
        ServiceConfig(engine=engine,
                      base_prompt=s.get("base_prompt", "open world"),
                      initial_frame_seed=s.get("initial_frame_seed", 0),
                      max_blocks=s.get("max_blocks", 64),
                      dump_dir=s.get("dump_dir")),
        host=host or "127.0.0.1", port=int(port))
    service.start()
    print(f"serving on {service.address[0]}:{service.address[1]}", flush=True)
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        service.stop()
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="worldloop")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rollout", help="offline event-driven generation")
    p.add_argument("--config", default=None)
    p.add_argument("--events", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_rollout)

    for name, fn in (("pretrain", cmd_pretrain), ("distill", cmd_distill),
                     ("tune-long", cmd_tune_long)):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--out", required=True)
        p.set_defaults(fn=fn)

    p = sub.add_parser("eval")
    esub = p.add_subparsers(dest="metric", required=True)
    pr = esub.add_parser("rpe")
    pr.add_argument("--est", required=True)
    pr.add_argument("--gt", required=True)
    pr.add_argument("--delta", type=int, default=1)
    pr.add_argument("--out", default=None)
    pr.set_defaults(fn=cmd_eval_rpe)
    pi = esub.add_parser("interbench")
    pi.add_argument("--records", required=True)
    pi.add_argument("--out", default=None)
    pi.set_defaults(fn=cmd_eval_interbench)

    p = sub.add_parser("serve")
    p.add_argument("--addr", default="127.0.0.1:8765")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_serve)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
