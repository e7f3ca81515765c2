"""Command-line pipeline driver.

Every subcommand is a thin shell over one module operation chain: parse/lint
plans, interpolate them onto latent frames, rasterize region maps, build and
export attention masks, run retrieval, train motion or subject priors, and
sample the toy model.  Configuration comes from built-in defaults, then an
optional JSON config file, then flags (flags win); the resolved config is
logged on stderr and written next to the artifacts.

Exit codes: 0 success, 1 validation errors found, 2 I/O or contract errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import attention, dit, lora, planner, regions, retrieval, training
from .plan import (
    PlanError,
    RuleConfig,
    emit_frame_plan,
    emit_high_level_plan,
    frame_plan_to_json,
    interpolate_plan,
    latent_plan_from_json,
    latent_plan_to_json,
    parse_frame_plan,
    parse_high_level_plan,
    validate_frame_plan,
    validate_high_level_plan,
)

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_ERROR = 2

_MODE_FLAGS = {"sr3a": "sr3a", "hard": "hard_regional", "dense": "dense"}
_PLACEMENT_FLAGS = {"interleaved": "interleaved", "half": "half_half"}

DEFAULTS = {
    "grid": "12x4x4",
    "frames": 12,
    "mode": "sr3a",
    "placement": "interleaved",
    "beta": 1.0,
    "anchor_index": 0,
    "debias_enabled": True,
    "prompt_mode": "per-video",
    "seed": 0,
    "steps": 400,
    "learning_rate": 0.3,
    "lora_rank": 4,
    "timesteps": 100,
    "box_mode": "linear",
    "background_mode": "complement",
    "resample_noise": True,
    "model": {
        "d_model": 32,
        "n_blocks": 2,
        "n_heads": 4,
        "d_latent": 4,
        "ffn_mult": 2,
        "max_seg_len": 16,
        "hash_vocab": 4096,
    },
}


def _parse_grid(text: str) -> regions.LatentGrid:
    try:
        t, h, w = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise PlanError(f"grid must look like TxHxW, got {text!r}") from None
    return regions.LatentGrid(t, h, w)


def _resolve_config(args) -> dict:
    config = json.loads(json.dumps(DEFAULTS))  # deep copy
    if args.config:
        loaded = json.loads(Path(args.config).read_text())
        for key, value in loaded.items():
            if key == "model" and isinstance(value, dict):
                config["model"].update(value)
            else:
                config[key] = value
    overrides = {
        "grid": args.grid,
        "seed": args.seed,
        "mode": args.mode,
        "placement": args.placement,
        "beta": args.beta,
        "prompt_mode": args.prompt_mode,
        "frames": getattr(args, "frames", None),
        "steps": getattr(args, "steps", None),
        "learning_rate": getattr(args, "learning_rate", None),
    }
    for key, value in overrides.items():
        if value is not None:
            config[key] = value
    return config


def _log_config(config: dict, out_dir: Path | None) -> None:
    print("resolved config: " + json.dumps(config, sort_keys=True), file=sys.stderr)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.resolved.json").write_text(
            json.dumps(config, indent=2, sort_keys=True) + "\n")


def _model_from_config(config: dict) -> dit.ToyDiT:
    m = config["model"]
    return dit.ToyDiT(dit.ModelConfig(
        d_model=m["d_model"], n_blocks=m["n_blocks"], n_heads=m["n_heads"],
        grid=_parse_grid(config["grid"]), d_latent=m["d_latent"],
        ffn_mult=m["ffn_mult"], max_seg_len=m["max_seg_len"],
        hash_vocab=m["hash_vocab"], seed=config["seed"],
    ))


def _train_config(config: dict) -> training.TrainConfig:
    return training.TrainConfig(
        learning_rate=config["learning_rate"],
        steps=config["steps"],
        seed=config["seed"],
        prompt_mode=config["prompt_mode"].replace("-", "_"),
        debias=training.DebiasConfig(beta=config["beta"],
                                     anchor_index=config["anchor_index"],
                                     enabled=config["debias_enabled"]),
        lora_rank=config["lora_rank"],
        resample_noise=config["resample_noise"],
    )


def _print_findings(report) -> None:
    for finding in report.errors:
        frame = f" frame {finding.frame_index}" if finding.frame_index >= 0 else ""
        print(f"error [{finding.rule_id}]{frame} {finding.entity}: "
              f"{finding.message}", file=sys.stderr)
    for finding in report.warnings:
        frame = f" frame {finding.frame_index}" if finding.frame_index >= 0 else ""
        print(f"warning [{finding.rule_id}]{frame} {finding.entity}: "
              f"{finding.message}", file=sys.stderr)


def _load_latent_plan(args, config):
    if getattr(args, "latent", None):
        return latent_plan_from_json(Path(args.latent).read_text())
    plan = parse_frame_plan(Path(args.plan).read_text())
    return interpolate_plan(plan, config["frames"], box_mode=config["box_mode"])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_plan(args, config) -> int:
    if not args.topic:
        raise planner.MissingSlot("topic")
    out = Path(args.out)
    _log_config(config, out)
    if args.replay_dir:
        backend = planner.ReplayBackend(args.replay_dir)
    else:
        backend = planner.HttpBackend()
    request = planner.StoryRequest(topic=args.topic,
                                   max_retries=args.max_retries)
    story = planner.plan_story(backend, request)
    (out / "high_level.txt").write_text(emit_high_level_plan(story.high_level))
    findings = 0
    for i, result in enumerate(story.scene_plans, start=1):
        (out / f"scene_{i:02d}.txt").write_text(emit_frame_plan(result.plan))
        (out / f"scene_{i:02d}.json").write_text(frame_plan_to_json(result.plan))
        findings += len(result.report.errors)
        _print_findings(result.report)
    print(f"wrote {len(story.scene_plans)} scene plans to {out}")
    return EXIT_FINDINGS if findings else EXIT_OK


def cmd_lint(args, config) -> int:
    text = Path(args.plan).read_text()
    rules = RuleConfig(allowed_motions=tuple(args.motions.split(","))
                       if args.motions else None)
    if args.level == "story":
        report = validate_high_level_plan(parse_high_level_plan(text), rules)
    else:
        report = validate_frame_plan(parse_frame_plan(text), rules)
    _print_findings(report)
    print(f"{len(report.errors)} errors, {len(report.warnings)} warnings")
    return EXIT_OK if report.ok else EXIT_FINDINGS


def cmd_interp(args, config) -> int:
    plan = parse_frame_plan(Path(args.plan).read_text())
    latent = interpolate_plan(plan, config["frames"], box_mode=config["box_mode"])
    Path(args.out).write_text(latent_plan_to_json(latent))
    print(f"{latent.frame_count} latent frames, {latent.n_conditions} conditions "
          f"-> {args.out}")
    return EXIT_OK


def cmd_raster(args, config) -> int:
    out = Path(args.out)
    _log_config(config, out)
    latent = _load_latent_plan(args, config)
    grid = _parse_grid(config["grid"])
    rmap = regions.build_region_map(latent, grid,
                                    background_mode=config["background_mode"])
    (out / "region_map.json").write_text(regions.region_map_to_json(rmap))
    if args.pgm:
        for t in range(grid.t_lat):
            (out / f"regions_frame_{t:02d}.pgm").write_bytes(
                regions.region_frame_pgm(rmap, t))
    print(f"region map over {grid.tokens} tokens -> {out}")
    return EXIT_OK


def cmd_mask(args, config) -> int:
    out = Path(args.out)
    _log_config(config, out)
    latent = _load_latent_plan(args, config)
    grid = _parse_grid(config["grid"])
    rmap = regions.build_region_map(latent, grid,
                                    background_mode=config["background_mode"])
    model = _model_from_config(config)
    cond = model.prepare(latent, rmap, _MODE_FLAGS[config["mode"]])
    (out / "mask.bin").write_bytes(attention.export_mask(cond.mask, "bitset_binary"))
    print(f"{cond.mask.size}x{cond.mask.size} {cond.mask.mode} mask -> "
          f"{out / 'mask.bin'}")
    return EXIT_OK


def cmd_export_mask(args, config) -> int:
    mask = attention.import_mask(Path(args.mask).read_bytes())
    Path(args.out).write_bytes(attention.export_mask(mask, args.format))
    print(f"exported {args.format} -> {args.out}")
    return EXIT_OK


def cmd_retrieve(args, config) -> int:
    records = retrieval.load_records_jsonl(args.corpus)
    tracks = retrieval.load_tracks_jsonl(args.tracks) if args.tracks else {}
    result = retrieval.retrieve_motion(
        records, tracks, args.motion,
        retrieval.overlap_frame_scorer, retrieval.overlap_clip_scorer)
    Path(args.out).write_text(retrieval.scored_clips_to_json(result))
    print(f"{len(result)} clips -> {args.out}")
    return EXIT_OK


def _load_clips(manifest_path: str):
    base = Path(manifest_path).parent
    clips = []
    for line in Path(manifest_path).read_text().splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        latent_path = Path(doc["latent"])
        if not latent_path.is_absolute():
            latent_path = base / latent_path
        clips.append((np.load(latent_path), doc["caption"]))
    return clips


def cmd_train_motion(args, config) -> int:
    out = Path(args.out)
    _log_config(config, out)
    model = _model_from_config(config)
    placement = lora.plan_lora_placement(config["model"]["n_blocks"],
                                         _PLACEMENT_FLAGS[config["placement"]])
    result = training.train_motion_prior(
        _load_clips(args.clips), model, placement, _train_config(config),
        schedule=dit.NoiseSchedule(config["timesteps"]),
        log_path=out / "train_log.jsonl")
    lora.save_adapter_set(result.temporal, out / "adapters" / "temporal")
    for i, aset in enumerate(result.per_video):
        lora.save_adapter_set(aset, out / "adapters" / f"per_video_{i:02d}")
    first = result.log[0]["loss_motion"] if result.log else float("nan")
    last = result.log[-1]["loss_motion"] if result.log else float("nan")
    print(f"motion prior: loss {first:.4f} -> {last:.4f} over "
          f"{len(result.log)} steps; adapters in {out / 'adapters'}")
    return EXIT_OK


def cmd_train_subject(args, config) -> int:
    out = Path(args.out)
    _log_config(config, out)
    model = _model_from_config(config)
    placement = lora.plan_lora_placement(config["model"]["n_blocks"],
                                         _PLACEMENT_FLAGS[config["placement"]])
    cfg = _train_config(config)
    cfg.first_frame_only = True
    cfg.single_prompt = args.prompt
    result = training.train_subject_prior(
        np.load(args.reference), model, placement, cfg,
        schedule=dit.NoiseSchedule(config["timesteps"]),
        log_path=out / "train_log.jsonl")
    lora.save_adapter_set(result.adapters, out / "adapters" / "subject")
    print(f"subject prior trained for {len(result.log)} steps; adapters in "
          f"{out / 'adapters'}")
    return EXIT_OK


def cmd_generate(args, config) -> int:
    out = Path(args.out)
    _log_config(config, out)
    if args.checkpoint:
        model = dit.load_checkpoint(Path(args.checkpoint).read_bytes())
    else:
        model = _model_from_config(config)
    latent = _load_latent_plan(args, config)
    grid = model.config.grid
    rmap = regions.build_region_map(latent, grid,
                                    background_mode=config["background_mode"])
    adapters = None
    if args.adapters:
        adapters = lora.AdapterSet()
        for sub in sorted(Path(args.adapters).iterdir()):
            if (sub / "adapters.json").exists():
                adapters = adapters.extend(lora.load_adapter_set(sub))
    z0_hat = dit.sample(model, latent, rmap, dit.NoiseSchedule(config["timesteps"]),
                        seed=config["seed"], mask_mode=_MODE_FLAGS[config["mode"]],
                        adapters=adapters)
    np.save(out / "sample.npy", z0_hat)
    (out / "checkpoint.bin").write_bytes(dit.save_checkpoint(model))
    print(f"sampled latent {z0_hat.shape} -> {out / 'sample.npy'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="storyforge",
        description="plan, mask, train, and sample the toy story-to-video pipeline")
    parser.add_argument("--config", help="JSON config file; flags win over it")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--grid", help="latent grid as TxHxW, e.g. 12x4x4")
    parser.add_argument("--mode", choices=sorted(_MODE_FLAGS))
    parser.add_argument("--placement", choices=sorted(_PLACEMENT_FLAGS))
    parser.add_argument("--beta", type=float)
    parser.add_argument("--prompt-mode", choices=["per-video", "single"],
                        dest="prompt_mode")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="generate story plans via a text backend")
    p.add_argument("--topic")
    p.add_argument("--replay-dir", help="serve backend responses from a directory")
    p.add_argument("--max-retries", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("lint", help="validate a plan file")
    p.add_argument("--plan", required=True)
    p.add_argument("--level", choices=["frame", "story"], default="frame")
    p.add_argument("--motions", help="comma-separated motion vocabulary")
    p.set_defaults(func=cmd_lint)

    p = sub.add_parser("interp", help="interpolate key frames to latent frames")
    p.add_argument("--plan", required=True)
    p.add_argument("--frames", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_interp)

    p = sub.add_parser("raster", help="rasterize a latent plan onto the grid")
    p.add_argument("--plan")
    p.add_argument("--latent")
    p.add_argument("--pgm", action="store_true", help="also write per-frame PGMs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_raster)

    p = sub.add_parser("mask", help="build the routing attention mask")
    p.add_argument("--plan")
    p.add_argument("--latent")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("export-mask", help="convert a mask binary")
    p.add_argument("--mask", required=True)
    p.add_argument("--format", choices=["pgm", "bitset_binary"], default="pgm")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_mask)

    p = sub.add_parser("retrieve", help="retrieve motion clips from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--tracks")
    p.add_argument("--motion", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("train-motion", help="train motion-prior adapters")
    p.add_argument("--clips", required=True,
                   help="JSONL manifest of {latent: .npy, caption}")
    p.add_argument("--steps", type=int)
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_motion)

    p = sub.add_parser("train-subject", help="train subject-prior adapters")
    p.add_argument("--reference", required=True, help=".npy of one latent frame")
    p.add_argument("--prompt")
    p.add_argument("--steps", type=int)
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_subject)

    p = sub.add_parser("generate", help="sample the toy model for a plan")
    p.add_argument("--plan")
    p.add_argument("--latent")
    p.add_argument("--checkpoint")
    p.add_argument("--adapters", help="directory of saved adapter sets")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _resolve_config(args)
        return args.func(args, config)
    except (PlanError, planner.MissingSlot, planner.EmptySlot,
            planner.BackendError, planner.ExhaustedRetries,
            attention.LayoutMismatch, regions.GridMismatch,
            dit.ShapeMismatch, dit.MaskMismatch,
            training.EmptyTrainingSet, retrieval.EmptyCorpus,
            retrieval.EmptyMotion, OSError, KeyError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
