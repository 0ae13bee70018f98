"""Command-line entry point: gen-data, train, eval, rollout.

Exit codes: 0 success, 2 usage/config error, 3 runtime failure. Commands are
deterministic given --seed (or the FUTURIST_SEED environment fallback) and
the config file.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from .evaluation import (
    CopyLastPredictor,
    MetricReport,
    ModelPredictor,
    colorize,
    depth_palette,
    manifest_eval_items,
    save_indexed_png,
    save_rgb_png,
    seg_palette,
)
from .model import ConfigError
from .rollout import rollout
from .training import load_checkpoint, restore_model, train
from .types import (
    DEFAULT_STRIDE,
    Horizon,
    ModelConfig,
    apply_overrides,
    load_config,
    parse_flat_text,
    validate_config,
)

SEED_ENV = "FUTURIST_SEED"


class UsageError(Exception):
    pass


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


@dataclass
class GenSpec:
    """Scene-generation parameters for gen-data (flat key = value file)."""

    height: int = 64
    width: int = 128
    min_shapes: int = 2
    max_shapes: int = 4
    num_labels: int = 19
    num_depth_bins: int = 256
    city: str = "synth"
    target_frame: int = 20

    @classmethod
    def from_file(cls, path) -> "GenSpec":
        kv = parse_flat_text(Path(path).read_text(encoding="utf-8"))
        spec = cls()
        for key, value in kv.items():
            if not hasattr(spec, key):
                raise UsageError(f"unknown gen-data spec key '{key}'")
            current = getattr(spec, key)
            setattr(spec, key, type(current)(value))
        return spec


def cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    spec = GenSpec.from_file(args.spec) if args.spec else GenSpec()
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.touch()
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory is not writable: {exc}") from exc
    rng = np.random.default_rng(seed)
    scenes = []
    for _ in range(args.num_sequences):
        n_shapes = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
        scenes.append(D.make_random_scene(
            rng, height=spec.height, width=spec.width, num_shapes=n_shapes,
            num_labels=spec.num_labels, num_depth_bins=spec.num_depth_bins,
        ))
    manifest = D.write_synthetic_dataset(
        out, scenes, num_frames=args.frames, city=spec.city,
        target_frame=spec.target_frame,
    )
    print(f"wrote {len(scenes)} sequences x {args.frames} frames to {out} "
          f"(manifest: {manifest})")
    return 0


def _load_training_config(args) -> ModelConfig:
    cfg = load_config(args.config)
    overrides = dict(kv.split("=", 1) for kv in args.set or [])
    env = _env_seed()
    if env is not None and "seed" not in overrides:
        overrides["seed"] = str(env)
    if overrides:
        cfg = apply_overrides(cfg, {k.strip(): v.strip() for k, v in overrides.items()})
    violations = validate_config(cfg)
    if violations:
        raise ConfigError(violations)
    return cfg


def _load_records(root, entries, layout, modalities, workers: int):
    unique = sorted({(city, seq) for city, seq, _ in entries})

    def load_one(pair):
        city, seq = pair
        frames = D.discover_frames(root, city, seq, modalities[0].name)
        if not frames:
            raise FileNotFoundError(f"no frames found for sequence {city}_{seq} in {root}")
        return D.load_full_sequence(root, city, seq, len(frames), layout, modalities)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(load_one, unique))
    return [load_one(pair) for pair in unique]


def cmd_train(args) -> int:
    cfg = _load_training_config(args)
    manifest = Path(args.manifest) if args.manifest else Path(args.data) / "manifest.txt"
    entries = D.read_manifest(manifest)
    if not entries:
        raise UsageError(f"manifest {manifest} lists no sequences")
    records = _load_records(args.data, entries, cfg.layout, cfg.modalities, args.workers)

    out = Path(args.out)
    loss_path = out.with_suffix(".loss.csv")
    loss_path.parent.mkdir(parents=True, exist_ok=True)
    with open(loss_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        names = [m.name for m in cfg.modalities]
        writer.writerow(["step", "loss_total", *[f"loss_{n}" for n in names], "lr"])

        def log(step, breakdown, lr):
            writer.writerow([step, f"{breakdown.total:.6f}",
                             *[f"{breakdown.per_modality[n]:.6f}" for n in names],
                             f"{lr:.8f}"])

        ckpt = train(cfg, records, callbacks=[log], checkpoint_path=out,
                     resume=args.resume)
    print(f"trained {ckpt.step} steps ({ckpt.epoch} epochs); checkpoint: {out}; "
          f"loss log: {loss_path}")
    return 0


def _resolve_eval_config(args) -> tuple[ModelConfig, object | None]:
    model = None
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        model = restore_model(ckpt)
        cfg = ckpt.config
    elif args.config:
        cfg = load_config(args.config)
    else:
        raise UsageError("eval needs --checkpoint, or --config with --baseline copy-last")
    violations = validate_config(cfg)
    if violations:
        raise ConfigError(violations)
    if cfg.layout.future_frames != 1:
        raise UsageError("the rollout protocol requires layout.future_frames = 1")
    return cfg, model


def cmd_eval(args) -> int:
    cfg, model = _resolve_eval_config(args)
    if model is None and args.baseline is None:
        raise UsageError("nothing to evaluate: no checkpoint and no --baseline")
    horizon = Horizon[args.horizon.upper()]
    manifest = Path(args.manifest) if args.manifest else Path(args.data) / "manifest.txt"
    entries = D.read_manifest(manifest)
    items = manifest_eval_items(args.data, entries, cfg.layout, horizon, cfg.modalities)

    from .evaluation import evaluate
    rows = []
    if model is not None:
        rows.append(evaluate(ModelPredictor(model), items, horizon, cfg.modalities,
                             absrel_denominator=cfg.absrel_denominator))
    if args.baseline == "copy-last":
        rows.append(evaluate(CopyLastPredictor(), items, horizon, cfg.modalities,
                             absrel_denominator=cfg.absrel_denominator))
    report = MetricReport(rows)
    sys.stdout.write(report.to_text())
    if args.report:
        csv_path, txt_path = report.save(args.report)
        print(f"report written to {csv_path} and {txt_path}")
    return 0


def cmd_rollout(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = restore_model(ckpt)
    cfg = ckpt.config
    if cfg.layout.future_frames != 1:
        raise UsageError("rollout requires layout.future_frames = 1")
    if "_" not in args.sequence:
        raise UsageError("--sequence must look like '<city>_<sequence_id>'")
    city, seq_id = args.sequence.split("_", 1)
    manifest = Path(args.manifest) if args.manifest else Path(args.data) / "manifest.txt"
    entries = {(c, s): t for c, s, t in D.read_manifest(manifest)}
    if (city, seq_id) not in entries:
        raise UsageError(f"unknown sequence id '{args.sequence}' (not in {manifest})")
    target = args.target_frame if args.target_frame is not None else entries[(city, seq_id)]

    context = D.load_sequence(args.data, city, seq_id, target, Horizon.SHORT,
                              cfg.layout, cfg.modalities)
    predictions = rollout(context, args.steps, model)

    out = Path(args.emit_frames)
    out.mkdir(parents=True, exist_ok=True)
    palettes = {}
    for spec in cfg.modalities:
        if spec.name == D.DEPTH:
            palettes[spec.name] = ("depth", depth_palette(spec.num_labels))
        else:
            palettes[spec.name] = ("seg", seg_palette(spec.num_labels))
    count = 0
    for k, pred in enumerate(predictions, start=1):
        offset = k * DEFAULT_STRIDE
        for name, arr in pred.items():
            kind, palette = palettes[name]
            path = out / f"{city}_{seq_id}_t+{offset:02d}_{name}.png"
            if kind == "seg" and len(palette) <= 256:
                save_indexed_png(path, arr, palette)
            else:
                save_rgb_png(path, colorize(arr, palette))
            count += 1
            if args.emit_raw:
                D.save_label_map(out / f"{city}_{seq_id}_t+{offset:02d}_{name}_raw.png", arr)
                count += 1
    print(f"emitted {count} frames to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semforecast",
        description="Multimodal semantic future prediction: data, training, "
                    "evaluation, rollout.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic moving-shapes dataset")
    p.add_argument("--spec", help="scene-generation spec file (key = value)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--num-sequences", type=int, required=True)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config", required=True, help="model config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--manifest", help="manifest path (default: <data>/manifest.txt)")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--workers", type=int, default=1, help="data-loading threads")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and/or the copy-last baseline")
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--config", help="config file (baseline-only mode)")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", help="manifest path (default: <data>/manifest.txt)")
    p.add_argument("--horizon", choices=["short", "mid"], required=True)
    p.add_argument("--baseline", choices=["copy-last"], default=None)
    p.add_argument("--report", help="report output prefix (.csv and .txt)")
    p.add_argument("--workers", type=int, default=1, help="data-loading threads")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rollout", help="emit colorized autoregressive predictions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", help="manifest path (default: <data>/manifest.txt)")
    p.add_argument("--sequence", required=True, help="<city>_<sequence_id>")
    p.add_argument("--steps", type=int, default=16)
    p.add_argument("--target-frame", type=int, default=None,
                   help="first predicted source frame (default: manifest target)")
    p.add_argument("--emit-frames", required=True, help="output directory")
    p.add_argument("--emit-raw", action="store_true",
                   help="also write grayscale label-id sidecar PNGs")
    p.set_defaults(func=cmd_rollout)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
