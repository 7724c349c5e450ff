"""Command-line entry point: ``stackseg {train,infer,eval,ablate,synth} --config PATH``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .ablation import format_table, run_ablation, split_holdout
from .checkpoint import load_model_state, load_training_state, read_checkpoint, save_training_state
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, StackSegError
from .model import ModelConfig, SegmentationModel
from .pipeline import evaluate_masks, file_sha256, save_masks, segment_volume
from .train import Trainer
from .volume import VolumeStack, load_stack, make_synthetic_volume, save_stack

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("stackseg")


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--profile", choices=["toy", "full"])
    common.add_argument("--out", help="output directory (default: io.output_dir)")
    common.add_argument("--threads", type=int, help="BLAS thread count")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config field, e.g. --set train.lr=1e-3 (value parsed as JSON)")

    parser = _ArgumentParser(prog="stackseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    p = sub.add_parser("train", parents=[common], help="train on labelled stacks")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")

    for name, text in (("infer", "segment stacks with a trained checkpoint"),
                       ("eval", "score predictions against labels")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint")
        p.add_argument("--stack", action="append", help="stack path (repeatable); default io.eval_stacks")
        p.add_argument("--window", type=int)
        p.add_argument("--overlap", type=int)
        p.add_argument("--threshold", type=float)
        if name == "eval":
            p.add_argument("--predictions", help="directory of predicted PNG masks; skips inference")

    p = sub.add_parser("ablate", parents=[common], help="train/evaluate all 8 component combinations")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic labelled stack")
    p.add_argument("--kind", choices=["drifting-blob", "branching"])
    return parser


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise ConfigError(f"--set {dotted}: {k!r} is not a section")
    d[keys[-1]] = value


def resolve_config(args) -> RunConfig:
    data = load_config(args.config).to_dict()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(data, key, value)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.profile is not None:
        data["profile"] = args.profile
    if args.threads is not None:
        data["threads"] = args.threads
    if args.out is not None:
        data["io"]["output_dir"] = args.out
    cmd = args.command
    if cmd in ("train", "ablate") and args.steps is not None:
        data["train" if cmd == "train" else "ablate"]["steps"] = args.steps
    if cmd == "train" and args.resume:
        data["io"]["checkpoint"], data["io"]["resume"] = args.resume, True
    if cmd in ("infer", "eval"):
        if args.checkpoint:
            data["io"]["checkpoint"] = args.checkpoint
        if args.stack:
            data["io"]["eval_stacks"] = args.stack
        for key in ("window", "overlap", "threshold"):
            if getattr(args, key) is not None:
                data["infer"][key] = getattr(args, key)
    if cmd == "synth" and args.kind:
        data["synth"]["kind"] = args.kind
    return RunConfig.from_dict(data)


def _setup_logging(out_dir: Path, command: str) -> None:
    log.handlers.clear()
    log.setLevel(logging.INFO)
    log.propagate = False
    fmt = logging.Formatter("%(message)s")
    for handler in (logging.StreamHandler(sys.stdout), logging.FileHandler(out_dir / f"{command}.log", mode="w")):
        handler.setFormatter(fmt)
        log.addHandler(handler)


def _load_stacks(paths, fmt, need_labels: bool) -> list[VolumeStack]:
    if not paths:
        raise ConfigError("no stacks configured (io.train_stacks / io.eval_stacks are empty)")
    stacks = [load_stack(p, fmt) for p in paths]
    if need_labels:
        for p, s in zip(paths, stacks):
            if s.labels is None:
                raise ConfigError(f"stack {p} has no labels; this command needs labelled data")
    return stacks


def _write_manifest(out_dir: Path, cfg: RunConfig, command: str, checkpoint=None, **extra) -> None:
    manifest = {"command": command, "seed": cfg.seed, "threads": cfg.threads, "config": cfg.to_dict(),
                "checkpoint": str(checkpoint) if checkpoint else None,
                "checkpoint_sha256": file_sha256(checkpoint) if checkpoint else None}
    manifest.update(extra)
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _metrics_csv(rows) -> str:
    lines = ["dataset,class,dice,miou"]
    lines += [f"{name},foreground,{100 * m['dice']:.2f},{100 * m['miou']:.2f}" for name, m in rows]
    return "\n".join(lines) + "\n"


def cmd_train(cfg: RunConfig, out_dir: Path) -> int:
    stacks = _load_stacks(cfg.io.train_stacks, cfg.io.format, need_labels=True)
    splits = [split_holdout(s) for s in stacks]
    model = SegmentationModel(cfg.model_config())
    trainer = Trainer(model, [tr for tr, _ in splits], cfg.train_config())
    ckpt_path = out_dir / "checkpoint.ckpt"
    if cfg.io.resume:
        src = Path(cfg.io.checkpoint or ckpt_path)
        if not src.is_file():
            raise ConfigError(f"checkpoint not found: {src}")
        meta = load_training_state(src, model, trainer.optimizer)
        trainer.rng.bit_generator.state = meta["rng"]
        log.info(json.dumps({"event": "resume", "checkpoint": str(src), "step": trainer.step_count}))

    def checkpoint():
        meta = {"model": model.cfg.to_dict(), "config": cfg.to_dict(), "rng": trainer.rng.bit_generator.state}
        return save_training_state(ckpt_path, model, trainer.optimizer, meta=meta)

    log_path = out_dir / "train_log.jsonl"
    with open(log_path, "a" if cfg.io.resume else "w") as log_file:
        while trainer.step_count < cfg.train.steps:
            rec = trainer.step()
            line = json.dumps({"step": rec["step"], "loss": rec["loss"], "dice": rec["dice"], "bce": rec["bce"],
                               "lr": rec["lr"], "time": round(rec["time"], 4)})
            log_file.write(line + "\n")
            if cfg.train.log_every and rec["step"] % cfg.train.log_every == 0:
                log.info(line)
            if cfg.train.checkpoint_every and rec["step"] % cfg.train.checkpoint_every == 0:
                checkpoint()
    checkpoint()
    rows = []
    for s, (_, held) in zip(stacks, splits):
        masks = segment_volume(held, model, cfg.infer.window, cfg.infer.overlap)
        rows.append((s.name, evaluate_masks(masks, held.labels, cfg.infer.threshold)))
    (out_dir / "metrics.csv").write_text(_metrics_csv(rows))
    log.info(_metrics_csv(rows).rstrip())
    _write_manifest(out_dir, cfg, "train", ckpt_path, step=trainer.step_count,
                    heldout={name: m for name, m in rows})
    return EXIT_OK


def _load_model(cfg: RunConfig) -> tuple[SegmentationModel, Path]:
    if not cfg.io.checkpoint:
        raise ConfigError("no checkpoint given (io.checkpoint or --checkpoint)")
    path = Path(cfg.io.checkpoint)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    ckpt = read_checkpoint(path)
    mcfg = ModelConfig.from_dict(ckpt.meta["model"]) if "model" in ckpt.meta else cfg.model_config()
    model = SegmentationModel(mcfg)
    load_model_state(model, ckpt)
    return model, path


def cmd_infer(cfg: RunConfig, out_dir: Path) -> int:
    model, ckpt = _load_model(cfg)
    stacks = _load_stacks(cfg.io.eval_stacks, cfg.io.format, need_labels=False)
    outputs = []
    for s in stacks:
        t0 = time.perf_counter()
        masks = segment_volume(s, model, cfg.infer.window, cfg.infer.overlap)
        dest = save_masks(masks, s, out_dir / "masks" / s.name, cfg.infer.threshold, cfg.to_dict(), ckpt)
        outputs.append(str(dest))
        log.info(json.dumps({"stack": s.name, "slices": s.depth, "out": str(dest),
                             "seconds": round(time.perf_counter() - t0, 3)}))
    _write_manifest(out_dir, cfg, "infer", ckpt, outputs=outputs)
    return EXIT_OK


def _read_predictions(directory: Path, stack: VolumeStack) -> np.ndarray:
    sub = directory / stack.name if (directory / stack.name).is_dir() else directory
    pred = load_stack(sub, "png")
    if pred.depth != stack.depth:
        raise DataError(f"{sub}: {pred.depth} predicted slices for a stack of {stack.depth}")
    return pred.raw > 0


def cmd_eval(cfg: RunConfig, out_dir: Path, predictions: str | None = None) -> int:
    stacks = _load_stacks(cfg.io.eval_stacks, cfg.io.format, need_labels=True)
    ckpt = None
    if predictions is None:
        model, ckpt = _load_model(cfg)
    rows = []
    for s in stacks:
        if predictions is None:
            masks = segment_volume(s, model, cfg.infer.window, cfg.infer.overlap)
        else:
            masks = list(_read_predictions(Path(predictions), s).astype(np.float32))
        rows.append((s.name, evaluate_masks(masks, s.labels, cfg.infer.threshold)))
    table = _metrics_csv(rows)
    (out_dir / "metrics.csv").write_text(table)
    log.info(table.rstrip())
    _write_manifest(out_dir, cfg, "eval", ckpt, predictions=predictions, metrics={n: m for n, m in rows})
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, out_dir: Path) -> int:
    stacks = _load_stacks(cfg.io.train_stacks, cfg.io.format, need_labels=True)
    splits = [split_holdout(s) for s in stacks]
    rows = run_ablation(cfg.model_config(), cfg.train_config(), [tr for tr, _ in splits],
                        [h for _, h in splits], cfg.ablate.steps, cfg.ablate.seeds, progress=log.info)
    table = format_table(rows)
    (out_dir / "ablation.csv").write_text(table)
    log.info(table.rstrip())
    _write_manifest(out_dir, cfg, "ablate")
    return EXIT_OK


def cmd_synth(cfg: RunConfig, out_dir: Path) -> int:
    s = cfg.synth
    stack = make_synthetic_volume(s.kind, s.depth, s.height, s.width, s.seed)
    dest = out_dir / (s.kind if s.format == "png" else f"{s.kind}.raw")
    save_stack(stack, dest, s.format)
    log.info(json.dumps({"kind": s.kind, "path": str(dest), "shape": list(stack.shape)}))
    _write_manifest(out_dir, cfg, "synth", output=str(dest))
    return EXIT_OK


def run(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(cfg.io.output_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out_dir}: {exc}") from exc
    _setup_logging(out_dir, args.command)
    with threadpool_limits(limits=cfg.threads):
        if args.command == "train":
            return cmd_train(cfg, out_dir)
        if args.command == "infer":
            return cmd_infer(cfg, out_dir)
        if args.command == "eval":
            return cmd_eval(cfg, out_dir, args.predictions)
        if args.command == "ablate":
            return cmd_ablate(cfg, out_dir)
        return cmd_synth(cfg, out_dir)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (StackSegError, OSError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        for h in list(log.handlers):
            h.close()
            log.removeHandler(h)


if __name__ == "__main__":
    sys.exit(main())
