"""Command-line surface: synth, train, eval, bench, inspect.

Configuration is line-oriented ``key = value`` text whose keys mirror the
ModelConfig/TrainConfig fields; command-line flags override file values,
which override defaults. The seed may also come from the OADTR_SEED
environment variable as the lowest-priority source. Every command writes a
run manifest (resolved config, seed, input digests, tool version) before it
starts computing.

Exit codes: 0 success, 2 configuration error, 3 data-format error,
4 numeric abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (SyntheticSpec, generate_synthetic, read_track, write_track)
from .errors import (ConfigError, FormatError, NumericError, StreamactError)
from .model import ModelConfig, forward, token_similarity_diagnostic
from .trainer import (Checkpoint, TrainConfig, benchmark, evaluate, load_checkpoint,
                      save_checkpoint, train)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_MODEL_FIELDS = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def parse_config_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; errors carry the offending line number."""
    values: dict[str, str] = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = line.split("=", 1)
            key, value = key.strip(), value.strip()
            if key not in _MODEL_FIELDS and key not in _TRAIN_FIELDS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = value
    return values


def _coerce(key: str, value: str, kind: str, where: str):
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            lowered = value.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        return value
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from None


def resolve_configs(args) -> tuple[ModelConfig, TrainConfig]:
    """defaults -> config file -> flags; seed additionally falls back to OADTR_SEED."""
    model_kwargs: dict = {}
    train_kwargs: dict = {}
    if getattr(args, "config", None):
        for key, value in parse_config_file(args.config).items():
            fields = _MODEL_FIELDS if key in _MODEL_FIELDS else _TRAIN_FIELDS
            target = model_kwargs if key in _MODEL_FIELDS else train_kwargs
            target[key] = _coerce(key, value, fields[key], str(args.config))
    env_seed = os.environ.get("OADTR_SEED")
    if "seed" not in train_kwargs and env_seed is not None:
        train_kwargs["seed"] = _coerce("seed", env_seed, "int", "OADTR_SEED")

    overrides = {
        "history": "history", "input_dim": "input_dim", "width": "width",
        "query_width": "query_width", "encoder_layers": "encoder_layers",
        "decoder_layers": "decoder_layers", "heads": "heads",
        "decoder_steps": "decoder_steps", "classes": "classes",
        "pos_mode": "pos_mode", "pool_mode": "pool_mode",
    }
    for flag, key in overrides.items():
        value = getattr(args, flag, None)
        if value is not None:
            model_kwargs[key] = value
    if getattr(args, "lam", None) is not None:
        model_kwargs["loss_balance"] = args.lam
    if getattr(args, "no_decoder", False):
        model_kwargs["decoder"] = False
    if getattr(args, "no_task_token", False):
        model_kwargs["task_token"] = False
    for flag in ("epochs", "batch_size", "lr", "weight_decay", "seed", "stride",
                 "eval_every"):
        value = getattr(args, flag, None)
        if value is not None:
            train_kwargs[flag] = value

    try:
        model = ModelConfig(**model_kwargs)
        model.validate()
        train_cfg = TrainConfig(**train_kwargs)
        train_cfg.validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return model, train_cfg


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path: Path, command: str, config: dict, seed: int,
                   inputs: list[Path]) -> None:
    manifest = {
        "tool_version": __version__,
        "command": command,
        "seed": seed,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in sorted(inputs)},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_data_dir(data_dir) -> list:
    data_dir = Path(data_dir)
    stems = sorted(p.with_suffix("") for p in data_dir.glob("*.oadf"))
    if not stems:
        raise FormatError(f"no .oadf tracks found in {data_dir}")
    return [read_track(stem) for stem in stems]


def data_files(data_dir) -> list[Path]:
    data_dir = Path(data_dir)
    return sorted(list(data_dir.glob("*.oadf")) + list(data_dir.glob("*.oadl")))


# -- commands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    spec = SyntheticSpec(
        chunks=args.chunks, classes=args.classes, dim=args.dim,
        noise_sigma=args.sigma, mean_segment_len=args.mean_length,
        temporal_mix=args.temporal, seed=args.seed if args.seed is not None else 0,
        stream=args.stream, chunk_duration=args.chunk_duration, video_id=args.name)
    spec.validate()
    stem = out / args.name
    for suffix in (".oadf", ".oadl"):
        target = stem.with_suffix(suffix)
        if target.exists() and not args.force:
            raise ConfigError(f"{target} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / f"{args.name}.manifest.json", "synth",
                   dataclasses.asdict(spec) | {"transition": None}, spec.seed, [])
    features, labels = generate_synthetic(spec)
    fpath, lpath = write_track(features, labels, stem)
    print(f"wrote {fpath} ({features.n} chunks x {features.dim} dims)")
    print(f"wrote {lpath} ({labels.num_classes} classes, "
          f"{len(labels.instances())} action instances)")
    return 0


def cmd_train(args) -> int:
    model_config, train_config = resolve_configs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = data_files(args.data)
    if args.config:
        inputs.append(Path(args.config))
    if args.from_checkpoint:
        inputs.append(Path(args.from_checkpoint))
    write_manifest(out / "run_manifest.json", "train",
                   {"model": model_config.to_dict(), "train": train_config.to_dict()},
                   train_config.seed, inputs)
    tracks = load_data_dir(args.data)
    resume = None
    if args.from_checkpoint:
        # the checkpoint's hyperparameters stay authoritative; only the epoch
        # target moves, so the continuation is bit-exact
        resume = load_checkpoint(args.from_checkpoint)
        resume.train_config.epochs = train_config.epochs
    log_path = out / "train_log.txt"
    with open(log_path, "w") as log:
        def log_fn(line: str) -> None:
            print(line)
            log.write(line + "\n")
            log.flush()

        ckpt = train(model_config, train_config, tracks, resume=resume, log_fn=log_fn)
    ckpt_path = out / "checkpoint.oadc"
    save_checkpoint(ckpt, ckpt_path)
    print(f"wrote {ckpt_path}")
    print(f"wrote {log_path}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    report_path = Path(args.report)
    inputs = data_files(args.data) + [Path(args.checkpoint)]
    write_manifest(report_path.with_suffix(report_path.suffix + ".manifest.json"), "eval",
                   {"model": ckpt.model_config.to_dict(), "cap_w": args.cap_w},
                   ckpt.seed, inputs)
    tracks = load_data_dir(args.data)
    report = evaluate(ckpt, tracks, cap_w=args.cap_w)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_text())
    table_path = report_path.with_suffix(report_path.suffix + ".tsv")
    table_path.write_text(report.to_table())
    sys.stdout.write(report.to_text())
    print(f"wrote {report_path}")
    print(f"wrote {table_path}")
    return 0


def cmd_bench(args) -> int:
    model_config, _ = resolve_configs(args)
    report = benchmark(model_config, batch_size=args.batch, trials=args.trials)
    for line in report.lines():
        print(line)
    return 0


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    config = ckpt.model_config
    video_id, sep, chunk_str = args.window.rpartition(":")
    if not sep:
        raise ConfigError(f"--window must look like video:chunk, got {args.window!r}")
    chunk = int(chunk_str)
    out_path = Path(args.out)
    inputs = data_files(args.data) + [Path(args.checkpoint)]
    write_manifest(out_path.with_suffix(out_path.suffix + ".manifest.json"), "inspect",
                   {"model": config.to_dict(), "window": args.window}, ckpt.seed, inputs)
    tracks = {f.video_id: (f, l) for f, l in load_data_dir(args.data)}
    if video_id not in tracks:
        raise ConfigError(f"video {video_id!r} not found in {args.data}")
    features, labels = tracks[video_id]
    if not 0 <= chunk < features.n:
        raise ConfigError(f"chunk {chunk} out of range for {video_id!r} ({features.n} chunks)")
    from .data import make_windows
    horizon = config.decoder_steps if config.decoder else 0
    window = make_windows(features, labels, config.history, horizon, mode="eval")[chunk]
    from .tensor import no_grad
    with no_grad():
        out = forward(window.features.astype(np.float64), config, ckpt.params,
                      capture_attention=True)
    sims, flagged = token_similarity_diagnostic(out.token_feature.data, out.token_sequence)

    lines = [f"# window {video_id}:{chunk}",
             "# token_similarity (row, cosine, flagged)"]
    for i, v in enumerate(sims):
        lines.append(f"{i}\t{v:.9f}\t{int(i in flagged)}")

    def emit(tag: str, maps: list[np.ndarray]) -> None:
        for layer, weights in enumerate(maps):
            for head in range(weights.shape[0]):
                lines.append(f"# {tag} layer={layer} head={head} (rows=queries, cols=keys)")
                for row in weights[head]:
                    lines.append("\t".join(f"{v:.9f}" for v in row))

    emit("encoder_attention", out.encoder_maps)
    emit("decoder_self_attention", out.decoder_self_maps)
    emit("decoder_cross_attention", out.decoder_cross_maps)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(lines) + "\n")
    print(f"wrote {out_path}")
    return 0


# -- parser -------------------------------------------------------------------


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--history", type=int, help="past chunks per window (T)")
    p.add_argument("--input-dim", dest="input_dim", type=int)
    p.add_argument("--width", type=int, help="encoder stream width")
    p.add_argument("--query-width", dest="query_width", type=int)
    p.add_argument("--encoder-layers", dest="encoder_layers", type=int)
    p.add_argument("--decoder-layers", dest="decoder_layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--decoder-steps", dest="decoder_steps", type=int)
    p.add_argument("--classes", type=int, help="foreground classes (background is 0)")
    p.add_argument("--lambda", dest="lam", type=float,
                   help="future-loss balance coefficient")
    p.add_argument("--no-decoder", action="store_true", help="encoder-only variant")
    p.add_argument("--no-task-token", action="store_true",
                   help="classify from the current-chunk row instead of the task token")
    p.add_argument("--pos-mode", dest="pos_mode",
                   choices=["none", "fixed_sinusoidal", "learned"])
    p.add_argument("--pool-mode", dest="pool_mode", choices=["avg", "max"])
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamact",
                                     description="Streaming online action detection")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic feature/label track")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="synth")
    p.add_argument("--chunks", type=int, default=10000)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--sigma", type=float, default=0.55)
    p.add_argument("--mean-length", dest="mean_length", type=float, default=8.0)
    p.add_argument("--temporal", dest="temporal", action="store_true", default=True)
    p.add_argument("--no-temporal", dest="temporal", action="store_false",
                   help="emit around pure class means (single-chunk separable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--stream", default="",
                   help="sample stream within the seed's task world (e.g. train, eval)")
    p.add_argument("--chunk-duration", dest="chunk_duration", type=float, default=0.25)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on OADF/OADL tracks")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--from-checkpoint", dest="from_checkpoint")
    _add_model_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--stride", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write the report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--cap-w", dest="cap_w", type=float,
                   help="override the cAP negative/positive ratio")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="measure forward / train throughput")
    _add_model_flags(p)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--trials", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="export attention maps and token similarity")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--window", required=True, help="video:chunk")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"data format error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except StreamactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
