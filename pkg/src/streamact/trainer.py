"""Deterministic training loop, checkpoint I/O, evaluation, and benchmarking.

Given (seed, config, data), every logged number is reproducible bit-for-bit
in float64: parameter init, the per-epoch Fisher-Yates shuffle, and the
optimizer are all keyed off the seed, and resuming from a checkpoint
continues the exact same trajectory.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .data import (FeatureTrack, LabelTrack, WindowSample, batch_iterator, collate,
                   make_windows)
from .errors import ConfigError, FormatError, NumericError
from .metrics import EvalReport, FrameScores, WindowPrediction, build_report
from .model import ModelConfig, ModelParams, forward, joint_loss_parts
from .optim import Adam, AdamState
from .rng import SeededRng
from .tensor import backward, no_grad

CHECKPOINT_MAGIC = b"OADC"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float64): 1, np.dtype(np.float32): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-4
    weight_decay: float = 5e-4
    seed: int = 0
    stride: int = 1
    eval_every: int = 0  # 0 disables mid-training evaluation
    precision: str = "float64"  # float64 for reproducibility work, float32 for throughput

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class EpochStats:
    epoch: int
    loss: float
    current: float
    future: float

    def line(self) -> str:
        return (f"epoch={self.epoch} loss={self.loss:.12f} "
                f"current={self.current:.12f} future={self.future:.12f}")


@dataclass
class Checkpoint:
    """Everything needed to resume training bit-exactly from an epoch boundary."""

    model_config: ModelConfig
    train_config: TrainConfig
    params: ModelParams
    adam: Adam
    epoch: int
    loss_history: list[EpochStats] = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.train_config.seed


def init_checkpoint(model_config: ModelConfig, train_config: TrainConfig) -> Checkpoint:
    model_config.validate()
    train_config.validate()
    params = ModelParams.init(model_config, train_config.seed, dtype=train_config.dtype)
    adam = Adam(params.as_dict(), lr=train_config.lr,
                weight_decay=train_config.weight_decay)
    return Checkpoint(model_config=model_config, train_config=train_config,
                      params=params, adam=adam, epoch=0)


def build_training_windows(tracks: list[tuple[FeatureTrack, LabelTrack]],
                           config: ModelConfig, stride: int = 1) -> list[WindowSample]:
    horizon = config.decoder_steps if config.decoder else 0
    windows: list[WindowSample] = []
    for features, labels in tracks:
        if features.dim != config.input_dim:
            raise ConfigError(f"track {features.video_id!r} has dim {features.dim}, "
                              f"model expects {config.input_dim}")
        windows.extend(make_windows(features, labels, config.history, horizon,
                                    stride=stride, mode="train"))
    return windows


def train(model_config: ModelConfig, train_config: TrainConfig,
          tracks: list[tuple[FeatureTrack, LabelTrack]],
          resume: Checkpoint | None = None,
          eval_tracks: list[tuple[FeatureTrack, LabelTrack]] | None = None,
          log_fn=None) -> Checkpoint:
    """Run (or continue) training; returns the final checkpoint.

    Per batch: forward, joint loss, backward, Adam step. The epoch log keeps
    the current-head and future-head losses separately; the logged total is
    current + balance * future by construction.
    """
    if resume is not None:
        ckpt = resume
        model_config, train_config = ckpt.model_config, ckpt.train_config
    else:
        ckpt = init_checkpoint(model_config, train_config)
    windows = build_training_windows(tracks, model_config, train_config.stride)
    if not windows:
        raise ConfigError("training dataset produced no full windows")
    horizon = model_config.decoder_steps if model_config.decoder else 0
    balance = model_config.loss_balance
    dtype = train_config.dtype

    # one BLAS thread: faster at these gemm sizes and keeps reductions order-fixed
    with threadpool_limits(limits=1, user_api="blas"):
        for epoch in range(ckpt.epoch, train_config.epochs):
            cur_sum = 0.0
            fut_sum = 0.0
            seen = 0
            batches = batch_iterator(windows, train_config.batch_size,
                                     shuffle_seed=train_config.seed, epoch=epoch)
            for batch_id, batch in enumerate(batches):
                feats, current, future = collate(batch, horizon, dtype=dtype)
                out = forward(feats, model_config, ckpt.params)
                total, ce_cur, ce_fut = joint_loss_parts(
                    out.current_logits, current,
                    out.future_logits if future is not None else None,
                    future, balance)
                if not np.isfinite(total.data):
                    raise NumericError(f"non-finite loss in epoch {epoch} batch {batch_id}")
                backward(total)
                ckpt.adam.step()
                ckpt.adam.zero_grad()
                cur_sum += float(ce_cur.data) * len(batch)
                fut_sum += (float(ce_fut.data) if ce_fut is not None else 0.0) * len(batch)
                seen += len(batch)
            cur_mean = cur_sum / seen
            fut_mean = fut_sum / seen
            stats = EpochStats(epoch=epoch, loss=cur_mean + balance * fut_mean,
                               current=cur_mean, future=fut_mean)
            ckpt.loss_history.append(stats)
            ckpt.epoch = epoch + 1
            if log_fn:
                log_fn(stats.line())
            if (train_config.eval_every and eval_tracks
                    and (epoch + 1) % train_config.eval_every == 0):
                report = evaluate(ckpt, eval_tracks)
                if log_fn:
                    log_fn(f"epoch={epoch} eval_map={report.map:.6f} "
                           f"eval_mcap={report.mcap:.6f}")
    return ckpt


def evaluate(ckpt: Checkpoint, tracks: list[tuple[FeatureTrack, LabelTrack]],
             cap_w: float | None = None, batch_size: int = 256) -> EvalReport:
    """Score every chunk of every track; parameters are never mutated."""
    config = ckpt.model_config
    horizon = config.decoder_steps if config.decoder else 0
    seen_ids = set()
    all_scores: list[np.ndarray] = []
    all_labels: list[np.ndarray] = []
    instances = []
    predictions: list[WindowPrediction] = []
    label_tracks: dict[str, LabelTrack] = {}
    offset = 0
    chunk_duration = tracks[0][0].chunk_duration if tracks else 0.25
    dtype = ckpt.params.input_w.dtype
    with threadpool_limits(limits=1, user_api="blas"):
        for features, labels in tracks:
            if features.dim != config.input_dim:
                raise ConfigError(f"track {features.video_id!r} has dim {features.dim}, "
                                  f"model expects {config.input_dim}")
            if features.video_id in seen_ids:
                raise ConfigError(f"duplicate video id {features.video_id!r}")
            seen_ids.add(features.video_id)
            label_tracks[features.video_id] = labels
            windows = make_windows(features, labels, config.history, horizon, mode="eval")
            for start in range(0, len(windows), batch_size):
                batch = windows[start:start + batch_size]
                feats, _, _ = collate(batch, horizon, dtype=dtype)
                with no_grad():
                    out = forward(feats, config, ckpt.params)
                all_scores.append(out.current_probs.data[:, 1:].astype(np.float64))
                if out.future_probs is not None:
                    probs = out.future_probs.data.astype(np.float64)
                    for row, w in enumerate(batch):
                        predictions.append(WindowPrediction(
                            video_id=w.video_id, chunk_index=w.chunk_index,
                            future_probs=probs[row]))
            all_labels.append(labels.labels)
            for inst in labels.instances():
                instances.append(type(inst)(inst.start + offset, inst.end + offset,
                                            inst.label))
            offset += features.n
    frames = FrameScores(scores=np.concatenate(all_scores, axis=0),
                         labels=np.concatenate(all_labels))
    return build_report(frames, instances, predictions or None,
                        label_tracks if predictions else None, horizon,
                        chunk_duration=chunk_duration, w=cap_w)


# -- checkpoint serialization -------------------------------------------------


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _named_tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    records: list[tuple[str, np.ndarray]] = []
    for name, p in ckpt.params.named_parameters():
        state = ckpt.adam.state[name]
        records.append((f"param/{name}", p.data))
        records.append((f"adam.m/{name}", state.m))
        records.append((f"adam.v/{name}", state.v))
    return records


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header = {
        "model": ckpt.model_config.to_dict(),
        "train": ckpt.train_config.to_dict(),
        "epoch": ckpt.epoch,
        "rng_seed": ckpt.seed,
        "loss_history": [[s.epoch, s.loss, s.current, s.future] for s in ckpt.loss_history],
        "adam_t": {name: ckpt.adam.state[name].t for name, _ in ckpt.params.named_parameters()},
        "adam": {"lr": ckpt.adam.lr, "weight_decay": ckpt.adam.weight_decay,
                 "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps},
    }
    blob = _canonical_json(header)
    records = _named_tensors(ckpt)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(records)))
        for name, arr in records:
            encoded = name.encode()
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BI", _DTYPE_CODES[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        offset = 0
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad magic {magic!r} at byte offset 0, "
                              f"expected {CHECKPOINT_MAGIC!r}")
        offset = 4

        def take(count: int, what: str) -> bytes:
            nonlocal offset
            data = f.read(count)
            if len(data) != count:
                raise FormatError(f"truncated checkpoint: {what} at byte offset {offset}")
            offset += count
            return data

        (version,) = struct.unpack("<I", take(4, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version} at byte offset 4")
        (header_len,) = struct.unpack("<I", take(4, "header length"))
        header = json.loads(take(header_len, "header"))
        (count,) = struct.unpack("<I", take(4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", take(4, "name length"))
            name = take(name_len, "name").decode()
            code, ndim = struct.unpack("<BI", take(5, "dtype/ndim"))
            if code not in _CODE_DTYPES:
                raise FormatError(f"unknown dtype code {code} at byte offset {offset - 5}")
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
            dtype = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            tensors[name] = np.frombuffer(take(nbytes, f"tensor {name}"),
                                          dtype=dtype).reshape(shape).copy()
        if f.read(1):
            raise FormatError(f"trailing bytes at byte offset {offset}")

    model_config = ModelConfig.from_dict(header["model"])
    train_config = TrainConfig.from_dict(header["train"])
    ckpt = init_checkpoint(model_config, train_config)
    ckpt.epoch = int(header["epoch"])
    ckpt.loss_history = [EpochStats(int(e), float(l), float(c), float(fu))
                         for e, l, c, fu in header["loss_history"]]
    adam_meta = header["adam"]
    ckpt.adam.lr = float(adam_meta["lr"])
    ckpt.adam.weight_decay = float(adam_meta["weight_decay"])
    ckpt.adam.beta1 = float(adam_meta["beta1"])
    ckpt.adam.beta2 = float(adam_meta["beta2"])
    ckpt.adam.eps = float(adam_meta["eps"])
    for name, p in ckpt.params.named_parameters():
        for key in (f"param/{name}", f"adam.m/{name}", f"adam.v/{name}"):
            if key not in tensors:
                raise FormatError(f"checkpoint missing tensor {key!r}")
            if tensors[key].shape != p.data.shape:
                raise FormatError(f"tensor {key!r} has shape {tensors[key].shape}, "
                                  f"expected {p.data.shape}")
        p.data = tensors[f"param/{name}"]
        state = ckpt.adam.state[name]
        state.m = tensors[f"adam.m/{name}"]
        state.v = tensors[f"adam.v/{name}"]
        state.t = int(header["adam_t"][name])
    return ckpt


# -- benchmarking -------------------------------------------------------------


@dataclass
class BenchReport:
    batch_size: int
    trials: int
    forward_wps: list[float]
    train_wps: list[float]
    forward_batch_times: list[float]
    fingerprint: str

    @property
    def forward_median(self) -> float:
        return float(np.median(self.forward_wps))

    @property
    def train_median(self) -> float:
        return float(np.median(self.train_wps))

    def lines(self) -> list[str]:
        return [
            f"config_fingerprint: {self.fingerprint}",
            f"batch_size: {self.batch_size}",
            f"trials: {self.trials}",
            f"forward_windows_per_sec_median: {self.forward_median:.2f}",
            f"train_windows_per_sec_median: {self.train_median:.2f}",
            "forward_windows_per_sec: " + " ".join(f"{v:.2f}" for v in self.forward_wps),
            "train_windows_per_sec: " + " ".join(f"{v:.2f}" for v in self.train_wps),
        ]


def config_fingerprint(config: ModelConfig) -> str:
    return hashlib.sha256(_canonical_json(config.to_dict())).hexdigest()[:16]


def benchmark(config: ModelConfig, batch_size: int = 128, trials: int = 5,
              batches_per_trial: int = 4, seed: int = 0,
              precision: str = "float64") -> BenchReport:
    """Median windows/second for forward-only and forward+backward passes.

    One untimed warmup trial runs first; the model is stateless so per-window
    cost does not depend on how many windows were processed before.
    """
    if trials < 1 or batches_per_trial < 1:
        raise ConfigError("trials and batches_per_trial must be >= 1")
    if precision not in ("float32", "float64"):
        raise ConfigError(f"precision must be float32 or float64, got {precision!r}")
    config.validate()
    dtype = np.float32 if precision == "float32" else np.float64
    params = ModelParams.init(config, seed, dtype=dtype)
    rng = SeededRng(seed, "bench")
    feats = rng.normal((batch_size, config.history + 1, config.input_dim)).astype(dtype)
    horizon = config.decoder_steps if config.decoder else 0
    labels = np.zeros(batch_size, dtype=np.int64)
    future = np.zeros((batch_size, horizon), dtype=np.int64) if horizon else None

    def forward_only() -> float:
        t0 = time.perf_counter()
        with no_grad():
            forward(feats, config, params)
        return time.perf_counter() - t0

    def forward_backward() -> float:
        t0 = time.perf_counter()
        out = forward(feats, config, params)
        total, _, _ = joint_loss_parts(out.current_logits, labels,
                                       out.future_logits, future, config.loss_balance)
        backward(total)
        T.zero_grads(p for _, p in params.named_parameters())
        return time.perf_counter() - t0

    with threadpool_limits(limits=1, user_api="blas"):
        forward_only()
        forward_backward()  # warmup, untimed

        forward_wps: list[float] = []
        train_wps: list[float] = []
        batch_times: list[float] = []
        for _ in range(trials):
            elapsed = 0.0
            for _ in range(batches_per_trial):
                dt = forward_only()
                batch_times.append(dt)
                elapsed += dt
            forward_wps.append(batch_size * batches_per_trial / elapsed)
            elapsed = sum(forward_backward() for _ in range(batches_per_trial))
            train_wps.append(batch_size * batches_per_trial / elapsed)
    return BenchReport(batch_size=batch_size, trials=trials, forward_wps=forward_wps,
                       train_wps=train_wps, forward_batch_times=batch_times,
                       fingerprint=config_fingerprint(config))
