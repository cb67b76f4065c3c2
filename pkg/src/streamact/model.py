"""End-to-end streaming action model.

A window of T+1 past feature chunks is projected to width D, a learnable
classification token is appended, position encoding is added, and an N-layer
encoder produces the memory. M decoder layers refine learnable prediction
queries against that memory in parallel, one query per future step. The
token readout concatenated with the pooled query outputs classifies the
current chunk; a shared head classifies each future step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import (DecoderLayerParams, EncoderLayerParams, decoder_layer_forward,
                        encoder_layer_forward)
from .errors import ConfigError, DimensionError, WindowError
from .rng import SeededRng, xavier_uniform_init, zeros_init
from .tensor import Tensor

POS_MODES = ("none", "fixed_sinusoidal", "learned")
POOL_MODES = ("avg", "max")


@dataclass
class ModelConfig:
    """All architecture hyperparameters; label 0 is the background class."""

    input_dim: int = 3072
    history: int = 63          # T: past chunks before the current one
    width: int = 1024          # D: encoder stream width
    query_width: int = 1024    # D': decoder query stream width
    encoder_layers: int = 3    # N
    decoder_layers: int = 5    # M
    heads: int = 4
    decoder_steps: int = 8     # number of future steps predicted
    classes: int = 20          # C foreground classes (C+1 logits with background)
    loss_balance: float = 0.5  # weight of the future-prediction loss terms
    pos_mode: str = "learned"
    pool_mode: str = "avg"
    task_token: bool = True
    decoder: bool = True
    cross_attend_task_token: bool = True
    per_step_future_heads: bool = False
    ffn_multiple: int = 4
    layer_norm_eps: float = 1e-5
    dropout: float = 0.0       # reserved; only 0.0 is implemented

    def validate(self) -> None:
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.history < 0:
            raise ConfigError(f"history must be >= 0, got {self.history}")
        for name in ("width", "query_width", "encoder_layers", "heads", "classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")
        if self.decoder:
            if self.decoder_layers < 1 or self.decoder_steps < 1:
                raise ConfigError("decoder_layers and decoder_steps must be >= 1")
            if self.query_width % self.heads:
                raise ConfigError(
                    f"query_width {self.query_width} not divisible by {self.heads} heads")
        if self.loss_balance < 0:
            raise ConfigError(f"loss_balance must be >= 0, got {self.loss_balance}")
        if self.pos_mode not in POS_MODES:
            raise ConfigError(f"pos_mode must be one of {POS_MODES}, got {self.pos_mode!r}")
        if self.pos_mode == "fixed_sinusoidal" and self.width % 2:
            raise ConfigError("fixed_sinusoidal position encoding needs an even width")
        if self.pool_mode not in POOL_MODES:
            raise ConfigError(f"pool_mode must be one of {POOL_MODES}, got {self.pool_mode!r}")
        if self.dropout != 0.0:
            raise ConfigError("dropout is reserved and must stay 0.0")

    @property
    def seq_len(self) -> int:
        """Encoder sequence length: history+1 chunks plus the task token row."""
        return self.history + 1 + (1 if self.task_token else 0)

    @property
    def n_logits(self) -> int:
        return self.classes + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


def sinusoidal_encoding(length: int, width: int) -> np.ndarray:
    """Fixed sin/cos table: even columns sin(pos/10000^(2i/D)), odd columns cos."""
    if width % 2:
        raise ConfigError(f"sinusoidal encoding needs an even width, got {width}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i2 = np.arange(0, width, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / width)
    table = np.zeros((length, width), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


@dataclass
class ModelParams:
    """All learnable arrays, plus the fixed position table when configured."""

    input_w: Tensor
    input_b: Tensor
    task_token: Tensor | None
    pos_table: Tensor | None
    encoder: list[EncoderLayerParams]
    queries: Tensor | None
    decoder: list[DecoderLayerParams]
    cls_w: Tensor
    cls_b: Tensor
    future_w: list[Tensor]
    future_b: list[Tensor]
    pos_fixed: np.ndarray | None = None

    @classmethod
    def init(cls, config: ModelConfig, seed: int, dtype=np.float64) -> "ModelParams":
        config.validate()
        rng = SeededRng(seed)
        d, dq = config.width, config.query_width
        ffn = config.ffn_multiple * d
        ffn_q = config.ffn_multiple * dq
        encoder = [EncoderLayerParams.init(rng.split(f"encoder{i}"), d, config.heads, ffn, dtype)
                   for i in range(config.encoder_layers)]
        decoder = []
        queries = None
        future_w: list[Tensor] = []
        future_b: list[Tensor] = []
        if config.decoder:
            decoder = [DecoderLayerParams.init(rng.split(f"decoder{i}"), dq, d,
                                               config.heads, ffn_q, dtype)
                       for i in range(config.decoder_layers)]
            queries = xavier_uniform_init((config.decoder_steps, dq), rng.split("queries"), dtype)
            n_heads = config.decoder_steps if config.per_step_future_heads else 1
            future_w = [xavier_uniform_init((dq, config.n_logits), rng.split(f"future.w{i}"), dtype)
                        for i in range(n_heads)]
            future_b = [zeros_init((config.n_logits,), dtype) for _ in range(n_heads)]
        cls_in = d + (dq if config.decoder else 0)
        pos_table = None
        pos_fixed = None
        if config.pos_mode == "learned":
            pos_table = xavier_uniform_init((config.seq_len, d), rng.split("pos_table"), dtype)
        elif config.pos_mode == "fixed_sinusoidal":
            pos_fixed = sinusoidal_encoding(config.seq_len, d).astype(dtype)
        return cls(
            input_w=xavier_uniform_init((config.input_dim, d), rng.split("input.w"), dtype),
            input_b=zeros_init((d,), dtype),
            task_token=(xavier_uniform_init((d,), rng.split("task_token"), dtype)
                        if config.task_token else None),
            pos_table=pos_table,
            encoder=encoder,
            queries=queries,
            decoder=decoder,
            cls_w=xavier_uniform_init((cls_in, config.n_logits), rng.split("cls.w"), dtype),
            cls_b=zeros_init((config.n_logits,), dtype),
            future_w=future_w,
            future_b=future_b,
            pos_fixed=pos_fixed,
        )

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "input.w", self.input_w
        yield "input.b", self.input_b
        if self.task_token is not None:
            yield "task_token", self.task_token
        if self.pos_table is not None:
            yield "pos_table", self.pos_table
        for i, layer in enumerate(self.encoder):
            yield from layer.named(f"encoder{i}")
        if self.queries is not None:
            yield "queries", self.queries
        for i, layer in enumerate(self.decoder):
            yield from layer.named(f"decoder{i}")
        yield "cls.w", self.cls_w
        yield "cls.b", self.cls_b
        for i, w in enumerate(self.future_w):
            yield f"future.w{i}", w
        for i, b in enumerate(self.future_b):
            yield f"future.b{i}", b

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())


@dataclass
class ModelOutput:
    """Forward results for one window or a batch of windows."""

    current_logits: Tensor
    current_probs: Tensor
    token_feature: Tensor
    future_logits: Tensor | None = None
    future_probs: Tensor | None = None
    pooled: Tensor | None = None
    token_sequence: np.ndarray | None = None
    encoder_maps: list[np.ndarray] = field(default_factory=list)
    decoder_self_maps: list[np.ndarray] = field(default_factory=list)
    decoder_cross_maps: list[np.ndarray] = field(default_factory=list)


def embed_inputs(features, config: ModelConfig, params: ModelParams) -> Tensor:
    """Affine projection of each chunk feature to the encoder width."""
    x = features if isinstance(features, Tensor) else Tensor(features)
    expected = config.history + 1
    if x.shape[-2] != expected:
        raise WindowError(f"window has {x.shape[-2]} rows, expected {expected}")
    if x.shape[-1] != config.input_dim:
        raise DimensionError(
            f"feature width {x.shape[-1]} does not match input_dim {config.input_dim}")
    return T.matmul(x, params.input_w) + params.input_b


def build_token_sequence(tokens: Tensor, token_class: Tensor | None) -> Tensor:
    """Append the classification token as the final row (when enabled)."""
    if token_class is None:
        return tokens
    if token_class.shape[-1] != tokens.shape[-1]:
        raise DimensionError(
            f"token width {token_class.shape} does not match sequence width {tokens.shape}")
    if tokens.ndim == 3:
        row = T.broadcast_to(T.reshape(token_class, (1, 1, -1)),
                             (tokens.shape[0], 1, tokens.shape[2]))
        return T.concat([tokens, row], axis=1)
    return T.concat([tokens, T.reshape(token_class, (1, -1))], axis=0)


def add_position_encoding(seq: Tensor, config: ModelConfig, params: ModelParams) -> Tensor:
    if config.pos_mode == "none":
        return seq
    table = params.pos_table if config.pos_mode == "learned" else Tensor(params.pos_fixed)
    if table.shape != seq.shape[-2:]:
        raise DimensionError(
            f"position table {table.shape} does not match sequence {seq.shape}")
    return seq + table


def encoder_forward(seq: Tensor, config: ModelConfig, params: ModelParams,
                    maps_out: list | None = None) -> tuple[Tensor, Tensor]:
    """Run the encoder stack; returns (memory, classification feature).

    The feature is the task-token row when enabled, otherwise the row of the
    current chunk f0 (the last history row).
    """
    memory = seq
    for layer in params.encoder:
        memory = encoder_layer_forward(memory, layer, config.layer_norm_eps, maps_out)
    feature = T.select(memory, memory.shape[-2] - 1, axis=memory.ndim - 2)
    return memory, feature


def decoder_forward(config: ModelConfig, params: ModelParams, memory: Tensor,
                    self_maps_out: list | None = None,
                    cross_maps_out: list | None = None) -> Tensor:
    """Decode the learnable prediction queries in parallel against the memory."""
    queries = params.queries
    if memory.ndim == 3:
        queries = T.broadcast_to(T.reshape(queries, (1,) + queries.shape),
                                 (memory.shape[0],) + queries.shape)
    if config.task_token and not config.cross_attend_task_token:
        memory = T.narrow(memory, memory.ndim - 2, 0, config.history + 1)
    out = queries
    for layer in params.decoder:
        out = decoder_layer_forward(out, memory, layer, config.layer_norm_eps,
                                    self_maps_out, cross_maps_out)
    return out


def pool_future(decoded: Tensor, pool_mode: str) -> Tensor:
    """Pool the per-step query outputs across steps (elementwise avg or max)."""
    if decoded.shape[-2] == 0:
        raise DimensionError("pool_future over zero steps")
    axis = decoded.ndim - 2
    if pool_mode == "avg":
        return T.tmean(decoded, axis=axis)
    if pool_mode == "max":
        return T.tmax(decoded, axis=axis)
    raise ConfigError(f"unknown pool_mode {pool_mode!r}")


def classify_current(feature: Tensor, pooled: Tensor | None,
                     params: ModelParams) -> Tensor:
    """Logits over C+1 classes from the token feature (plus pooled queries)."""
    if pooled is not None:
        feature = T.concat([feature, pooled], axis=feature.ndim - 1)
    if feature.shape[-1] != params.cls_w.shape[0]:
        raise DimensionError(
            f"classifier input width {feature.shape} does not match {params.cls_w.shape}")
    single = feature.ndim == 1
    x = T.reshape(feature, (1, -1)) if single else feature
    logits = T.matmul(x, params.cls_w) + params.cls_b
    return T.reshape(logits, (-1,)) if single else logits


def classify_future(decoded: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """Per-step logits; one shared head unless per-step heads are configured."""
    if not config.per_step_future_heads:
        return T.matmul(decoded, params.future_w[0]) + params.future_b[0]
    axis = decoded.ndim - 2
    pieces = []
    for i in range(config.decoder_steps):
        step = T.select(decoded, i, axis=axis)
        single = step.ndim == 1
        x = T.reshape(step, (1, -1)) if single else step
        logits = T.matmul(x, params.future_w[i]) + params.future_b[i]
        if single:
            pieces.append(logits)  # already (1, C+1)
        else:
            pieces.append(T.reshape(logits, (logits.shape[0], 1, logits.shape[1])))
    return T.concat(pieces, axis=axis)


def forward(features, config: ModelConfig, params: ModelParams,
            capture_attention: bool = False) -> ModelOutput:
    """Full forward pass for one window (T+1, input_dim) or a batch (B, T+1, input_dim)."""
    enc_maps: list | None = [] if capture_attention else None
    dec_self: list | None = [] if capture_attention else None
    dec_cross: list | None = [] if capture_attention else None

    tokens = embed_inputs(features, config, params)
    seq = build_token_sequence(tokens, params.task_token if config.task_token else None)
    seq = add_position_encoding(seq, config, params)
    memory, feature = encoder_forward(seq, config, params, enc_maps)

    pooled = None
    decoded = None
    future_logits = None
    future_probs = None
    if config.decoder:
        decoded = decoder_forward(config, params, memory, dec_self, dec_cross)
        pooled = pool_future(decoded, config.pool_mode)
        future_logits = classify_future(decoded, params, config)
        future_probs = T.softmax(future_logits, axis=-1)

    current_logits = classify_current(feature, pooled, params)
    return ModelOutput(
        current_logits=current_logits,
        current_probs=T.softmax(current_logits, axis=-1),
        token_feature=feature,
        future_logits=future_logits,
        future_probs=future_probs,
        pooled=pooled,
        token_sequence=seq.data if capture_attention else None,
        encoder_maps=enc_maps or [],
        decoder_self_maps=dec_self or [],
        decoder_cross_maps=dec_cross or [],
    )


def joint_loss_parts(current_logits: Tensor, current_label, future_logits: Tensor | None,
                     future_labels, balance: float) -> tuple[Tensor, Tensor, Tensor | None]:
    """Returns (total, current CE, future CE sum); the future branch is built
    only when balance > 0 so an unweighted future head receives no gradient."""
    ce_current = T.cross_entropy(current_logits, current_label, reduction="mean")
    if balance == 0.0 or future_logits is None:
        return ce_current, ce_current, None
    if future_logits.ndim == 2:
        flat = future_logits
        labels = np.asarray(future_labels, dtype=np.int64).reshape(-1)
        batch = 1
    else:
        batch = future_logits.shape[0]
        flat = T.reshape(future_logits, (-1, future_logits.shape[-1]))
        labels = np.asarray(future_labels, dtype=np.int64).reshape(-1)
    future_sum = T.cross_entropy(flat, labels, reduction="sum") / batch
    total = ce_current + balance * future_sum
    return total, ce_current, future_sum


def joint_loss(current_logits: Tensor, current_label, future_logits: Tensor | None,
               future_labels, balance: float = 0.5) -> Tensor:
    """CE on the current chunk plus balance * summed CE over the future steps."""
    total, _, _ = joint_loss_parts(current_logits, current_label, future_logits,
                                   future_labels, balance)
    return total


def token_similarity_diagnostic(feature: np.ndarray,
                                tokens: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Cosine similarity of the classification feature to each token row.

    Zero-norm pairs get similarity 0.0 and their row index is returned in the
    flagged list.
    """
    feature = np.asarray(feature, dtype=np.float64).reshape(-1)
    tokens = np.asarray(tokens, dtype=np.float64)
    f_norm = math.sqrt(float(feature @ feature))
    sims = np.zeros(tokens.shape[0])
    flagged: list[int] = []
    for i, row in enumerate(tokens):
        r_norm = math.sqrt(float(row @ row))
        if f_norm == 0.0 or r_norm == 0.0:
            flagged.append(i)
            continue
        sims[i] = float(feature @ row) / (f_norm * r_norm)
    return sims, flagged
