"""Streaming online action detection with a task-token transformer."""

__version__ = "0.1.0"

from .errors import (ConfigError, ContractError, DimensionError, FormatError,
                     LabelError, NumericError, StreamactError, WindowError)
from .tensor import (ComputationRecord, Tensor, backward, concat, cross_entropy,
                     gelu, layer_norm, matmul, no_grad, softmax, zero_grads)
from .rng import SeededRng, xavier_uniform_init
from .optim import Adam, AdamState, adam_step
from .attention import (DecoderLayerParams, EncoderLayerParams, MultiHeadParams,
                        decoder_layer_forward, encoder_layer_forward,
                        multi_head_cross_attention, multi_head_self_attention,
                        scaled_dot_attention)
from .model import (ModelConfig, ModelOutput, ModelParams, forward, joint_loss,
                    sinusoidal_encoding, token_similarity_diagnostic)
from .data import (FeatureTrack, LabelTrack, SyntheticSpec, WindowSample,
                   batch_iterator, generate_synthetic, make_windows, pad_cold_start,
                   read_feature_file, read_label_file, read_track, write_feature_file,
                   write_label_file, write_track)
from .metrics import (EvalReport, FrameScores, anticipation_eval, average_precision,
                      calibrated_average_precision, mean_over_classes, portion_mcap)
from .trainer import (Checkpoint, TrainConfig, benchmark, evaluate, load_checkpoint,
                      save_checkpoint, train)

__all__ = [name for name in dir() if not name.startswith("_")]
