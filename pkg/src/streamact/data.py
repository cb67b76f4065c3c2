"""Feature/label file I/O, sliding windows, and the synthetic task generator.

Feature tracks live in "OADF" files and label tracks in sibling "OADL"
files; both are little-endian fixed-layout binaries so round trips are
bit-exact. Windows are built in two modes: training mode keeps only
positions with a full history and a full future, evaluation mode emits one
window per chunk and repeats the earliest chunk to fill a cold start.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .rng import SeededRng

FEATURE_MAGIC = b"OADF"
LABEL_MAGIC = b"OADL"
FORMAT_VERSION = 1


@dataclass
class FeatureTrack:
    """Per-chunk feature vectors of one streaming video."""

    video_id: str
    features: np.ndarray  # (n, dim) float32
    chunk_duration: float = 0.25

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise DimensionError(f"feature matrix must be 2-D, got {self.features.shape}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Instance:
    """A maximal run of one foreground class; end chunk inclusive."""

    start: int
    end: int
    label: int

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass
class LabelTrack:
    """Per-chunk class labels; 0 is background, 1..C are actions."""

    labels: np.ndarray  # (n,) int64
    num_classes: int    # C, foreground classes

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > self.num_classes):
            raise ConfigError(
                f"labels outside 0..{self.num_classes}: "
                f"{int(self.labels.min())}..{int(self.labels.max())}")

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    def instances(self) -> list[Instance]:
        """Maximal runs of equal nonzero label, in temporal order."""
        runs: list[Instance] = []
        start = None
        current = 0
        for i, lab in enumerate(self.labels):
            lab = int(lab)
            if lab != current:
                if current != 0:
                    runs.append(Instance(start, i - 1, current))
                start = i if lab != 0 else None
                current = lab
        if current != 0:
            runs.append(Instance(start, self.n - 1, current))
        return runs


def labels_from_instances(instances: list[Instance], n: int) -> np.ndarray:
    """Inverse of LabelTrack.instances(): background everywhere else."""
    labels = np.zeros(n, dtype=np.int64)
    for inst in instances:
        labels[inst.start:inst.end + 1] = inst.label
    return labels


# -- binary formats ---------------------------------------------------------


def _read_exact(f, count: int, offset: int, what: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise FormatError(f"truncated file: expected {count} bytes for {what} "
                          f"at byte offset {offset}, got {len(data)}")
    return data


def write_feature_file(track: FeatureTrack, path) -> None:
    if not np.all(np.isfinite(track.features)):
        raise FormatError("feature matrix contains non-finite values; refusing to write")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, track.n, track.dim))
        f.write(struct.pack("<d", float(track.chunk_duration)))
        f.write(np.ascontiguousarray(track.features, dtype="<f4").tobytes())


def read_feature_file(path) -> FeatureTrack:
    path = Path(path)
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, 0, "magic")
        if magic != FEATURE_MAGIC:
            raise FormatError(f"bad magic {magic!r} at byte offset 0, expected {FEATURE_MAGIC!r}")
        version, n, dim = struct.unpack("<III", _read_exact(f, 12, 4, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported version {version} at byte offset 4")
        (chunk_duration,) = struct.unpack("<d", _read_exact(f, 8, 16, "chunk duration"))
        raw = _read_exact(f, n * dim * 4, 24, "feature data")
        extra = f.read(1)
        if extra:
            raise FormatError(f"trailing bytes at byte offset {24 + n * dim * 4}")
    features = np.frombuffer(raw, dtype="<f4").reshape(n, dim).copy()
    return FeatureTrack(video_id=path.stem, features=features, chunk_duration=chunk_duration)


def write_label_file(track: LabelTrack, path) -> None:
    with open(path, "wb") as f:
        f.write(LABEL_MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, track.n, track.num_classes))
        f.write(np.ascontiguousarray(track.labels, dtype="<u4").tobytes())


def read_label_file(path) -> LabelTrack:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, 0, "magic")
        if magic != LABEL_MAGIC:
            raise FormatError(f"bad magic {magic!r} at byte offset 0, expected {LABEL_MAGIC!r}")
        version, n, num_classes = struct.unpack("<III", _read_exact(f, 12, 4, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported version {version} at byte offset 4")
        raw = _read_exact(f, n * 4, 16, "label data")
        extra = f.read(1)
        if extra:
            raise FormatError(f"trailing bytes at byte offset {16 + n * 4}")
    labels = np.frombuffer(raw, dtype="<u4").astype(np.int64)
    return LabelTrack(labels=labels, num_classes=num_classes)


def write_track(features: FeatureTrack, labels: LabelTrack, stem) -> tuple[Path, Path]:
    """Write the pair <stem>.oadf / <stem>.oadl."""
    stem = Path(stem)
    fpath = stem.with_suffix(".oadf")
    lpath = stem.with_suffix(".oadl")
    write_feature_file(features, fpath)
    write_label_file(labels, lpath)
    return fpath, lpath


def read_track(stem) -> tuple[FeatureTrack, LabelTrack]:
    stem = Path(stem)
    features = read_feature_file(stem.with_suffix(".oadf"))
    labels = read_label_file(stem.with_suffix(".oadl"))
    if features.n != labels.n:
        raise FormatError(f"track {stem.name}: {features.n} feature chunks "
                          f"but {labels.n} labels")
    return features, labels


def read_text_track(path, num_classes: int | None = None) -> tuple[FeatureTrack, LabelTrack]:
    """One-way import: each line is dim comma-separated floats plus a label column."""
    rows: list[list[float]] = []
    labels: list[int] = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) < 2:
                raise FormatError(f"{path}:{lineno}: need at least one feature and a label")
            try:
                rows.append([float(v) for v in parts[:-1]])
                labels.append(int(parts[-1]))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if len(rows[-1]) != len(rows[0]):
                raise FormatError(f"{path}:{lineno}: inconsistent feature width")
    label_arr = np.asarray(labels, dtype=np.int64)
    c = num_classes if num_classes is not None else (int(label_arr.max()) if labels else 0)
    features = FeatureTrack(video_id=Path(path).stem,
                            features=np.asarray(rows, dtype=np.float32).reshape(len(rows), -1))
    return features, LabelTrack(labels=label_arr, num_classes=c)


# -- windows ----------------------------------------------------------------


@dataclass
class WindowSample:
    """T+1 feature rows ending at the current chunk, with its labels."""

    features: np.ndarray       # (T+1, dim) float32
    label: int                 # y0
    future_labels: tuple[int, ...]
    video_id: str
    chunk_index: int


def pad_cold_start(available: np.ndarray, history: int) -> np.ndarray:
    """Fill missing leading rows by repeating the earliest available chunk."""
    available = np.asarray(available)
    if available.shape[0] == 0:
        raise DimensionError("pad_cold_start needs at least one chunk")
    rows = history + 1
    if available.shape[0] >= rows:
        return available[-rows:]
    pad = np.repeat(available[:1], rows - available.shape[0], axis=0)
    return np.concatenate([pad, available], axis=0)


def make_windows(features: FeatureTrack, labels: LabelTrack, history: int,
                 horizon: int, stride: int = 1, mode: str = "train") -> list[WindowSample]:
    """Sliding windows over one track.

    Training mode keeps positions with full history and full future
    (t in [history, n-1-horizon], stepping by stride). Evaluation mode emits
    one window per chunk, padding cold starts and truncating future labels at
    the video end.
    """
    if features.n != labels.n:
        raise DimensionError(f"misaligned track: {features.n} chunks vs {labels.n} labels")
    if history < 0 or horizon < 0 or stride < 1:
        raise ConfigError(f"bad window parameters history={history} "
                          f"horizon={horizon} stride={stride}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown window mode {mode!r}")
    n = features.n
    if n < 1:
        return []
    out: list[WindowSample] = []
    if mode == "train":
        for t in range(history, n - horizon, stride):
            out.append(WindowSample(
                features=features.features[t - history:t + 1],
                label=int(labels.labels[t]),
                future_labels=tuple(int(v) for v in labels.labels[t + 1:t + 1 + horizon]),
                video_id=features.video_id,
                chunk_index=t,
            ))
    else:
        for t in range(n):
            out.append(WindowSample(
                features=pad_cold_start(features.features[:t + 1], history),
                label=int(labels.labels[t]),
                future_labels=tuple(int(v) for v in labels.labels[t + 1:t + 1 + horizon]),
                video_id=features.video_id,
                chunk_index=t,
            ))
    return out


def batch_iterator(samples: list[WindowSample], batch_size: int, shuffle_seed: int,
                   epoch: int = 0, shuffle: bool = True):
    """Yield batches; order is a Fisher-Yates shuffle keyed by (seed, epoch).

    The last short batch is kept.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(samples)
    if shuffle:
        order = SeededRng(shuffle_seed).split(f"epoch{epoch}").shuffle_order(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        yield [samples[int(i)] for i in order[start:start + batch_size]]


def collate(batch: list[WindowSample], horizon: int,
            dtype=np.float64) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Stack windows into (features, current labels, future labels) arrays.

    Future labels are returned only when every window carries the full
    horizon.
    """
    features = np.stack([w.features for w in batch]).astype(dtype)
    current = np.asarray([w.label for w in batch], dtype=np.int64)
    if horizon and all(len(w.future_labels) == horizon for w in batch):
        future = np.asarray([w.future_labels for w in batch], dtype=np.int64)
    else:
        future = None
    return features, current, future


# -- synthetic task ----------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Markov segment labels with Gaussian class-mean features.

    With ``temporal_mix`` on, every chunk of a segment emits around the
    average of the current and previous segment means, so the class cannot be
    read off a single chunk; the history disambiguates it.

    The class means depend on ``seed`` only; segment draws and noise also mix
    in ``stream``, so one seed defines a task world and different streams
    (say train vs eval) are disjoint samples from it.
    """

    chunks: int
    classes: int = 3          # C foreground classes; states are 0..C
    dim: int = 16
    noise_sigma: float = 0.55
    mean_segment_len: float = 8.0
    temporal_mix: bool = True
    transition: np.ndarray | None = None  # (C+1, C+1) row-stochastic
    mean_scale: float = 1.0
    chunk_duration: float = 0.25
    seed: int = 0
    stream: str = ""
    video_id: str = "synthetic"

    def validate(self) -> np.ndarray:
        if self.chunks < 0:
            raise ConfigError(f"chunks must be >= 0, got {self.chunks}")
        if self.classes < 1:
            raise ConfigError(f"classes must be >= 1, got {self.classes}")
        if self.noise_sigma <= 0:
            raise ConfigError(f"noise_sigma must be > 0, got {self.noise_sigma}")
        if self.mean_segment_len < 1:
            raise ConfigError(f"mean_segment_len must be >= 1, got {self.mean_segment_len}")
        k = self.classes + 1
        if self.transition is None:
            trans = np.full((k, k), 1.0 / (k - 1))
            np.fill_diagonal(trans, 0.0)
        else:
            trans = np.asarray(self.transition, dtype=np.float64)
        if trans.shape != (k, k):
            raise ConfigError(f"transition matrix must be {(k, k)}, got {trans.shape}")
        if np.any(trans < 0) or np.any(np.abs(trans.sum(axis=1) - 1.0) > 1e-9):
            raise ConfigError("transition matrix rows must be non-negative and sum to 1")
        return trans


def generate_synthetic(spec: SyntheticSpec) -> tuple[FeatureTrack, LabelTrack]:
    """Pure function of the spec (seed included)."""
    trans = spec.validate()
    k = spec.classes + 1
    rng = SeededRng(spec.seed, "synthetic")
    means = np.stack([rng.split(f"mean{c}").normal((spec.dim,), scale=spec.mean_scale)
                      for c in range(k)])
    seg_rng = rng.split(f"segments/{spec.stream}" if spec.stream else "segments")
    noise_rng = rng.split(f"noise/{spec.stream}" if spec.stream else "noise")

    p = 1.0 / spec.mean_segment_len
    labels = np.zeros(spec.chunks, dtype=np.int64)
    emit_means = np.zeros((spec.chunks, spec.dim))
    pos = 0
    state = seg_rng.integers(0, k)
    prev_state = state
    while pos < spec.chunks:
        if p >= 1.0:
            length = 1
        else:
            u = seg_rng.random()
            length = 1 + int(np.floor(np.log1p(-u) / np.log1p(-p)))
        length = min(length, spec.chunks - pos)
        labels[pos:pos + length] = state
        mean = 0.5 * (means[state] + means[prev_state]) if spec.temporal_mix else means[state]
        emit_means[pos:pos + length] = mean
        pos += length
        prev_state = state
        u = seg_rng.random()
        state = int(np.searchsorted(np.cumsum(trans[state]), u, side="right"))
        state = min(state, k - 1)

    noise = noise_rng.normal((spec.chunks, spec.dim), scale=spec.noise_sigma)
    features = (emit_means + noise).astype(np.float32)
    return (FeatureTrack(video_id=spec.video_id, features=features,
                         chunk_duration=spec.chunk_duration),
            LabelTrack(labels=labels, num_classes=spec.classes))
