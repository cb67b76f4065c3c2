"""Per-frame ranking metrics: AP, calibrated AP, portion-of-action, anticipation.

AP here is plain precision-at-positive averaging (no interpolation), which is
also the structure of the calibrated variant: cPrec = TP / (TP + FP/w) with w
the negative/positive frame ratio, so cAP(w=1) == AP. The background class is
never scored; classes without a positive frame are skipped and flagged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Instance, LabelTrack
from .errors import ContractError, DimensionError


def _ranked_positives(scores, positives) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(positives)
    if scores.shape != flags.shape or scores.ndim != 1:
        raise DimensionError(f"scores {scores.shape} and positives {flags.shape} must be "
                             "equal-length vectors")
    if not flags.any():
        raise ContractError("average precision is undefined without a positive frame")
    # stable argsort of -scores: descending scores, ties by original index
    order = np.argsort(-scores, kind="stable")
    return flags[order].astype(bool)


def average_precision(scores, positives) -> float:
    """Mean of precision-at-rank over the positive frames."""
    ranked = _ranked_positives(scores, positives)
    ranks = np.arange(1, ranked.size + 1)
    tp = np.cumsum(ranked)
    return float((tp[ranked] / ranks[ranked]).mean())


def calibrated_average_precision(scores, positives, w: float | None = None) -> float:
    """cAP with cPrec = TP/(TP + FP/w); w defaults to #negatives/#positives."""
    ranked = _ranked_positives(scores, positives)
    n_pos = int(ranked.sum())
    n_neg = ranked.size - n_pos
    if w is None:
        w = n_neg / n_pos
    if w <= 0:
        raise ContractError(f"calibration ratio w must be > 0, got {w}")
    tp = np.cumsum(ranked)
    fp = np.arange(1, ranked.size + 1) - tp
    cprec = tp / (tp + fp / w)
    return float(cprec[ranked].sum() / n_pos)


def mean_over_classes(values: dict[int, float | None]) -> float:
    """Arithmetic mean over classes that produced a value (skipped ones excluded)."""
    usable = [v for v in values.values() if v is not None]
    if not usable:
        raise ContractError("no class with positive frames to average")
    return float(np.mean(usable))


@dataclass
class FrameScores:
    """Per-frame scores for foreground classes 1..C, aligned with labels."""

    scores: np.ndarray  # (n_frames, C) class c at column c-1
    labels: np.ndarray  # (n_frames,) values in 0..C

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.scores.ndim != 2 or self.scores.shape[0] != self.labels.shape[0]:
            raise DimensionError(f"scores {self.scores.shape} do not align with "
                                 f"{self.labels.shape[0]} labels")

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]


def per_class_ap(frames: FrameScores, calibrated: bool = False,
                 w: float | None = None) -> dict[int, float | None]:
    """AP (or cAP) for each foreground class; None marks a skipped class."""
    out: dict[int, float | None] = {}
    for c in range(1, frames.num_classes + 1):
        positives = frames.labels == c
        if not positives.any():
            out[c] = None
            continue
        col = frames.scores[:, c - 1]
        out[c] = (calibrated_average_precision(col, positives, w) if calibrated
                  else average_precision(col, positives))
    return out


def portion_mcap(frames: FrameScores, instances: list[Instance],
                 w: float | None = None) -> list[float | None]:
    """mcAP restricted to each tenth of the action instances.

    Frame idx of an instance [start, end] falls in decile
    floor(10*(idx-start)/length), clamped to 9. For one (class, decile) cell
    the ranking population is that decile's frames of the class plus all
    background frames, and the calibration ratio is recomputed per cell.
    A decile no instance reaches (all runs shorter than 10) comes back None.
    """
    labels = frames.labels
    background = labels == 0
    decile_of = np.full(labels.shape[0], -1, dtype=np.int64)
    for inst in instances:
        idx = np.arange(inst.start, inst.end + 1)
        decile_of[idx] = np.minimum(10 * (idx - inst.start) // inst.length, 9)
    results: list[float | None] = []
    for d in range(10):
        per_class: dict[int, float | None] = {}
        for c in range(1, frames.num_classes + 1):
            mask = (labels == c) & (decile_of == d)
            if not mask.any():
                per_class[c] = None
                continue
            population = mask | background
            col = frames.scores[population, c - 1]
            positives = mask[population]
            per_class[c] = calibrated_average_precision(col, positives, w)
        if all(v is None for v in per_class.values()):
            results.append(None)
        else:
            results.append(mean_over_classes(per_class))
    return results


@dataclass
class WindowPrediction:
    """Future-step probabilities of one evaluation window."""

    video_id: str
    chunk_index: int
    future_probs: np.ndarray  # (horizon, C+1)


def anticipation_eval(predictions: list[WindowPrediction],
                      label_tracks: dict[str, LabelTrack], horizon: int,
                      calibrated: bool = False,
                      w: float | None = None) -> tuple[list[float], float]:
    """Score step i of every window against the label at chunk t+i.

    Windows whose target chunk falls beyond the video end are excluded from
    that step. Returns (per-step scores, their average).
    """
    per_step: list[float] = []
    num_classes = None
    for pred in predictions:
        num_classes = pred.future_probs.shape[1] - 1
        break
    if num_classes is None:
        raise ContractError("anticipation_eval needs at least one prediction")
    for i in range(1, horizon + 1):
        scores_rows = []
        label_rows = []
        for pred in predictions:
            track = label_tracks[pred.video_id]
            target = pred.chunk_index + i
            if target >= track.n:
                continue
            scores_rows.append(pred.future_probs[i - 1, 1:])
            label_rows.append(int(track.labels[target]))
        frames = FrameScores(scores=np.asarray(scores_rows),
                             labels=np.asarray(label_rows, dtype=np.int64))
        per_class = per_class_ap(frames, calibrated=calibrated, w=w)
        per_step.append(mean_over_classes(per_class))
    return per_step, float(np.mean(per_step))


@dataclass
class EvalReport:
    """All evaluation numbers, with stable key names for serialization.

    Keys: map, mcap, ap[c], cap[c] (skipped classes report "skipped"),
    portion_mcap[d] for deciles d=0..9, anticipation_map[i] /
    anticipation_mcap[i] for steps i=1.., anticipation_map_avg,
    anticipation_mcap_avg, and anticipation_seconds[i].
    """

    per_class_ap: dict[int, float | None]
    per_class_cap: dict[int, float | None]
    map: float
    mcap: float
    portion_mcap: list[float | None] = field(default_factory=list)
    anticipation_map: list[float] = field(default_factory=list)
    anticipation_mcap: list[float] = field(default_factory=list)
    anticipation_map_avg: float | None = None
    anticipation_mcap_avg: float | None = None
    chunk_duration: float = 0.25

    def lines(self) -> list[str]:
        out = [f"map: {self.map:.6f}", f"mcap: {self.mcap:.6f}"]
        for c in sorted(self.per_class_ap):
            ap = self.per_class_ap[c]
            out.append(f"ap[{c}]: " + ("skipped" if ap is None else f"{ap:.6f}"))
        for c in sorted(self.per_class_cap):
            cap = self.per_class_cap[c]
            out.append(f"cap[{c}]: " + ("skipped" if cap is None else f"{cap:.6f}"))
        for d, v in enumerate(self.portion_mcap):
            out.append(f"portion_mcap[{d}]: " + ("skipped" if v is None else f"{v:.6f}"))
        for i, v in enumerate(self.anticipation_map, start=1):
            out.append(f"anticipation_map[{i}]: {v:.6f}")
        for i, v in enumerate(self.anticipation_mcap, start=1):
            out.append(f"anticipation_mcap[{i}]: {v:.6f}")
        if self.anticipation_map_avg is not None:
            out.append(f"anticipation_map_avg: {self.anticipation_map_avg:.6f}")
        if self.anticipation_mcap_avg is not None:
            out.append(f"anticipation_mcap_avg: {self.anticipation_mcap_avg:.6f}")
        for i in range(1, len(self.anticipation_map) + 1):
            out.append(f"anticipation_seconds[{i}]: {i * self.chunk_duration:.2f}")
        return out

    def to_text(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def to_table(self) -> str:
        """Machine-readable key<TAB>value table."""
        rows = ["key\tvalue"]
        for line in self.lines():
            key, value = line.split(": ", 1)
            rows.append(f"{key}\t{value}")
        return "\n".join(rows) + "\n"


def build_report(frames: FrameScores, instances: list[Instance],
                 predictions: list[WindowPrediction] | None,
                 label_tracks: dict[str, LabelTrack] | None, horizon: int,
                 chunk_duration: float = 0.25, w: float | None = None) -> EvalReport:
    per_ap = per_class_ap(frames, calibrated=False)
    per_cap = per_class_ap(frames, calibrated=True, w=w)
    report = EvalReport(
        per_class_ap=per_ap,
        per_class_cap=per_cap,
        map=mean_over_classes(per_ap),
        mcap=mean_over_classes(per_cap),
        portion_mcap=portion_mcap(frames, instances, w=w),
        chunk_duration=chunk_duration,
    )
    if predictions and label_tracks and horizon:
        report.anticipation_map, report.anticipation_map_avg = anticipation_eval(
            predictions, label_tracks, horizon, calibrated=False)
        report.anticipation_mcap, report.anticipation_mcap_avg = anticipation_eval(
            predictions, label_tracks, horizon, calibrated=True, w=w)
    return report
