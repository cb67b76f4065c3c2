"""Brute-force ranking-metric oracles: explicit rank loops, no sorting tricks."""

from __future__ import annotations


def _rank_order(scores) -> list[int]:
    """Repeatedly pick the highest remaining score, earliest index on ties."""
    remaining = list(range(len(scores)))
    order = []
    while remaining:
        best = remaining[0]
        for i in remaining[1:]:
            if scores[i] > scores[best]:
                best = i
        order.append(best)
        remaining.remove(best)
    return order


def brute_force_ap(scores, positives) -> float:
    order = _rank_order(scores)
    tp = 0
    precision_at_positive = []
    for rank, idx in enumerate(order, start=1):
        if positives[idx]:
            tp += 1
            precision_at_positive.append(tp / rank)
    return sum(precision_at_positive) / len(precision_at_positive)


def brute_force_cap(scores, positives, w: float | None = None) -> float:
    if w is None:
        n_pos = sum(1 for p in positives if p)
        w = (len(positives) - n_pos) / n_pos
    order = _rank_order(scores)
    tp = 0
    fp = 0
    total = 0.0
    for idx in order:
        if positives[idx]:
            tp += 1
            total += tp / (tp + fp / w)
        else:
            fp += 1
    return total / tp
