"""Post-hoc comparisons between head masks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .maskgate import quantile_count, quantile_mask


class UndefinedSimilarityError(ValueError):
    """Jaccard similarity of two empty masks."""


def _bits(mask) -> np.ndarray:
    return np.asarray(mask, dtype=bool)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")


def jaccard(m1, m2) -> float:
    a, b = _bits(m1), _bits(m2)
    _same_shape(a, b)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        raise UndefinedSimilarityError("both masks are empty")
    return int(np.count_nonzero(a & b)) / union


def diff_ratio(mi, m1) -> float:
    """Hamming distance to the reference ``m1`` over the reference's head count."""
    a, ref = _bits(mi), _bits(m1)
    _same_shape(a, ref)
    active = int(np.count_nonzero(ref))
    if active == 0:
        raise ValueError("reference mask has no active heads")
    return int(np.count_nonzero(a != ref)) / active


def intersect(masks: Sequence) -> np.ndarray:
    if len(masks) < 2:
        raise ValueError("intersect needs at least two masks")
    out = _bits(masks[0]).copy()
    for m in masks[1:]:
        b = _bits(m)
        _same_shape(out, b)
        out &= b
    return out


def random_mask(n: int, h: int, cardinality: int, rng: np.random.Generator) -> np.ndarray:
    """Exactly ``cardinality`` active heads, positions drawn without replacement."""
    if not 0 <= cardinality <= n * h:
        raise ValueError(f"cardinality {cardinality} outside [0, {n * h}]")
    bits = np.zeros(n * h, dtype=bool)
    bits[rng.choice(n * h, size=cardinality, replace=False)] = True
    return bits.reshape(n, h)


@dataclass
class SimilarityMatrix:
    task_names: list[str]
    values: np.ndarray


def similarity_matrix(masks: dict[str, np.ndarray]) -> SimilarityMatrix:
    """Pairwise Jaccard over tasks in alphabetical order."""
    names = sorted(masks)
    k = len(names)
    vals = np.ones((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            vals[i, j] = vals[j, i] = jaccard(masks[names[i]], masks[names[j]])
    for i, name in enumerate(names):
        if not np.any(masks[name]):
            raise UndefinedSimilarityError(f"mask for {name} is empty")
    return SimilarityMatrix(names, vals)


@dataclass
class SweepCurve:
    q_values: list[float]
    metric_values: list[float]
    active_counts: list[int]
    sample_outputs: list[str] = field(default_factory=list)


def sweep_quantiles(logits, q_list: Sequence[float], eval_fn: Callable) -> SweepCurve:
    """Evaluate top-q masks over a grid of activation fractions.

    ``eval_fn(mask)`` returns either a metric value or a ``(metric, sample)``
    pair, where ``sample`` is a rendered decode kept for inspection.
    """
    q_list = [float(q) for q in q_list]
    if q_list != sorted(q_list):
        raise ValueError("q values must be ascending")
    total = np.asarray(getattr(logits, "values", logits)).size
    curve = SweepCurve([], [], [], [])
    for q in q_list:
        mask = quantile_mask(logits, q)
        assert int(mask.sum()) == quantile_count(q, total)
        result = eval_fn(mask)
        metric, sample = result if isinstance(result, tuple) else (result, "")
        curve.q_values.append(q)
        curve.metric_values.append(float(metric))
        curve.active_counts.append(int(mask.sum()))
        curve.sample_outputs.append(sample)
    return curve
