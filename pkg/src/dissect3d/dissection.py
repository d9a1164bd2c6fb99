"""Core dissection math: unit thresholds, concept masks, and rankings.

Definitions implemented here:

* Per-unit thresholds are nearest-rank order statistics. For quantile level
  ``q``, the threshold of a unit is the value at 1-based rank
  ``ceil((1 - q) * N)`` of its pooled voxel activations over the selected
  samples, so the fraction of the population strictly above the threshold is
  at most ``q`` — exactly, with no interpolation.
* A unit's concept mask marks voxels whose activation strictly exceeds the
  unit threshold; a unit is enabled for a sample when its mask has at least
  one set voxel.
* The correlation score of a unit is the fraction of positive samples for
  which it is enabled. The positive set is either all fractured samples or,
  under the true-positive policy, fractured samples the upstream classifier
  scored at or above 0.5.
* The relevance of a unit for one inference is the sum of its activations
  over its masked voxels.

Rank orders are always descending score with ascending unit index breaking
ties, which keeps every artifact reproducible bit for bit.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyDataset,
    MissingPredictions,
    NoPositiveSamples,
    ShapeMismatch,
    SingleClassDataset,
)
from .manifest import DatasetIndex, SampleEntry
from .quantiles import QuantileSketch
from .tensor_io import load_tensor

DEFAULT_QUANTILE = 0.005
POLICY_GROUND_TRUTH = "gt-positive"
POLICY_TRUE_POSITIVE = "true-positive"
POLICIES = (POLICY_GROUND_TRUTH, POLICY_TRUE_POSITIVE)
ESTIMATORS = ("exact", "streaming")

_FIT_CHUNK = 8  # samples per worker unit; fixed so thread count never changes results


@dataclass(frozen=True)
class ActivationVolume:
    """Final-layer activations of one sample: K unit maps over a shared 3D grid."""

    sample_id: str
    units: np.ndarray  # (K, D, H, W)

    def __post_init__(self):
        units = np.asarray(self.units)
        if units.ndim != 4 or units.shape[0] < 1:
            raise ValueError(f"units must be (K, D, H, W) with K >= 1, got {units.shape}")
        if not np.all(np.isfinite(units)):
            raise ValueError(f"sample {self.sample_id}: activations must be finite")
        object.__setattr__(self, "units", units)

    @property
    def unit_count(self) -> int:
        return self.units.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return self.units.shape[1:]


def load_activation(entry: SampleEntry) -> ActivationVolume:
    return ActivationVolume(sample_id=entry.sample_id, units=load_tensor(entry.activation_file))


@dataclass(frozen=True)
class UnitThresholds:
    quantile_level: float
    values: np.ndarray  # (K,) float64
    population_count: np.ndarray  # (K,) int64, values pooled per unit
    estimator: str

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        object.__setattr__(
            self, "population_count", np.asarray(self.population_count, dtype=np.int64)
        )
        if not 0.0 < self.quantile_level < 1.0:
            raise ValueError("quantile level must be in (0, 1)")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if np.any(self.population_count <= 0):
            raise ValueError("thresholds must be computed over > 0 values per unit")

    @property
    def unit_count(self) -> int:
        return self.values.shape[0]

    def to_dict(self) -> dict:
        return {
            "q": self.quantile_level,
            "estimator": self.estimator,
            "units": [
                {"k": k, "threshold": float(self.values[k]), "population": int(self.population_count[k])}
                for k in range(self.unit_count)
            ],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "UnitThresholds":
        units = sorted(payload["units"], key=lambda u: u["k"])
        if [u["k"] for u in units] != list(range(len(units))):
            raise ValueError("threshold units must cover 0..K-1")
        return cls(
            quantile_level=float(payload["q"]),
            values=np.array([u["threshold"] for u in units], dtype=np.float64),
            population_count=np.array([u["population"] for u in units], dtype=np.int64),
            estimator=str(payload["estimator"]),
        )


@dataclass(frozen=True)
class MaskVolume:
    unit: int
    mask: np.ndarray  # bool, same spatial shape as the unit map


@dataclass(frozen=True)
class EnabledUnitSet:
    sample_id: str | None
    units: frozenset[int]

    def __contains__(self, unit: int) -> bool:
        return unit in self.units


@dataclass(frozen=True)
class CorrelationRanking:
    policy: str
    positive_count: int
    scores: np.ndarray  # (K,) float64, fraction of positives enabling the unit
    order: np.ndarray  # unit indices, best first

    def __post_init__(self):
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))
        object.__setattr__(self, "order", np.asarray(self.order, dtype=np.int64))

    @property
    def unit_count(self) -> int:
        return self.scores.shape[0]

    def rank_of(self, unit: int) -> int:
        """1-based rank of a unit (1 = most correlated)."""
        return int(np.nonzero(self.order == unit)[0][0]) + 1

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "positive_count": self.positive_count,
            "units": [
                {"k": int(k), "c": float(self.scores[k]), "rank": rank}
                for rank, k in enumerate(self.order, start=1)
            ],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "CorrelationRanking":
        rows = sorted(payload["units"], key=lambda u: u["rank"])
        if [row["rank"] for row in rows] != list(range(1, len(rows) + 1)):
            raise ValueError("ranking must carry ranks 1..K exactly once")
        if sorted(row["k"] for row in rows) != list(range(len(rows))):
            raise ValueError("ranking units must cover 0..K-1")
        scores = np.zeros(len(rows))
        order = np.zeros(len(rows), dtype=np.int64)
        for i, row in enumerate(rows):
            order[i] = row["k"]
            scores[row["k"]] = row["c"]
        return cls(
            policy=str(payload["policy"]),
            positive_count=int(payload["positive_count"]),
            scores=scores,
            order=order,
        )


@dataclass(frozen=True)
class RelevanceRanking:
    sample_id: str
    scores: np.ndarray  # (K,) float64, masked activation sums
    order: np.ndarray  # unit indices, most relevant first

    def __post_init__(self):
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))
        object.__setattr__(self, "order", np.asarray(self.order, dtype=np.int64))

    def rank_of(self, unit: int) -> int:
        return int(np.nonzero(self.order == unit)[0][0]) + 1


@dataclass(frozen=True)
class Metrics:
    f1: float
    accuracy: float
    auc: float
    average_precision: float
    decision_threshold: float

    def to_dict(self) -> dict:
        return {
            "f1": self.f1,
            "accuracy": self.accuracy,
            "auc": self.auc,
            "average_precision": self.average_precision,
            "decision_threshold": self.decision_threshold,
        }


def rank_descending(scores: np.ndarray) -> np.ndarray:
    """Unit indices sorted by descending score, ties broken by ascending index."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(scores.shape[0]), -scores))


def nearest_rank(n: int, q: float) -> int:
    """1-based rank of the (1-q) order statistic: ceil((1 - q) * n), exactly.

    Uses rational arithmetic so no float rounding can shift the rank; the
    identity ceil(n - x) == n - floor(x) keeps the exceedance bound tight.
    """
    return n - math.floor(Fraction(q) * n)


def _fixed_chunks(entries: Sequence[SampleEntry]) -> list[Sequence[SampleEntry]]:
    return [entries[i : i + _FIT_CHUNK] for i in range(0, len(entries), _FIT_CHUNK)]


def _check_consistent(first: ActivationVolume, other: ActivationVolume) -> None:
    if other.units.shape != first.units.shape:
        raise ShapeMismatch(
            f"sample {other.sample_id} has shape {other.units.shape}, "
            f"expected {first.units.shape} like {first.sample_id}"
        )


def fit_thresholds(
    dataset: DatasetIndex,
    q: float = DEFAULT_QUANTILE,
    estimator: str = "exact",
    workers: int = 1,
    epsilon: float = 1e-3,
) -> UnitThresholds:
    """Fit per-unit top-quantile thresholds over every sample in ``dataset``.

    ``exact`` pools and sorts each unit's activations; ``streaming`` feeds
    them through a mergeable :class:`QuantileSketch` with rank error at most
    ``epsilon * N``. Samples are processed in fixed chunks and partial results
    folded in chunk order, so outputs do not depend on ``workers``.
    """
    if not 0.0 < q < 1.0:
        raise ValueError("q must be in (0, 1)")
    if estimator not in ESTIMATORS:
        raise ValueError(f"estimator must be one of {ESTIMATORS}")
    entries = dataset.entries
    if not entries:
        raise EmptyDataset("cannot fit thresholds on an empty dataset")

    chunks = _fixed_chunks(entries)
    if estimator == "exact":
        merged = _map_chunks(_load_chunk, chunks, workers)
        activations = [a for chunk in merged for a in chunk]
        first = activations[0]
        for a in activations[1:]:
            _check_consistent(first, a)
        k_units = first.unit_count
        values = np.empty(k_units, dtype=np.float64)
        n_total = len(activations) * int(np.prod(first.spatial_shape))
        rank = nearest_rank(n_total, q)
        for k in range(k_units):
            pooled = np.concatenate([a.units[k].ravel() for a in activations])
            pooled.sort()
            values[k] = pooled[rank - 1]
        counts = np.full(k_units, n_total, dtype=np.int64)
        return UnitThresholds(q, values, counts, "exact")

    sketch_chunks = _map_chunks(lambda c: _sketch_chunk(c, epsilon), chunks, workers)
    shape, sketches = sketch_chunks[0]
    for other_shape, other in sketch_chunks[1:]:
        if other_shape != shape:
            raise ShapeMismatch(f"activation shapes differ across samples: {other_shape} vs {shape}")
        for mine, theirs in zip(sketches, other):
            mine.merge(theirs)
    n_total = sketches[0].count
    rank = nearest_rank(n_total, q)
    values = np.array([s.value_at_rank(rank) for s in sketches], dtype=np.float64)
    counts = np.full(len(sketches), n_total, dtype=np.int64)
    return UnitThresholds(q, values, counts, "streaming")


def _map_chunks(fn, chunks, workers: int) -> list:
    if workers <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


def _load_chunk(entries: Sequence[SampleEntry]) -> list[ActivationVolume]:
    return [load_activation(e) for e in entries]


def _sketch_chunk(entries: Sequence[SampleEntry], epsilon: float):
    shape: tuple | None = None
    sketches: list[QuantileSketch] | None = None
    for entry in entries:
        act = load_activation(entry)
        if sketches is None:
            shape = act.units.shape
            sketches = [QuantileSketch(epsilon) for _ in range(act.unit_count)]
        elif act.units.shape != shape:
            raise ShapeMismatch(
                f"sample {entry.sample_id} has shape {act.units.shape}, expected {shape}"
            )
        for k in range(act.unit_count):
            sketches[k].update(act.units[k])
    return shape, sketches


def binarize(activation: ActivationVolume, thresholds: UnitThresholds) -> list[MaskVolume]:
    """Per-voxel strict thresholding of every unit map, in unit order."""
    if activation.unit_count != thresholds.unit_count:
        raise DimensionMismatch(
            f"activation has {activation.unit_count} units, thresholds {thresholds.unit_count}"
        )
    return [
        MaskVolume(unit=k, mask=activation.units[k] > thresholds.values[k])
        for k in range(activation.unit_count)
    ]


def enabled_units(masks: Iterable[MaskVolume], sample_id: str | None = None) -> EnabledUnitSet:
    """Units whose mask fires on at least one voxel."""
    return EnabledUnitSet(
        sample_id=sample_id,
        units=frozenset(m.unit for m in masks if bool(m.mask.any())),
    )


def positive_entries(dataset: DatasetIndex, policy: str) -> tuple[SampleEntry, ...]:
    """The positive set under a policy; see module docstring."""
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}")
    fractured = dataset.fractured_entries()
    if policy == POLICY_GROUND_TRUTH:
        return fractured
    for entry in fractured:
        if entry.predicted_prob is None:
            raise MissingPredictions(
                f"sample {entry.sample_id} has no predicted_prob; required by {policy}"
            )
    return tuple(e for e in fractured if e.predicted_prob >= 0.5)


def correlation_scores(
    dataset: DatasetIndex,
    thresholds: UnitThresholds,
    policy: str = POLICY_GROUND_TRUTH,
) -> CorrelationRanking:
    """Fraction of positive samples enabling each unit, with rank order."""
    positives = positive_entries(dataset, policy)
    if not positives:
        raise NoPositiveSamples(f"no positive samples under policy {policy!r}")
    counts = np.zeros(thresholds.unit_count, dtype=np.int64)
    for entry in positives:
        act = load_activation(entry)
        if act.unit_count != thresholds.unit_count:
            raise DimensionMismatch(
                f"sample {entry.sample_id} has {act.unit_count} units, "
                f"thresholds {thresholds.unit_count}"
            )
        # enabled <=> at least one voxel strictly above the unit threshold
        unit_max = act.units.max(axis=(1, 2, 3))
        counts += unit_max > thresholds.values
    scores = counts / len(positives)
    return CorrelationRanking(
        policy=policy,
        positive_count=len(positives),
        scores=scores,
        order=rank_descending(scores),
    )


def relevance_scores(
    activation: ActivationVolume, thresholds: UnitThresholds
) -> RelevanceRanking:
    """Masked activation sum per unit for a single inference, with rank order."""
    if activation.unit_count != thresholds.unit_count:
        raise DimensionMismatch(
            f"activation has {activation.unit_count} units, thresholds {thresholds.unit_count}"
        )
    maps = activation.units
    masks = maps > thresholds.values[:, None, None, None]
    scores = np.sum(np.where(masks, maps, 0), axis=(1, 2, 3), dtype=np.float64)
    return RelevanceRanking(
        sample_id=activation.sample_id,
        scores=scores,
        order=rank_descending(scores),
    )


def compute_metrics(dataset: DatasetIndex, decision_threshold: float = 0.5) -> Metrics:
    """Threshold metrics (F1, accuracy) plus AUC and average precision.

    The positive class is ``fractured``; a sample is predicted positive when
    its probability is >= the decision threshold. AUC integrates the ROC
    curve trapezoidally over tie groups; AP is the step-wise area under the
    precision-recall curve.
    """
    labels = []
    probs = []
    for entry in dataset:
        if entry.predicted_prob is None:
            raise MissingPredictions(f"sample {entry.sample_id} has no predicted_prob")
        labels.append(entry.fractured)
        probs.append(entry.predicted_prob)
    if not labels:
        raise EmptyDataset("no samples to score")
    y = np.array(labels, dtype=bool)
    p = np.array(probs, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassDataset("AUC/AP need both classes present")

    predicted = p >= decision_threshold
    tp = int(np.sum(predicted & y))
    fp = int(np.sum(predicted & ~y))
    fn = int(np.sum(~predicted & y))
    tn = int(np.sum(~predicted & ~y))
    accuracy = (tp + tn) / len(y)
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0

    # walk distinct scores from high to low, accumulating ROC / PR points
    order = np.argsort(-p, kind="stable")
    y_sorted = y[order]
    p_sorted = p[order]
    boundaries = np.nonzero(np.diff(p_sorted))[0]  # last index of each tie group
    group_ends = np.concatenate([boundaries, [len(p_sorted) - 1]])
    cum_tp = np.cumsum(y_sorted)[group_ends]
    cum_fp = np.cumsum(~y_sorted)[group_ends]
    tpr = np.concatenate([[0.0], cum_tp / n_pos])
    fpr = np.concatenate([[0.0], cum_fp / n_neg])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))

    precision = cum_tp / (cum_tp + cum_fp)
    recall = cum_tp / n_pos
    recall_prev = np.concatenate([[0.0], recall[:-1]])
    average_precision = float(np.sum((recall - recall_prev) * precision))

    return Metrics(
        f1=float(f1),
        accuracy=float(accuracy),
        auc=auc,
        average_precision=average_precision,
        decision_threshold=float(decision_threshold),
    )
