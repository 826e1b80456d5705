"""FedAvg averaging and personalized combination selection."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import DataShard
from .seeding import rng
from .tensor_nn import EvalReport, ModelParams, ShapeError, evaluate

NOT_CONSIDER = "not_consider"
CONSIDER_BEST = "consider_best"
THRESHOLD_FILTER = "threshold_filter"
POLICY_MODES = (NOT_CONSIDER, CONSIDER_BEST, THRESHOLD_FILTER)


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class CombinationScore:
    member_ids: tuple[int, ...]
    aggregated: ModelParams
    report: EvalReport

    @property
    def accuracy(self) -> float:
        return self.report.accuracy

    @property
    def label(self) -> str:
        return combo_label(self.member_ids)


@dataclass(frozen=True)
class SelectionPolicy:
    mode: str = NOT_CONSIDER
    threshold: float | None = None
    tie_seed: int = 0

    def __post_init__(self):
        if self.mode not in POLICY_MODES:
            raise ValueError(f"unknown selection mode {self.mode!r}")
        if (self.threshold is not None) != (self.mode == THRESHOLD_FILTER):
            raise ValueError("threshold is required for, and only for, threshold_filter")
        if self.threshold is not None and not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")


def combo_label(ids: Iterable[int]) -> str:
    return "+".join(str(i) for i in sorted(ids))


def aggregate(models: Sequence[ModelParams] | Mapping[int, ModelParams]) -> ModelParams:
    """Unweighted elementwise mean.

    A mapping is averaged in ascending-key order. The sum is taken as
    ``first + mean(w_k - first)`` so identical inputs come back bit-exact.
    """
    if isinstance(models, Mapping):
        models = [models[k] for k in sorted(models)]
    models = list(models)
    if not models:
        raise AggregationError("cannot aggregate an empty list of models")
    shapes = models[0].layer_shapes
    for m in models[1:]:
        if m.layer_shapes != shapes:
            raise ShapeError("models with different layer shapes cannot be averaged")
    pivot = models[0].values
    acc = np.zeros_like(pivot)
    for m in models[1:]:
        acc += m.values - pivot
    out = pivot + acc / len(models)
    if not np.all(np.isfinite(out)):
        raise AggregationError("aggregate produced non-finite values")
    return ModelParams(shapes, out)


def enumerate_candidates(own_id: int, available_ids: Iterable[int]) -> list[tuple[int, ...]]:
    """Own singleton plus every subset of size >= 2, by size then lexicographic."""
    ids = sorted(set(available_ids))
    if own_id not in ids:
        raise AggregationError(f"own id {own_id} not among available ids {ids}")
    out = [(own_id,)]
    for size in range(2, len(ids) + 1):
        out.extend(combinations(ids, size))
    return out


def score_combinations(
    candidates: Sequence[Sequence[int]],
    models_by_id: Mapping[int, ModelParams],
    testset: DataShard,
    threads: int = 1,
) -> list[CombinationScore]:
    cands = [tuple(sorted(set(c))) for c in candidates]
    for c in cands:
        if not c:
            raise AggregationError("empty candidate combination")
        missing = [i for i in c if i not in models_by_id]
        if missing:
            raise AggregationError(f"no model for peer id(s) {missing}")

    def score(c):
        agg = aggregate({i: models_by_id[i] for i in c})
        return CombinationScore(c, agg, evaluate(agg, testset))

    if threads > 1 and len(cands) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(score, cands))
    return [score(c) for c in cands]


def threshold_members(individual_accuracy: Mapping[int, float], threshold: float,
                      own_id: int) -> tuple[int, ...]:
    """Ids whose standalone accuracy reaches ``threshold``; own id if none do."""
    keep = tuple(sorted(i for i, acc in individual_accuracy.items() if acc >= threshold))
    return keep or (own_id,)


def select(
    scores: Sequence[CombinationScore],
    policy: SelectionPolicy,
    round: int = 0,
    *,
    individual_accuracy: Mapping[int, float] | None = None,
    own_id: int | None = None,
) -> CombinationScore:
    """Pick one scored combination.

    ``threshold_filter`` needs ``individual_accuracy`` (standalone accuracy of
    each incoming model) and ``own_id``; the survivor set must be among
    ``scores``.
    """
    if not scores:
        raise AggregationError("no scored combinations to select from")

    if policy.mode == NOT_CONSIDER:
        full = tuple(sorted({i for s in scores for i in s.member_ids}))
        return _find(scores, full)

    if policy.mode == CONSIDER_BEST:
        best = max(s.accuracy for s in scores)
        tied = [s for s in scores if s.accuracy == best]
        if len(tied) == 1:
            return tied[0]
        return tied[int(rng(policy.tie_seed, round).integers(len(tied)))]

    if individual_accuracy is None or own_id is None:
        raise AggregationError("threshold_filter needs individual_accuracy and own_id")
    return _find(scores, threshold_members(individual_accuracy, policy.threshold, own_id))


def _find(scores: Sequence[CombinationScore], members: tuple[int, ...]) -> CombinationScore:
    for s in scores:
        if s.member_ids == members:
            return s
    raise AggregationError(f"combination {combo_label(members)} was not scored")
