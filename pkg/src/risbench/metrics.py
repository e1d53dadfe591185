"""Ranking metrics for judged result lists.

A ranking is the ordered relevance of one query's results; index ``i`` holds
the judgment for position ``i + 1``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Optional, Sequence, Union

from risbench.errors import EmptyInput, InvalidCutoff

log = logging.getLogger(__name__)

CUTOFFS = tuple(range(1, 11))


@dataclass(frozen=True)
class JudgedRanking:
    relevance: tuple[bool, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "relevance", tuple(bool(r) for r in self.relevance))

    @property
    def retrieved_count(self) -> int:
        return len(self.relevance)

    @property
    def first_relevant_rank(self) -> Optional[int]:
        for i, rel in enumerate(self.relevance):
            if rel:
                return i + 1
        return None


RankingLike = Union[JudgedRanking, Sequence[bool]]


def _ranking(r: RankingLike) -> JudgedRanking:
    return r if isinstance(r, JudgedRanking) else JudgedRanking(tuple(r))


def precision_at_k(r: RankingLike, k: int) -> float:
    """Relevant fraction of the first ``k`` results.

    When ``k`` reaches or exceeds the number retrieved, the denominator is the
    retrieved count instead of ``k``. An empty ranking scores 0.
    """
    if k < 1:
        raise InvalidCutoff(f"cutoff must be >= 1, got {k}")
    rel = _ranking(r).relevance
    if not rel:
        return 0.0
    if k < len(rel):
        return sum(rel[:k]) / k
    return sum(rel) / len(rel)


def binary_cost(rank: Optional[int], c: int) -> int:
    return int(rank is not None and rank <= c)


@dataclass(frozen=True)
class QueryOutcome:
    """One query's contribution to a document's retrievability."""

    rank: Optional[int]
    weight: float = 1.0

    def __post_init__(self) -> None:
        if self.weight < 0:
            raise ValueError("opportunity weight must be non-negative")
        if self.rank is not None and self.rank < 1:
            raise ValueError("ranks are 1-based")


def retrievability(outcomes: Iterable[QueryOutcome], c: int) -> float:
    if c < 1:
        raise InvalidCutoff(f"cutoff must be >= 1, got {c}")
    return float(sum(o.weight * binary_cost(o.rank, c) for o in outcomes))


def reciprocal_rank(r: RankingLike) -> float:
    rank = _ranking(r).first_relevant_rank
    return 0.0 if rank is None else 1.0 / rank


def mrr(rankings: Sequence[RankingLike]) -> float:
    if len(rankings) == 0:
        raise EmptyInput("mrr needs at least one ranking")
    return math.fsum(reciprocal_rank(r) for r in rankings) / len(rankings)


@dataclass(frozen=True)
class Stat:
    mean: float
    se: float
    n: int


def mean_with_standard_error(samples: Sequence[float]) -> tuple[float, float]:
    """Sample mean and its standard error (sample std with n - 1, over sqrt(n))."""
    n = len(samples)
    if n == 0:
        raise EmptyInput("no samples")
    mean = math.fsum(samples) / n
    if n == 1:
        return mean, 0.0
    var = math.fsum((x - mean) ** 2 for x in samples) / (n - 1)
    return mean, math.sqrt(var) / math.sqrt(n)


def _stat(samples: Sequence[float]) -> Stat:
    mean, se = mean_with_standard_error(samples)
    return Stat(mean, se, len(samples))


@dataclass(frozen=True)
class MetricSeries:
    key: tuple
    precision_at_k: dict[int, Stat] = field(default_factory=dict)
    retrievability_at_c: dict[int, Stat] = field(default_factory=dict)
    mrr: Optional[Stat] = None


def summarize(key: tuple, rankings: Sequence[RankingLike], cutoffs: Sequence[int] = CUTOFFS) -> MetricSeries:
    rankings = [_ranking(r) for r in rankings]
    if not rankings:
        raise EmptyInput(f"group {key} has no rankings")
    firsts = [r.first_relevant_rank for r in rankings]
    return MetricSeries(
        key=key,
        precision_at_k={k: _stat([precision_at_k(r, k) for r in rankings]) for k in cutoffs},
        # each query targets exactly one document (its own upload) with weight 1
        retrievability_at_c={c: _stat([retrievability([QueryOutcome(f)], c) for f in firsts]) for c in cutoffs},
        mrr=_stat([reciprocal_rank(r) for r in rankings]),
    )


def aggregate_series(
    groups: Mapping[Hashable, Sequence[RankingLike]],
    cutoffs: Sequence[int] = CUTOFFS,
    include_empty: bool = False,
) -> tuple[dict, list]:
    """Summarize each group of rankings.

    By default only queries that returned results are averaged. Groups left
    empty are skipped and reported in the second return value.

    Returns:
        ``(series_by_key, skipped_keys)``, keys in sorted order.
    """
    out: dict = {}
    skipped: list = []
    for key in sorted(groups):
        rankings = [_ranking(r) for r in groups[key]]
        if not include_empty:
            rankings = [r for r in rankings if r.retrieved_count > 0]
        if not rankings:
            log.warning("skipping empty metric group %s", key)
            skipped.append(key)
            continue
        out[key] = summarize(key, rankings, cutoffs)
    return out, skipped
