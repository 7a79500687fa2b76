"""Oracle-agreement metrics for selection strategies."""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..errors import EmptyGroupError, IncompleteGroupError
from ..pipeline import CandidateGroup
from .strategies import Selector


@dataclass
class StrategyResult:
    """Evaluation of one selector against stored oracle losses."""

    strategy: str
    agreement: float      # fraction of groups where the pick ties the argmin
    mean_regret: float    # mean loss(picked) - loss(best), always >= 0
    histogram: list[int]  # picks per slot, sums to the group count


def evaluate(selector: Selector, groups: list[CandidateGroup]) -> StrategyResult:
    """Agreement counts ties: a pick matching any loss-argmin candidate scores.

    Regret is measured against the stored losses, noisy or not; whatever
    the dataset calls truth is what the strategy is judged by.
    """
    if not groups:
        raise EmptyGroupError("no groups to evaluate")
    width = max(len(g.candidates) for g in groups)
    histogram = [0] * width
    agree = 0
    regret = 0.0
    for g in groups:
        for c in g.candidates:
            if c.loss is None:
                raise IncompleteGroupError(
                    f"candidate {c.candidate_id!r} in group {g.group_id!r} has no loss")
        picked = selector.select(g)
        losses = g.losses()
        best = min(losses)
        histogram[picked] += 1
        if losses[picked] == best:
            agree += 1
        regret += losses[picked] - best
    return StrategyResult(
        strategy=selector.name,
        agreement=agree / len(groups),
        mean_regret=regret / len(groups),
        histogram=histogram,
    )


def histogram_entropy(histogram: list[int]) -> float:
    """Shannon entropy (nats) of the selection distribution."""
    total = sum(histogram)
    if total <= 0:
        return 0.0
    h = 0.0
    for count in histogram:
        if count > 0:
            p = count / total
            h -= p * math.log(p)
    return h
