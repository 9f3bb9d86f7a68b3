"""Path complexity scoring and top/bottom grouping.

A path's complexity is a weighted sum of its token count and its
distinct-token-type count. Ranking a bag by that score splits it into
the ``j`` most and ``j`` least complex paths; when the bag is smaller
than ``2j`` the groups overlap, and when it is no larger than ``j``
both groups are the whole bag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class ComplexityError(ValueError):
    pass


@dataclass(frozen=True)
class ComplexityWeights:
    """Weights on token count (lambda1) and token-type count (lambda2)."""

    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lambda1) and math.isfinite(self.lambda2)):
            raise ComplexityError("complexity weights must be finite")


def complexity_score(path, weights: ComplexityWeights) -> float:
    """``lambda1 * num_tokens + lambda2 * num_token_types``."""
    return weights.lambda1 * path.num_tokens + weights.lambda2 * path.num_token_types


def rank_and_group(paths, j: int, weights: ComplexityWeights) -> tuple[list[int], list[int]]:
    """Return (complex, simple) groups as original bag indices.

    Paths are sorted by complexity score, descending, with ties kept in
    original bag order; the complex group is the first min(j, m) sorted
    paths and the simple group the last min(j, m).
    """
    paths = list(paths)
    if not paths:
        raise ComplexityError("cannot rank an empty path bag")
    if j < 1:
        raise ComplexityError(f"group size must be >= 1, got {j}")
    order = sorted(
        range(len(paths)),
        key=lambda i: (-complexity_score(paths[i], weights), i),
    )
    take = min(j, len(paths))
    return order[:take], order[-take:]
