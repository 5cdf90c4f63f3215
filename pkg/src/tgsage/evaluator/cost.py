"""Search cost accounting and post-search reranking."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

log = logging.getLogger(__name__)

MAX_COST = 2**63 - 1


def search_cost(m1: int, e1: int, m2: int, e2: int) -> int:
    """Total examples processed: ``m1 * e1 + m2 * e2``, exact."""
    for name, v in (("M1", m1), ("E1", e1), ("M2", m2), ("E2", e2)):
        if isinstance(v, bool) or int(v) != v or v < 0:
            raise ValueError(f"{name} must be a nonnegative integer, got {v!r}")
    total = int(m1) * int(e1) + int(m2) * int(e2)
    if total > MAX_COST:
        raise OverflowError(f"search cost {total} does not fit in a signed 64-bit counter")
    return total


class RerankError(RuntimeError):
    pass


@dataclass(frozen=True)
class Candidate:
    sample_id: int
    genome: object
    score: float


@dataclass
class RerankResult:
    best: Candidate
    mature_accuracy: float
    retrained: list[tuple[Candidate, float | None]] = field(default_factory=list)
    examples: int = 0


def rerank_top_k(
    history: Sequence[Candidate],
    k: int,
    mature_train: Callable[[Candidate], tuple[float, int]],
) -> RerankResult:
    """Retrain the ``k`` best-scored candidates to maturity and keep the most accurate.

    ``mature_train`` returns ``(accuracy, examples_processed)`` or raises; a
    failed retrain drops that candidate.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(history) < k:
        raise RerankError(f"history has {len(history)} evaluated samples, fewer than k={k}")
    ranked = sorted(history, key=lambda c: (-c.score, c.sample_id))[:k]
    results: list[tuple[Candidate, float | None]] = []
    examples = 0
    best, best_acc = None, -1.0
    for cand in ranked:
        try:
            acc, n = mature_train(cand)
        except Exception as exc:  # training failure shrinks the candidate set
            log.warning("rerank retrain of sample %s failed: %s", cand.sample_id, exc)
            results.append((cand, None))
            continue
        examples += int(n)
        results.append((cand, float(acc)))
        if acc > best_acc:
            best, best_acc = cand, float(acc)
    if best is None:
        raise RerankError("every rerank retrain failed")
    return RerankResult(best, best_acc, results, examples)
