"""Tree-structured Parzen estimator over categorical descriptor dimensions.

Observations are split into a small good set (lowest losses) and the rest.
Each set gets a smoothed categorical density per dimension; candidates drawn
from the good-set density ``l`` are ranked by ``prod g/l`` over the
dimensions they activate, which is the same as ranking by expected
improvement.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import kernels
from .space import Genome, Space, SpaceDescriptor, decode, encode, sample_uniform

N_STARTUP = 20
N_DRAWS = 24
PRIOR_WEIGHT = 1.0
FORGET_AFTER = 25


class InsufficientHistory(ValueError):
    pass


class EvaluationError(RuntimeError):
    """Raised by an evaluator to mark a sample FAILED."""


@dataclass(frozen=True)
class Observation:
    vector: Mapping
    loss: float
    sample_id: int | None = None

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "loss": self.loss, "vector": _jsonable(self.vector)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Observation":
        return cls(dict(d["vector"]), float(d["loss"]), d.get("sample_id"))


def _jsonable(vector: Mapping) -> dict:
    return {k: (v.item() if hasattr(v, "item") else v) for k, v in vector.items()}


@dataclass
class ObservationSet:
    """Evaluated samples in arrival order, plus the ids of failed ones."""

    observations: list[Observation] = field(default_factory=list)
    failed: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.observations)

    def __iter__(self):
        return iter(self.observations)

    @property
    def n_samples(self) -> int:
        return len(self.observations) + len(self.failed)

    def losses(self) -> np.ndarray:
        return np.array([o.loss for o in self.observations], dtype=np.float64)

    def best(self) -> Observation | None:
        if not self.observations:
            return None
        return min(self.observations, key=lambda o: o.loss)  # first of equal losses

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for o in self.observations:
                fh.write(json.dumps(o.to_dict(), sort_keys=True) + "\n")
            for sid in self.failed:
                fh.write(json.dumps({"failed": sid}) + "\n")

    @classmethod
    def load(cls, path) -> "ObservationSet":
        out = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                d = json.loads(line)
                if "failed" in d:
                    out.failed.append(d["failed"])
                else:
                    out.observations.append(Observation.from_dict(d))
        return out


def n_good(n: int) -> int:
    """Good-set size ``ceil(sqrt(n) / 4)`` clamped to ``[1, n - 1]``."""
    if n < 2:
        raise InsufficientHistory(f"insufficient history: {n} observations, need >= 2")
    # smallest k with 16 k^2 >= n, in exact integer arithmetic
    k = max(1, math.isqrt(n) // 4)
    while 16 * k * k < n:
        k += 1
    while k > 1 and 16 * (k - 1) * (k - 1) >= n:
        k -= 1
    return min(max(k, 1), n - 1)


def forgetting_weights(n: int, keep: int = FORGET_AFTER) -> np.ndarray:
    """Per-observation weights for ``n`` observations of one set, oldest first.

    The ``keep`` newest observations weigh 1; an older one at age ``a``
    (the newest has age 1) weighs ``max(1/n, (n - a) / (n - keep))``.
    """
    age = n - np.arange(n)
    w = np.ones(n)
    old = age > keep
    if np.any(old):
        w[old] = np.maximum(1.0 / n, (n - age[old]) / (n - keep))
    return w


def _codes(history: Sequence[Observation], desc: SpaceDescriptor) -> np.ndarray:
    index = [{v: i for i, v in enumerate(d.choices)} for d in desc]
    out = np.full((len(history), len(desc)), -1, dtype=np.int64)
    for row, obs in enumerate(history):
        for col, dim in enumerate(desc):
            if dim.name in obs.vector:
                out[row, col] = index[col][obs.vector[dim.name]]
    return out


@dataclass(frozen=True)
class SplitDensities:
    names: tuple[str, ...]
    good: tuple[np.ndarray, ...]  # l(x), one probability vector per dimension
    bad: tuple[np.ndarray, ...]  # g(x)
    gamma: float
    n_good: int
    good_index: tuple[int, ...]  # positions in the history


def split(
    history: Sequence[Observation] | ObservationSet,
    space: Space,
    prior_weight: float = PRIOR_WEIGHT,
) -> SplitDensities:
    history = list(history)
    n = len(history)
    k = n_good(n)
    desc = space.descriptor
    losses = np.array([o.loss for o in history], dtype=np.float64)
    if not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite")
    order = np.lexsort((np.arange(n), losses))  # ties: earlier arrival first
    good_mask = np.zeros(n, dtype=bool)
    good_mask[order[:k]] = True
    codes = _codes(history, desc)
    # each set is forgotten separately, in its own arrival order
    parts = [(codes[mask], forgetting_weights(int(mask.sum()))) for mask in (good_mask, ~good_mask)]
    good, bad = [], []
    for col, dim in enumerate(desc):
        size = len(dim.choices)
        for (rows, weights), out in zip(parts, (good, bad)):
            counts = kernels.weighted_choice_counts(rows[:, col], weights, size) + prior_weight
            out.append(counts / counts.sum())
    return SplitDensities(
        tuple(desc.names()), tuple(good), tuple(bad), k / n, k, tuple(int(i) for i in sorted(order[:k]))
    )


def ei_rank(ratio: float, gamma: float) -> float:
    """Expected improvement up to a constant: ``1 / (gamma + ratio (1 - gamma))``."""
    if not ratio > 0:
        raise ValueError("ratio g/l must be positive")
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    return 1.0 / (gamma + ratio * (1.0 - gamma))


def _draw(dens: SplitDensities, desc: SpaceDescriptor, n_draws: int, rng: np.random.Generator):
    """Sample ``n_draws`` code rows from ``l`` following the condition tree."""
    dims = list(desc)
    col_of = {d.name: i for i, d in enumerate(dims)}
    u = rng.random((n_draws, len(dims)))
    codes = np.full((n_draws, len(dims)), -1, dtype=np.int64)
    for col, dim in enumerate(dims):
        if dim.parent is None:
            active = np.ones(n_draws, dtype=bool)
        else:
            pcol = col_of[dim.parent]
            parent_choices = dims[pcol].choices
            ok = np.array([c in dim.active_values for c in parent_choices])
            pcodes = codes[:, pcol]
            active = pcodes >= 0
            active[active] = ok[pcodes[active]]
        cdf = np.cumsum(dens.good[col])
        picked = np.minimum(np.searchsorted(cdf, u[:, col], side="right"), len(cdf) - 1)
        codes[active, col] = picked[active]
    return codes


def log_ratio_table(dens: SplitDensities) -> np.ndarray:
    width = max(len(p) for p in dens.good)
    table = np.zeros((len(dens.good), width))
    for i, (l, g) in enumerate(zip(dens.good, dens.bad)):
        table[i, : len(l)] = np.log(g) - np.log(l)
    return table


def suggest(
    history: Sequence[Observation] | ObservationSet,
    space: Space,
    n_draws: int = N_DRAWS,
    seed=0,
    n_startup: int = N_STARTUP,
    prior_weight: float = PRIOR_WEIGHT,
) -> Genome:
    """Next genome to evaluate; uniform until ``n_startup`` observations exist."""
    history = list(history)
    rng = np.random.default_rng(seed)
    if len(history) < max(n_startup, 2):
        return sample_uniform(space, rng)
    desc = space.descriptor
    dens = split(history, space, prior_weight)
    codes = _draw(dens, desc, n_draws, rng)
    scores = kernels.draw_log_ratio(codes, log_ratio_table(dens))
    best = int(np.argmin(scores))  # first draw wins ties
    vector = {d.name: d.choices[c] for d, c in zip(desc, codes[best]) if c >= 0}
    return decode(vector, space, fix=True)


def sample_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(index)])


def tpe_loop(
    space: Space,
    evaluate: Callable[[Genome], float],
    budget: int,
    seed: int = 0,
    history: ObservationSet | None = None,
    n_startup: int = N_STARTUP,
    n_draws: int = N_DRAWS,
    prior_weight: float = PRIOR_WEIGHT,
    on_result: Callable[[int, Genome, float | None], None] | None = None,
) -> ObservationSet:
    """Suggest, evaluate and record until ``budget`` samples have been drawn.

    ``evaluate`` returns a score to maximise (loss is ``1 - score``) or raises
    :class:`EvaluationError`.  Passing a previously returned or persisted
    ``history`` resumes the loop exactly where it stopped.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    history = history if history is not None else ObservationSet()
    while history.n_samples < budget:
        index = history.n_samples
        genome = suggest(history.observations, space, n_draws, sample_seed(seed, index), n_startup, prior_weight)
        try:
            score = float(evaluate(genome))
        except EvaluationError:
            history.failed.append(index)
            score = None
        else:
            history.observations.append(Observation(encode(genome, space), 1.0 - score, index))
        if on_result is not None:
            on_result(index, genome, score)
    return history
