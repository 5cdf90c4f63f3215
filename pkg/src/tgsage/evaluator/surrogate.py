"""Deterministic surrogate benchmark for exercising search drivers without training.

The score of a genome is ``sigmoid((b + w . phi + phi^T Q phi) / sqrt(D))``
where ``phi`` is the one-hot encoding of the genome's active dimension
values and ``D`` the number of descriptor dimensions.  Synthetic probe activations mix a teacher-aligned signal with
genome-seeded noise in proportion to the score, so genomes that score
higher also look more teacher-like under RSA.
"""

from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass

import numpy as np

from ..rsa import ActivationMatrix, TeacherSpec, candidate_rdms
from ..space import Genome, MicroSpace, Space, encode, enumerate_space, genome_key


def _genome_seed(seed: int, genome: Genome, salt: int) -> np.random.SeedSequence:
    digest = hashlib.sha256(genome_key(genome).encode("utf-8")).digest()
    return np.random.SeedSequence([seed, salt, int.from_bytes(digest[:8], "little")])


@dataclass(frozen=True)
class SurrogateResult:
    p: float  # premature score (noisy when noise_scale > 0)
    mature: float  # noiseless benchmark score
    activations: dict[str, ActivationMatrix]


@dataclass(frozen=True)
class SurrogateBenchmark:
    """Seeded linear-plus-pairwise score model over a space's encoded dimensions.

    Parameters
    ----------
    space
        Any space; enumeration-based oracles need it to be small.
    seed
        Fixes every model weight and the synthetic probe set.
    pairwise_scale
        Standard deviation of pairwise interaction weights relative to the
        linear ones.
    noise_scale
        Logit-scale noise added to the premature score only, a stand-in for
        the gap between premature and mature performance.
    zero_dims
        Dimensions whose linear and pairwise weights are forced to zero.
    """

    space: Space = MicroSpace()
    seed: int = 0
    pairwise_scale: float = 0.3
    noise_scale: float = 0.0
    temperature: float = 1.0
    zero_dims: tuple[str, ...] = ()
    n_probe: int = 48
    n_features: int = 64
    n_teacher_layers: int = 3

    @functools.cached_property
    def _features(self) -> tuple[dict, int]:
        index, width = {}, 0
        for dim in self.space.descriptor:
            for value in dim.choices:
                index[(dim.name, value)] = width
                width += 1
        return index, width

    @functools.cached_property
    def _weights(self) -> tuple[float, np.ndarray, np.ndarray]:
        index, width = self._features
        rng = np.random.default_rng([self.seed, 0x5A6E])
        w = rng.normal(size=width)
        q = np.triu(rng.normal(scale=self.pairwise_scale, size=(width, width)), k=1)
        owner = [None] * width
        for (name, _), col in index.items():
            owner[col] = name
        owner = np.array(owner, dtype=object)
        same = owner[:, None] == owner[None, :]
        q[same] = 0.0  # one dimension takes a single value, so no self-pairs
        for name in self.zero_dims:
            mask = owner == name
            if not mask.any():
                raise ValueError(f"unknown dimension {name!r}")
            w[mask] = 0.0
            q[mask, :] = 0.0
            q[:, mask] = 0.0
        return float(rng.normal()), w, q

    def phi(self, genome: Genome) -> np.ndarray:
        index, width = self._features
        out = np.zeros(width)
        for name, value in encode(genome, self.space).items():
            out[index[(name, value)]] = 1.0
        return out

    def logit(self, genome: Genome) -> float:
        b, w, q = self._weights
        x = self.phi(genome)
        return float((b + w @ x + x @ q @ x) / np.sqrt(len(self.space.descriptor)))

    def score(self, genome: Genome) -> float:
        return float(1.0 / (1.0 + np.exp(-self.logit(genome) / self.temperature)))

    def premature_score(self, genome: Genome) -> float:
        if self.noise_scale == 0:
            return self.score(genome)
        z = np.random.default_rng(_genome_seed(self.seed, genome, 1)).normal()
        return float(1.0 / (1.0 + np.exp(-(self.logit(genome) + self.noise_scale * z) / self.temperature)))

    # ------------------------------------------------------------------
    # synthetic representations

    @functools.cached_property
    def _latent(self) -> tuple[np.ndarray, list[np.ndarray]]:
        rng = np.random.default_rng([self.seed, 0x7EAC])
        z = rng.normal(size=(self.n_probe, 8))
        maps = [rng.normal(size=(8, self.n_features)) for _ in range(self.n_teacher_layers)]
        return z, maps

    @property
    def probe_ids(self) -> tuple[str, ...]:
        return tuple(f"probe-{i:03d}" for i in range(self.n_probe))

    def teacher_activations(self) -> dict[str, ActivationMatrix]:
        z, maps = self._latent
        return {
            f"L{i + 1}": ActivationMatrix(np.tanh(z @ m * (0.5 + 0.5 * i)), self.probe_ids)
            for i, m in enumerate(maps)
        }

    def teacher(self) -> TeacherSpec:
        return TeacherSpec.from_rdms(candidate_rdms(self.teacher_activations(), subsample_size=None))

    def activations(self, genome: Genome, score: float) -> dict[str, ActivationMatrix]:
        """Per-layer synthetic responses: teacher signal weighted by ``score`` plus seeded noise."""
        teacher = list(self.teacher_activations().values())
        rng = np.random.default_rng(_genome_seed(self.seed, genome, 2))
        n_layers = getattr(genome, "num_layers", len(teacher))
        out = {}
        for j in range(n_layers):
            signal = teacher[min(j, len(teacher) - 1)].values
            noise = rng.normal(size=signal.shape)
            out[f"layer{j + 1}"] = ActivationMatrix(score * signal + (1.0 - score) * noise, self.probe_ids)
        return out

    def optimum(self) -> tuple[Genome, float]:
        """Best genome by enumeration (first of equal scores)."""
        best, best_score = None, -np.inf
        for g in enumerate_space(self.space):
            s = self.score(g)
            if s > best_score:
                best, best_score = g, s
        return best, best_score

    def all_scores(self) -> np.ndarray:
        return np.array([self.score(g) for g in enumerate_space(self.space)])


def evaluate_surrogate(genome: Genome, benchmark: SurrogateBenchmark) -> SurrogateResult:
    mature = benchmark.score(genome)
    p = benchmark.premature_score(genome)
    return SurrogateResult(p, mature, benchmark.activations(genome, p))
