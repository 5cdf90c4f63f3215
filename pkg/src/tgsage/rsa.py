"""Representational dissimilarity matrices and teacher-guidance scores."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import kernels

DEFAULT_SUBSAMPLE = 512


class RsaError(ValueError):
    pass


@dataclass(frozen=True)
class ActivationMatrix:
    """Responses of one layer to a probe set: rows are inputs, columns features."""

    values: np.ndarray
    input_ids: tuple[str, ...]
    category_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise RsaError(f"activation matrix must be 2-D, got shape {values.shape}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "input_ids", tuple(str(i) for i in self.input_ids))
        if len(self.input_ids) != values.shape[0]:
            raise RsaError(f"{len(self.input_ids)} input ids for {values.shape[0]} rows")
        if len(set(self.input_ids)) != len(self.input_ids):
            raise RsaError("input ids must be unique")
        if self.category_ids is not None:
            cats = tuple(str(c) for c in self.category_ids)
            if len(cats) != values.shape[0]:
                raise RsaError(f"{len(cats)} category ids for {values.shape[0]} rows")
            object.__setattr__(self, "category_ids", cats)

    @property
    def n_inputs(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Rdm:
    """Symmetric, zero-diagonal dissimilarity matrix with entries in [0, 2]."""

    values: np.ndarray
    ids: tuple[str, ...]
    atol: float = field(default=0.0, repr=False, compare=False)

    def __post_init__(self):
        m = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", m)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise RsaError(f"RDM must be square, got shape {m.shape}")
        if len(self.ids) != m.shape[0]:
            raise RsaError(f"{len(self.ids)} ids for a {m.shape[0]}x{m.shape[0]} RDM")
        if not np.all(np.isfinite(m)):
            raise RsaError("RDM has non-finite entries")
        if np.any(np.abs(m - m.T) > self.atol):
            raise RsaError("RDM is not symmetric")
        if np.any(np.diag(m) != 0.0):
            raise RsaError("RDM diagonal is not zero")
        if m.min() < -self.atol or m.max() > 2.0 + self.atol:
            raise RsaError("RDM entries outside [0, 2]")

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def upper(self) -> np.ndarray:
        return self.values[np.triu_indices(self.size, k=1)]


def _subsample_columns(values: np.ndarray, size: int | None, seed) -> np.ndarray:
    n_a = values.shape[1]
    if size is not None and size < n_a:
        if size < 1:
            raise RsaError("feature subsample size must be >= 1")
        cols = np.random.default_rng(seed).choice(n_a, size=size, replace=False)
        values = values[:, cols]
    # canonical column order: a column permutation of F gives a bit-identical RDM
    order = np.lexsort(values[::-1])
    return np.ascontiguousarray(values[:, order])


def _check_rows(values: np.ndarray, ids: Sequence[str]) -> None:
    if values.shape[0] < 3:
        raise RsaError(f"need at least 3 inputs for an RDM, got {values.shape[0]}")
    flat = np.ptp(values, axis=1) == 0.0
    if np.any(flat):
        bad = ", ".join(ids[i] for i in np.flatnonzero(flat)[:5])
        raise RsaError(f"zero-variance activation row(s): {bad}")


def compute_rdm(
    activations: ActivationMatrix,
    subsample_size: int | None = DEFAULT_SUBSAMPLE,
    seed=0,
) -> Rdm:
    """RDM with entries ``1 - pearson(F_i, F_j)`` over (optionally subsampled) features.

    Columns are drawn without replacement when ``subsample_size`` is smaller
    than the number of features; ``None`` keeps every column.
    """
    values = _subsample_columns(activations.values, subsample_size, seed)
    _check_rows(values, activations.input_ids)
    return Rdm(kernels.correlation_rdm(values), activations.input_ids)


def category_means(activations: ActivationMatrix) -> tuple[np.ndarray, tuple[str, ...]]:
    """Mean activation row per category, categories in first-appearance order."""
    if activations.category_ids is None:
        raise RsaError("activation matrix has no category ids")
    order: list[str] = []
    index: dict[str, int] = {}
    for cat in activations.category_ids:
        if cat not in index:
            index[cat] = len(order)
            order.append(cat)
    codes = np.array([index[c] for c in activations.category_ids])
    sums = np.zeros((len(order), activations.n_features))
    np.add.at(sums, codes, activations.values)
    counts = np.bincount(codes, minlength=len(order)).astype(np.float64)
    return sums / counts[:, None], tuple(order)


def compute_category_rdm(
    activations: ActivationMatrix,
    subsample_size: int | None = DEFAULT_SUBSAMPLE,
    seed=0,
) -> Rdm:
    means, cats = category_means(activations)
    values = _subsample_columns(means, subsample_size, seed)
    _check_rows(values, cats)
    return Rdm(kernels.correlation_rdm(values), cats)


def rdm_similarity(a: Rdm, b: Rdm) -> float:
    """Pearson r between the strict upper triangles of two aligned RDMs."""
    if a.size != b.size:
        raise RsaError(f"RDM dimension mismatch: {a.size} vs {b.size}")
    if a.ids != b.ids:
        raise RsaError("RDMs are not aligned on the same probe ids")
    r = kernels.upper_pearson(a.values, b.values)
    if np.isnan(r):
        raise RsaError("RDM upper triangle has zero variance")
    return r


@dataclass(frozen=True)
class TeacherLayer:
    name: str
    rdm: Rdm
    provenance: str = "internal-model"  # or "external-file"


@dataclass(frozen=True)
class TeacherSpec:
    layers: tuple[TeacherLayer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise RsaError("teacher needs at least one RDM")
        ids = self.layers[0].rdm.ids
        if any(layer.rdm.ids != ids for layer in self.layers):
            raise RsaError("teacher RDMs do not share the same probe ids/order")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise RsaError("teacher layer names must be unique")

    @classmethod
    def from_rdms(cls, rdms: Mapping[str, Rdm], provenance: str = "internal-model") -> "TeacherSpec":
        return cls(tuple(TeacherLayer(name, rdm, provenance) for name, rdm in rdms.items()))

    @property
    def names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    @property
    def ids(self) -> tuple[str, ...]:
        return self.layers[0].rdm.ids


@dataclass(frozen=True)
class TgResult:
    similarities: tuple[float, ...]  # S_i, one per teacher layer
    best_layers: tuple[str, ...]  # candidate layer achieving each S_i
    tg: float


def tg_score(candidate_rdms: Mapping[str, Rdm] | Sequence[tuple[str, Rdm]], teacher: TeacherSpec) -> TgResult:
    """Best candidate-layer match per teacher layer, and their mean (TG)."""
    items = list(candidate_rdms.items() if isinstance(candidate_rdms, Mapping) else candidate_rdms)
    if not items:
        raise RsaError("candidate has no RDMs")
    sims, best = [], []
    for layer in teacher.layers:
        top, top_name = -np.inf, None
        for name, rdm in items:
            if rdm.ids != layer.rdm.ids:
                raise RsaError(f"candidate layer {name!r} is not aligned with teacher layer {layer.name!r}")
            r = rdm_similarity(layer.rdm, rdm)
            if r > top:  # first layer wins ties
                top, top_name = r, name
        sims.append(float(top))
        best.append(top_name)
    return TgResult(tuple(sims), tuple(best), float(np.mean(sims)))


def combined_score(p: float, tg: float, alpha: float = 1.0) -> float:
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    return p + alpha * tg


@dataclass(frozen=True)
class GuidanceScore:
    p: float
    similarities: tuple[float, ...]
    teacher_layers: tuple[str, ...]
    best_layers: tuple[str, ...]
    tg: float
    alpha: float
    combined: float

    def to_dict(self) -> dict:
        return {
            "P": self.p,
            "S": list(self.similarities),
            "teacher_layers": list(self.teacher_layers),
            "best_layers": list(self.best_layers),
            "TG": self.tg,
            "alpha": self.alpha,
            "combined": self.combined,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GuidanceScore":
        return cls(
            d["P"], tuple(d["S"]), tuple(d["teacher_layers"]), tuple(d["best_layers"]), d["TG"], d["alpha"], d["combined"]
        )


def candidate_rdms(
    activations: Mapping[str, ActivationMatrix] | Sequence[ActivationMatrix],
    mode: str = "per-input",
    subsample_size: int | None = DEFAULT_SUBSAMPLE,
    seed=0,
) -> dict[str, Rdm]:
    if not isinstance(activations, Mapping):
        activations = {f"layer{i}": a for i, a in enumerate(activations, start=1)}
    if mode == "per-input":
        fn = compute_rdm
    elif mode == "per-category":
        fn = compute_category_rdm
    else:
        raise RsaError(f"unknown RDM mode {mode!r}")
    return {name: fn(act, subsample_size, seed) for name, act in activations.items()}


def score_candidate(
    activations: Mapping[str, ActivationMatrix] | Sequence[ActivationMatrix],
    p: float,
    teacher: TeacherSpec,
    alpha: float = 1.0,
    mode: str = "per-input",
    subsample_size: int | None = DEFAULT_SUBSAMPLE,
    seed=0,
) -> GuidanceScore:
    rdms = candidate_rdms(activations, mode, subsample_size, seed)
    result = tg_score(rdms, teacher)
    return GuidanceScore(
        p=float(p),
        similarities=result.similarities,
        teacher_layers=tuple(teacher.names),
        best_layers=result.best_layers,
        tg=result.tg,
        alpha=float(alpha),
        combined=combined_score(float(p), result.tg, alpha),
    )
