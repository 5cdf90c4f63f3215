"""Discrete architecture spaces: layered CNNs, convolutional cells and the
enumerable micro space.

Every space exposes a flat, ordered list of categorical :class:`Dimension`
objects (its descriptor).  A dimension may be conditional on an earlier
dimension, e.g. ``layer3.filters`` is only active when ``num_layers >= 3``.
Search drivers work on descriptor vectors (``dict`` name -> value) and use
:func:`decode` to turn them back into genomes.
"""

from __future__ import annotations

import functools
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

FILTER_CHOICES = (32, 64, 128)
KERNEL_CHOICES = (1, 3, 5, 7)
STRIDE_CHOICES = (1, 2)
ACTIVATION_CHOICES = ("identity", "relu")
NORMALIZATION_CHOICES = ("none", "batchnorm")
LAYER_FIELDS = ("filters", "kernel_h", "kernel_w", "stride", "activation", "normalization")

CELL_OPS = (
    "identity",
    "avgpool3x3",
    "maxpool3x3",
    "dilatedconv3x3",
    "conv1x7_7x1",
    "sepconv3x3",
    "sepconv5x5",
    "sepconv7x7",
)

INPUT = 0  # source index of the network input in layered connections
DEFAULT_ENUMERATION_CAP = 10**6


class SpaceError(ValueError):
    """Raised for malformed spaces, vectors or genome records."""


class DecodeError(SpaceError):
    pass


class CardinalityError(SpaceError):
    def __init__(self, cardinality: int, cap: int):
        super().__init__(f"space cardinality {cardinality} exceeds enumeration cap {cap}")
        self.cardinality = cardinality
        self.cap = cap


# ---------------------------------------------------------------------------
# genomes


@dataclass(frozen=True)
class LayerSpec:
    filters: int
    kernel_h: int
    kernel_w: int
    stride: int
    activation: str
    normalization: str

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in LAYER_FIELDS}


@dataclass(frozen=True)
class LayeredCnnGenome:
    """A chain-ordered CNN; ``connections`` holds ``(src, dst)`` edges where
    ``src == 0`` denotes the network input and layers are numbered from 1."""

    layers: tuple[LayerSpec, ...]
    connections: frozenset[tuple[int, int]]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def inputs_of(self, dst: int) -> list[int]:
        return sorted(src for src, d in self.connections if d == dst)

    def to_dict(self) -> dict:
        return {
            "kind": "layered",
            "num_layers": self.num_layers,
            "layers": [layer.to_dict() for layer in self.layers],
            "connections": [
                ["input" if src == INPUT else src, dst] for src, dst in sorted(self.connections)
            ],
        }


@dataclass(frozen=True)
class BlockSpec:
    """One two-input block.  Inputs index ``{cell-input-1, cell-input-2,
    block 1 .. k-1}`` as ``0, 1, 2 .. k``."""

    input_a: int
    input_b: int
    op_a: str
    op_b: str

    def to_dict(self) -> dict:
        return {"input_a": self.input_a, "input_b": self.input_b, "op_a": self.op_a, "op_b": self.op_b}


@dataclass(frozen=True)
class CellGenome:
    blocks: tuple[BlockSpec, ...]
    force_concat_input_1: bool = False
    force_concat_input_2: bool = False

    def output_sources(self) -> list[int]:
        """Indices (same numbering as block inputs) concatenated into the cell output."""
        consumed = set()
        for block in self.blocks:
            consumed.update((block.input_a, block.input_b))
        out = []
        if self.force_concat_input_1:
            out.append(0)
        if self.force_concat_input_2:
            out.append(1)
        out.extend(k + 2 for k in range(len(self.blocks)) if (k + 2) not in consumed)
        return out

    def to_dict(self) -> dict:
        return {
            "kind": "cell",
            "blocks": [b.to_dict() for b in self.blocks],
            "force_concat_input_1": self.force_concat_input_1,
            "force_concat_input_2": self.force_concat_input_2,
        }


Genome = Union[LayeredCnnGenome, CellGenome]


def genome_key(genome: Genome) -> str:
    """Canonical text form, usable as a dictionary key or hash input."""
    return json.dumps(genome.to_dict(), sort_keys=True, separators=(",", ":"))


def genome_from_dict(data: Mapping[str, Any]) -> Genome:
    kind = data.get("kind", "layered")
    try:
        if kind == "layered":
            layers = tuple(LayerSpec(**{k: layer[k] for k in LAYER_FIELDS}) for layer in data["layers"])
            if "num_layers" in data and data["num_layers"] != len(layers):
                raise SpaceError("num_layers does not match the number of layer records")
            edges = frozenset(
                (INPUT if src == "input" else int(src), int(dst)) for src, dst in data["connections"]
            )
            return LayeredCnnGenome(layers, edges)
        if kind == "cell":
            blocks = tuple(
                BlockSpec(int(b["input_a"]), int(b["input_b"]), b["op_a"], b["op_b"]) for b in data["blocks"]
            )
            return CellGenome(
                blocks, bool(data.get("force_concat_input_1", False)), bool(data.get("force_concat_input_2", False))
            )
    except (KeyError, TypeError) as exc:
        raise SpaceError(f"malformed genome record: {exc!r}") from exc
    raise SpaceError(f"unknown genome kind {kind!r}")


def write_genomes(path, genomes: Iterable[Genome]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for g in genomes:
            fh.write(genome_key(g) + "\n")
            n += 1
    return n


def read_genomes(path) -> list[Genome]:
    with open(path, encoding="utf-8") as fh:
        return [genome_from_dict(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# descriptors


@dataclass(frozen=True)
class Dimension:
    name: str
    choices: tuple
    parent: str | None = None
    active_values: frozenset | None = None

    def is_active(self, vector: Mapping[str, Any]) -> bool:
        if self.parent is None:
            return True
        return self.parent in vector and vector[self.parent] in self.active_values


@dataclass(frozen=True)
class SpaceDescriptor:
    dimensions: tuple[Dimension, ...]

    def __post_init__(self):
        seen = set()
        for dim in self.dimensions:
            if dim.name in seen:
                raise SpaceError(f"duplicate dimension {dim.name!r}")
            if dim.parent is not None and dim.parent not in seen:
                raise SpaceError(f"dimension {dim.name!r} conditions on later or unknown {dim.parent!r}")
            if not dim.choices:
                raise SpaceError(f"dimension {dim.name!r} has no choices")
            seen.add(dim.name)

    def __iter__(self) -> Iterator[Dimension]:
        return iter(self.dimensions)

    def __len__(self) -> int:
        return len(self.dimensions)

    def names(self) -> list[str]:
        return [d.name for d in self.dimensions]

    def active(self, vector: Mapping[str, Any]) -> list[Dimension]:
        return [d for d in self.dimensions if d.is_active(vector)]


# ---------------------------------------------------------------------------
# spaces


def _layer_edge_name(dst: int, src: int) -> str:
    return f"layer{dst}.in.{'input' if src == INPUT else src}"


@dataclass(frozen=True)
class LayeredSpace:
    """Layered CNN space with up to ``max_layers`` layers.

    ``connectivity="free"`` searches every edge ``src -> dst`` (src < dst) as a
    binary dimension; ``"chain"`` fixes the edges to ``i-1 -> i``.
    """

    max_layers: int = 10
    filters: tuple = FILTER_CHOICES
    kernel_h: tuple = KERNEL_CHOICES
    kernel_w: tuple = KERNEL_CHOICES
    stride: tuple = STRIDE_CHOICES
    activation: tuple = ACTIVATION_CHOICES
    normalization: tuple = NORMALIZATION_CHOICES
    connectivity: str = "free"
    min_layers: int = 1
    kind: str = field(default="layered", init=False)

    def __post_init__(self):
        if not 1 <= self.min_layers <= self.max_layers:
            raise SpaceError("need 1 <= min_layers <= max_layers")
        if self.connectivity not in ("free", "chain"):
            raise SpaceError(f"unknown connectivity {self.connectivity!r}")
        for name, full in zip(
            LAYER_FIELDS,
            (FILTER_CHOICES, KERNEL_CHOICES, KERNEL_CHOICES, STRIDE_CHOICES, ACTIVATION_CHOICES, NORMALIZATION_CHOICES),
        ):
            values = tuple(getattr(self, name))
            object.__setattr__(self, name, values)
            if not values or any(v not in full for v in values) or len(set(values)) != len(values):
                raise SpaceError(f"choice set for {name} must be a non-empty subset of {full}")

    @property
    def layer_counts(self) -> tuple[int, ...]:
        return tuple(range(self.min_layers, self.max_layers + 1))

    @property
    def descriptor(self) -> SpaceDescriptor:
        return _layered_descriptor(self)

    def layer_cardinality(self, layer: int) -> int:
        n = math.prod(len(getattr(self, f)) for f in LAYER_FIELDS)
        if self.connectivity == "free":
            n *= 2**layer - 1  # non-empty incoming sets from {input, 1..layer-1}
        return n

    def cardinality(self) -> int:
        total = 0
        for count in self.layer_counts:
            total += math.prod(self.layer_cardinality(l) for l in range(1, count + 1))
        return total

    def to_dict(self) -> dict:
        out = {"kind": "micro" if isinstance(self, MicroSpace) else "layered"}
        for name in ("max_layers", "min_layers", "connectivity") + LAYER_FIELDS:
            value = getattr(self, name)
            out[name] = list(value) if isinstance(value, tuple) else value
        return out


class MicroSpace(LayeredSpace):
    """A layered space small enough to enumerate exhaustively.

    The defaults give 16 + 16**2 + 16**3 = 4368 genomes: up to three chained
    layers with four binary choices per layer.
    """

    def __init__(
        self,
        max_layers: int = 3,
        filters: Sequence[int] = (32,),
        kernel_h: Sequence[int] = (1, 3),
        kernel_w: Sequence[int] = (1, 3),
        stride: Sequence[int] = (1,),
        activation: Sequence[str] = ACTIVATION_CHOICES,
        normalization: Sequence[str] = NORMALIZATION_CHOICES,
        connectivity: str = "chain",
        min_layers: int = 1,
    ):
        super().__init__(
            max_layers=max_layers,
            filters=tuple(filters),
            kernel_h=tuple(kernel_h),
            kernel_w=tuple(kernel_w),
            stride=tuple(stride),
            activation=tuple(activation),
            normalization=tuple(normalization),
            connectivity=connectivity,
            min_layers=min_layers,
        )


@functools.lru_cache(maxsize=64)
def _layered_descriptor(space: LayeredSpace) -> SpaceDescriptor:
    dims = [Dimension("num_layers", space.layer_counts)]
    for l in range(1, space.max_layers + 1):
        active = frozenset(c for c in space.layer_counts if c >= l)
        parent = None if l <= space.min_layers else "num_layers"
        cond = None if parent is None else active
        for name in LAYER_FIELDS:
            dims.append(Dimension(f"layer{l}.{name}", getattr(space, name), parent, cond))
        if space.connectivity == "free":
            for src in range(0, l):
                dims.append(Dimension(_layer_edge_name(l, src), (False, True), parent, cond))
    return SpaceDescriptor(tuple(dims))


@dataclass(frozen=True)
class CellSpace:
    num_blocks: int = 5
    ops: tuple = CELL_OPS
    kind: str = field(default="cell", init=False)

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        if self.num_blocks < 1:
            raise SpaceError("num_blocks must be >= 1")
        if not self.ops or any(op not in CELL_OPS for op in self.ops):
            raise SpaceError(f"cell ops must be a non-empty subset of {CELL_OPS}")

    @property
    def descriptor(self) -> SpaceDescriptor:
        return _cell_descriptor(self)

    def cardinality(self) -> int:
        n = 4
        for k in range(1, self.num_blocks + 1):
            n *= (k + 1) ** 2 * len(self.ops) ** 2
        return n

    def to_dict(self) -> dict:
        return {"kind": "cell", "num_blocks": self.num_blocks, "ops": list(self.ops)}


@functools.lru_cache(maxsize=16)
def _cell_descriptor(space: CellSpace) -> SpaceDescriptor:
    dims = []
    for k in range(1, space.num_blocks + 1):
        inputs = tuple(range(k + 1))
        dims += [
            Dimension(f"block{k}.input_a", inputs),
            Dimension(f"block{k}.input_b", inputs),
            Dimension(f"block{k}.op_a", space.ops),
            Dimension(f"block{k}.op_b", space.ops),
        ]
    dims += [Dimension("force_concat_input_1", (False, True)), Dimension("force_concat_input_2", (False, True))]
    return SpaceDescriptor(tuple(dims))


Space = Union[LayeredSpace, CellSpace]


def space_from_dict(data: Mapping[str, Any]) -> Space:
    data = dict(data)
    kind = data.pop("kind", "layered")
    try:
        if kind == "cell":
            return CellSpace(**data)
        if kind == "micro":
            return MicroSpace(**data)
        if kind == "layered":
            return LayeredSpace(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})
    except TypeError as exc:
        raise SpaceError(f"bad space parameters: {exc}") from exc
    raise SpaceError(f"unknown space kind {kind!r}")


# ---------------------------------------------------------------------------
# validation


def validate(genome: Genome, space: Space | None = None) -> list[str]:
    """Return every violated invariant of ``genome`` (empty list when valid).

    Without ``space`` the values are checked against the full choice sets.
    """
    if isinstance(genome, LayeredCnnGenome):
        return _validate_layered(genome, space)
    if isinstance(genome, CellGenome):
        return _validate_cell(genome, space)
    return [f"unknown genome type {type(genome).__name__}"]


def _validate_layered(genome: LayeredCnnGenome, space) -> list[str]:
    problems = []
    n = genome.num_layers
    ref = space if isinstance(space, LayeredSpace) else LayeredSpace(max_layers=max(n, 1))
    if n < ref.min_layers or n > ref.max_layers:
        problems.append(f"num_layers {n} outside [{ref.min_layers}, {ref.max_layers}]")
    for l, layer in enumerate(genome.layers, start=1):
        for name in LAYER_FIELDS:
            value = getattr(layer, name)
            if value not in getattr(ref, name):
                problems.append(f"layer {l}: {name}={value!r} not in {getattr(ref, name)}")
    for src, dst in sorted(genome.connections):
        if src >= dst:
            problems.append(f"non-topological edge ({src}, {dst})")
        elif dst < 1 or dst > n:
            problems.append(f"edge ({src}, {dst}) targets a missing layer")
        elif src < 0:
            problems.append(f"edge ({src}, {dst}) has an invalid source")
    for l in range(1, n + 1):
        if not any(d == l and s < d for s, d in genome.connections):
            problems.append(f"layer {l} has no incoming edge")
    if isinstance(space, LayeredSpace) and space.connectivity == "chain":
        if genome.connections != frozenset((l - 1, l) for l in range(1, n + 1)):
            problems.append("connections differ from the fixed chain")
    return problems


def _validate_cell(genome: CellGenome, space) -> list[str]:
    problems = []
    ops = space.ops if isinstance(space, CellSpace) else CELL_OPS
    if isinstance(space, CellSpace) and len(genome.blocks) != space.num_blocks:
        problems.append(f"expected {space.num_blocks} blocks, got {len(genome.blocks)}")
    if not genome.blocks:
        problems.append("cell has no blocks")
    for k, block in enumerate(genome.blocks, start=1):
        for label, idx in (("input_a", block.input_a), ("input_b", block.input_b)):
            if idx < 0:
                problems.append(f"block {k}: {label}={idx} is negative")
            elif idx > k:
                problems.append(f"block {k}: forward reference {label}={idx} (block {idx - 1})")
        for label, op in (("op_a", block.op_a), ("op_b", block.op_b)):
            if op not in ops:
                problems.append(f"block {k}: {label}={op!r} is not an allowed operation")
    return problems


def repair(genome: LayeredCnnGenome) -> LayeredCnnGenome:
    """Give every layer without incoming edges one from the nearest earlier layer."""
    edges = set(genome.connections)
    for l in range(1, genome.num_layers + 1):
        if not any(d == l for _, d in edges):
            edges.add((l - 1, l))
    return LayeredCnnGenome(genome.layers, frozenset(edges))


# ---------------------------------------------------------------------------
# encode / decode


def encode(genome: Genome, space: Space | None = None) -> dict:
    if isinstance(genome, LayeredCnnGenome):
        vec: dict = {"num_layers": genome.num_layers}
        free = not (isinstance(space, LayeredSpace) and space.connectivity == "chain")
        for l, layer in enumerate(genome.layers, start=1):
            for name in LAYER_FIELDS:
                vec[f"layer{l}.{name}"] = getattr(layer, name)
            if free:
                for src in range(0, l):
                    vec[_layer_edge_name(l, src)] = (src, l) in genome.connections
        return vec
    vec = {}
    for k, b in enumerate(genome.blocks, start=1):
        vec[f"block{k}.input_a"] = b.input_a
        vec[f"block{k}.input_b"] = b.input_b
        vec[f"block{k}.op_a"] = b.op_a
        vec[f"block{k}.op_b"] = b.op_b
    vec["force_concat_input_1"] = genome.force_concat_input_1
    vec["force_concat_input_2"] = genome.force_concat_input_2
    return vec


def decode(vector: Mapping[str, Any], space: Space, fix: bool = False) -> Genome:
    """Inverse of :func:`encode`.

    Raises :class:`DecodeError` when an active dimension is missing, an
    inactive one is assigned, or a value is outside its choice set.  With
    ``fix=True`` layers left without inputs are repaired instead of rejected.
    """
    desc = space.descriptor
    known = {d.name for d in desc}
    unknown = set(vector) - known
    if unknown:
        raise DecodeError(f"unknown dimensions {sorted(unknown)}")
    for dim in desc:
        if dim.is_active(vector):
            if dim.name not in vector:
                raise DecodeError(f"missing active dimension {dim.name!r}")
            if vector[dim.name] not in dim.choices:
                raise DecodeError(f"{dim.name}={vector[dim.name]!r} not in {dim.choices}")
        elif dim.name in vector:
            raise DecodeError(f"inactive dimension {dim.name!r} is assigned")
    if isinstance(space, CellSpace):
        blocks = tuple(
            BlockSpec(vector[f"block{k}.input_a"], vector[f"block{k}.input_b"], vector[f"block{k}.op_a"], vector[f"block{k}.op_b"])
            for k in range(1, space.num_blocks + 1)
        )
        return CellGenome(blocks, bool(vector["force_concat_input_1"]), bool(vector["force_concat_input_2"]))
    n = vector["num_layers"]
    layers = tuple(LayerSpec(*(vector[f"layer{l}.{name}"] for name in LAYER_FIELDS)) for l in range(1, n + 1))
    if space.connectivity == "chain":
        edges = frozenset((l - 1, l) for l in range(1, n + 1))
    else:
        edges = frozenset((src, l) for l in range(1, n + 1) for src in range(l) if vector[_layer_edge_name(l, src)])
    genome = LayeredCnnGenome(layers, edges)
    if fix:
        genome = repair(genome)
    else:
        bad = [p for p in _validate_layered(genome, space) if "no incoming" in p]
        if bad:
            raise DecodeError("; ".join(bad))
    return genome


# ---------------------------------------------------------------------------
# sampling and enumeration


def sample_vector(space: Space, rng: np.random.Generator) -> dict:
    vec: dict = {}
    for dim in space.descriptor:
        if dim.is_active(vec):
            vec[dim.name] = dim.choices[int(rng.integers(len(dim.choices)))]
    return vec


def sample_uniform(space: Space, seed) -> Genome:
    """Draw each active dimension uniformly; deterministic in ``seed``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return decode(sample_vector(space, rng), space, fix=True)


def cardinality(space: Space) -> int:
    return space.cardinality()


def enumerate_space(space: Space, cap: int = DEFAULT_ENUMERATION_CAP) -> Iterator[Genome]:
    """Yield every valid genome exactly once, in a fixed order.

    Raises :class:`CardinalityError` (carrying the count) before yielding
    anything when the space is larger than ``cap``.
    """
    total = space.cardinality()
    if total > cap:
        raise CardinalityError(total, cap)
    return _enumerate(space)


def _enumerate(space: Space) -> Iterator[Genome]:
    desc = space.descriptor
    if isinstance(space, CellSpace):
        for values in itertools.product(*(d.choices for d in desc)):
            yield decode(dict(zip(desc.names(), values)), space)
        return
    for count in space.layer_counts:
        base = {"num_layers": count}
        dims = [d for d in desc if d.name != "num_layers" and d.is_active(base)]
        for values in itertools.product(*(d.choices for d in dims)):
            vec = dict(base)
            vec.update(zip((d.name for d in dims), values))
            try:
                yield decode(vec, space)
            except DecodeError:
                continue  # a layer with no incoming edge
