"""Single-threaded, deterministic SGD training on a :class:`DeskDataset`."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from ..rsa import ActivationMatrix, TeacherSpec, candidate_rdms
from ..space import INPUT, LayerSpec, LayeredCnnGenome
from .dataset import DeskDataset, Split
from .network import CellLayout, build_network

EVAL_CHUNK = 256


@dataclass(frozen=True)
class TrainBudget:
    """Step budgets and optimiser settings.

    The premature budget defaults to 1/8 of the mature one.  Premature
    training uses a constant learning rate; mature training divides it by 10
    at 1/3 and 2/3 of the mature steps.
    """

    mature_steps: int = 160
    premature_steps: int | None = None
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.premature_steps is None:
            object.__setattr__(self, "premature_steps", max(1, self.mature_steps // 8))
        if not 0 <= self.premature_steps < self.mature_steps:
            raise ValueError(
                f"premature budget ({self.premature_steps}) must be below the mature budget ({self.mature_steps})"
            )
        if self.batch_size < 1 or self.lr <= 0:
            raise ValueError("batch_size and lr must be positive")

    @property
    def premature_examples(self) -> int:
        return self.premature_steps * self.batch_size

    @property
    def mature_examples(self) -> int:
        return self.mature_steps * self.batch_size

    def lr_at(self, step: int, mature: bool) -> float:
        if not mature:
            return self.lr
        decays = sum(step >= (self.mature_steps * k) // 3 for k in (1, 2))
        return self.lr * 0.1**decays

    def to_dict(self) -> dict:
        return {
            "mature_steps": self.mature_steps,
            "premature_steps": self.premature_steps,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "momentum": self.momentum,
            "nesterov": self.nesterov,
            "weight_decay": self.weight_decay,
        }


@dataclass
class Snapshot:
    step: int
    accuracy: float
    activations: dict[str, ActivationMatrix]
    probe_predictions: np.ndarray


@dataclass
class EvalResult:
    ok: bool
    p: float  # validation accuracy at the premature budget
    activations: dict[str, ActivationMatrix]
    mature_accuracy: float | None
    steps: int
    examples: int
    wall_time: float
    losses: tuple[float, ...] = ()
    diagnostic: str = ""
    snapshots: dict[int, Snapshot] = field(default_factory=dict)
    probe_predictions: np.ndarray | None = None


def _tensors(split: Split):
    return torch.from_numpy(split.images), torch.from_numpy(split.labels)


@torch.no_grad()
def accuracy(model: nn.Module, split: Split) -> float:
    """Top-1 accuracy in evaluation mode."""
    return float(np.mean(predict(model, split.images) == split.labels))


@torch.no_grad()
def predict(model: nn.Module, images: np.ndarray) -> np.ndarray:
    was_training = model.training
    model.eval()
    x = torch.from_numpy(images)
    out = [model(x[i : i + EVAL_CHUNK]).argmax(dim=1) for i in range(0, len(x), EVAL_CHUNK)]
    model.train(was_training)
    return torch.cat(out).numpy()


@torch.no_grad()
def capture_activations(model: nn.Module, dataset: DeskDataset) -> tuple[dict[str, ActivationMatrix], np.ndarray]:
    """Flattened per-layer probe responses (evaluation mode) and the probe predictions."""
    was_training = model.training
    model.eval()
    probe = dataset.probe
    x = torch.from_numpy(probe.images)
    per_layer: list[list[torch.Tensor]] = []
    preds = []
    for i in range(0, len(x), EVAL_CHUNK):
        logits, layers = model(x[i : i + EVAL_CHUNK], capture=True)
        preds.append(logits.argmax(dim=1))
        if not per_layer:
            per_layer = [[] for _ in layers]
        for store, t in zip(per_layer, layers):
            store.append(t.flatten(1))
    model.train(was_training)
    cats = dataset.probe_categories()
    acts = {
        name: ActivationMatrix(torch.cat(chunks).double().numpy(), probe.ids, cats)
        for name, chunks in zip(model.layer_names, per_layer)
    }
    return acts, torch.cat(preds).numpy()


def _init_network(genome, dataset: DeskDataset, seed: int, layout: CellLayout | None) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build_network(genome, dataset.input_shape, dataset.num_classes, layout)


def train(
    network,
    dataset: DeskDataset,
    budget: TrainBudget,
    seed: int = 0,
    stop_at: str = "premature",
    capture_steps: Iterable[int] = (),
    layout: CellLayout | None = None,
) -> EvalResult:
    """Train and evaluate.

    ``network`` is a genome (built and initialised from ``seed``) or an
    already constructed module.  Premature activations and accuracy are
    captured en route when ``stop_at == "mature"``, so one mature run also
    yields the premature result.  ``capture_steps`` adds extra snapshots.
    A non-finite loss ends training with ``ok=False``.
    """
    if stop_at not in ("premature", "mature"):
        raise ValueError(f"stop_at must be 'premature' or 'mature', got {stop_at!r}")
    mature = stop_at == "mature"
    total = budget.mature_steps if mature else budget.premature_steps
    wanted = {int(s) for s in capture_steps} | {budget.premature_steps}
    if any(s < 0 or s > total for s in wanted):
        raise ValueError(f"capture steps must lie in [0, {total}]")

    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    start = time.perf_counter()
    try:
        model = network if isinstance(network, nn.Module) else _init_network(network, dataset, seed, layout)
        model.train()
        opt = torch.optim.SGD(
            model.parameters(),
            lr=budget.lr,
            momentum=budget.momentum,
            nesterov=budget.nesterov and budget.momentum > 0,
            weight_decay=budget.weight_decay,
        )
        x_train, y_train = _tensors(dataset.train)
        order = _batch_order(len(y_train), budget.batch_size, total, seed)
        snapshots: dict[int, Snapshot] = {}
        losses: list[float] = []

        def snap(step):
            acts, preds = capture_activations(model, dataset)
            snapshots[step] = Snapshot(step, accuracy(model, dataset.val), acts, preds)

        for step in range(total):
            if step in wanted:
                snap(step)
            for group in opt.param_groups:
                group["lr"] = budget.lr_at(step, mature)
            idx = torch.from_numpy(order[step])
            loss = F.cross_entropy(model(x_train[idx]), y_train[idx])
            value = loss.item()
            if not math.isfinite(value):
                return EvalResult(
                    False, math.nan, {}, None, step + 1, (step + 1) * budget.batch_size,
                    time.perf_counter() - start, tuple(losses), f"non-finite loss {value} at step {step}",
                )
            losses.append(value)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        if total in wanted:
            snap(total)
        pre = snapshots[budget.premature_steps]
        mature_acc = accuracy(model, dataset.val) if mature else None
        return EvalResult(
            ok=True,
            p=pre.accuracy,
            activations=pre.activations,
            mature_accuracy=mature_acc,
            steps=total,
            examples=total * budget.batch_size,
            wall_time=time.perf_counter() - start,
            losses=tuple(losses),
            snapshots=snapshots,
            probe_predictions=pre.probe_predictions,
        )
    finally:
        torch.set_num_threads(threads)


def _batch_order(n: int, batch: int, steps: int, seed: int) -> np.ndarray:
    """Minibatch indices per step: consecutive slices of per-epoch permutations."""
    rng = np.random.default_rng([seed, 0xBA7C])
    need = steps * batch
    idx = np.concatenate([rng.permutation(n) for _ in range(-(-need // n))]) if need else np.zeros(0, np.int64)
    return idx[:need].reshape(steps, batch).astype(np.int64)


# ---------------------------------------------------------------------------
# desk teacher

TEACHER_STAGES = 3
TEACHER_LAYERS_PER_STAGE = 4
TEACHER_FILTERS = (32, 64, 128)


def teacher_genome() -> LayeredCnnGenome:
    """12-layer 3x3 ReLU/BN chain in three stages; stages 2 and 3 open with stride 2."""
    layers = []
    for s in range(TEACHER_STAGES):
        for i in range(TEACHER_LAYERS_PER_STAGE):
            stride = 2 if (s > 0 and i == 0) else 1
            layers.append(LayerSpec(TEACHER_FILTERS[s], 3, 3, stride, "relu", "batchnorm"))
    edges = frozenset((i, i + 1) for i in range(INPUT, len(layers)))
    return LayeredCnnGenome(tuple(layers), edges)


@dataclass
class DeskTeacher:
    spec: TeacherSpec
    accuracy: float
    result: EvalResult


def make_desk_teacher(
    dataset: DeskDataset,
    seed: int = 0,
    budget: TrainBudget | None = None,
    mode: str = "per-input",
    subsample_size: int | None = 512,
) -> DeskTeacher:
    """Train the reference chain to maturity and emit one RDM per stage end."""
    budget = budget or TrainBudget(mature_steps=320, batch_size=32, lr=0.05)
    result = train(teacher_genome(), dataset, budget, seed, stop_at="mature", capture_steps=[budget.mature_steps])
    if not result.ok:
        raise RuntimeError(f"teacher training failed: {result.diagnostic}")
    acts = result.snapshots[budget.mature_steps].activations
    ends = [f"layer{(s + 1) * TEACHER_LAYERS_PER_STAGE}" for s in range(TEACHER_STAGES)]
    stage_acts = {f"L{s + 1}": acts[name] for s, name in enumerate(ends)}
    rdms = candidate_rdms(stage_acts, mode, subsample_size, seed)
    return DeskTeacher(TeacherSpec.from_rdms(rdms, "internal-model"), result.mature_accuracy, result)
