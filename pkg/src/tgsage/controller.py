"""LSTM controller trained with REINFORCE.

The controller is unrolled once per layer (or per cell block).  Step 0 sees
a zero input and emits the depth; every later step receives an embedding of
the choices made at the previous step and emits all per-layer choices from
heads shared across layers.  Layer connections are Bernoulli decisions with
probability ``sigmoid(w_src . h_i + w_dst . h_j)``.  Actions are sampled from
the softmax probabilities themselves (Boltzmann policy, temperature 1).

Forward and backward passes are written out in numpy so the gradient can be
checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .space import (
    LAYER_FIELDS,
    BlockSpec,
    CellGenome,
    CellSpace,
    LayeredCnnGenome,
    LayeredSpace,
    LayerSpec,
    repair,
)

HIDDEN = 32
LR = 1e-3
BETA1 = 0.0
BETA2 = 0.999
EPS = 1e-8
CLIP = 1.0
BASELINE_DECAY = 0.95
BATCH = 5
INIT_SCALE = 0.1


class ControllerError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# decision plans


class Plan:
    """Maps an architecture space onto controller steps and heads."""

    heads: dict[str, int]  # head name -> number of outputs
    first_heads: tuple[str, ...]
    step_heads: tuple[str, ...]
    embed_kinds: dict[str, int]  # embedding name -> one-hot width
    connections: bool = False

    def n_steps(self, first: Mapping[str, int]) -> int:
        return 0

    def valid(self, head: str, step: int) -> int:
        return self.heads[head]

    def edges(self, n_steps: int) -> list[tuple[int, int]]:
        return []

    def to_genome(self, decisions: "Decisions"):
        raise NotImplementedError


class BanditPlan(Plan):
    """A single categorical decision; the 'genome' is the arm index."""

    def __init__(self, n_arms: int):
        self.heads = {"arm": n_arms}
        self.first_heads = ("arm",)
        self.step_heads = ()
        self.embed_kinds = {}

    def to_genome(self, decisions):
        return decisions.steps[0]["arm"]


class LayeredPlan(Plan):
    def __init__(self, space: LayeredSpace):
        self.space = space
        self.heads = {"num_layers": len(space.layer_counts)}
        self.heads.update({name: len(getattr(space, name)) for name in LAYER_FIELDS})
        self.first_heads = ("num_layers",) if len(space.layer_counts) > 1 else ()
        self.step_heads = tuple(name for name in LAYER_FIELDS if self.heads[name] > 1)
        self.embed_kinds = {"first": self.heads["num_layers"], "layer": sum(self.heads[h] for h in LAYER_FIELDS)}
        self.connections = space.connectivity == "free"

    def n_steps(self, first):
        return self.space.layer_counts[first.get("num_layers", 0)]

    def edges(self, n_steps):
        if not self.connections:
            return []
        return [(src, dst) for dst in range(1, n_steps + 1) for src in range(dst)]

    def to_genome(self, decisions):
        n = self.n_steps(decisions.steps[0])
        layers = []
        for t in range(1, n + 1):
            chosen = decisions.steps[t]
            layers.append(LayerSpec(*(getattr(self.space, name)[chosen.get(name, 0)] for name in LAYER_FIELDS)))
        if self.connections:
            edges = frozenset(e for e, on in decisions.edges.items() if on)
        else:
            edges = frozenset((l - 1, l) for l in range(1, n + 1))
        return repair(LayeredCnnGenome(tuple(layers), edges))


class CellPlan(Plan):
    """Step 0 picks the force-concat flags, then one step per block."""

    def __init__(self, space: CellSpace):
        self.space = space
        b = space.num_blocks
        self.heads = {"force_concat_input_1": 2, "force_concat_input_2": 2, "input_a": b + 1, "input_b": b + 1}
        self.heads.update({"op_a": len(space.ops), "op_b": len(space.ops)})
        self.first_heads = ("force_concat_input_1", "force_concat_input_2")
        self.step_heads = ("input_a", "input_b", "op_a", "op_b")
        self.embed_kinds = {"first": 4, "layer": 2 * (b + 1) + 2 * len(space.ops)}

    def n_steps(self, first):
        return self.space.num_blocks

    def valid(self, head, step):
        if head in ("input_a", "input_b"):
            return step + 1  # block k may use inputs 0..k
        return self.heads[head]

    def to_genome(self, decisions):
        blocks = []
        for t in range(1, self.space.num_blocks + 1):
            c = decisions.steps[t]
            blocks.append(BlockSpec(c["input_a"], c["input_b"], self.space.ops[c["op_a"]], self.space.ops[c["op_b"]]))
        first = decisions.steps[0]
        return CellGenome(tuple(blocks), bool(first["force_concat_input_1"]), bool(first["force_concat_input_2"]))


def plan_for(space) -> Plan:
    if isinstance(space, Plan):
        return space
    if isinstance(space, LayeredSpace):
        return LayeredPlan(space)
    if isinstance(space, CellSpace):
        return CellPlan(space)
    raise TypeError(f"no controller plan for {type(space).__name__}")


# ---------------------------------------------------------------------------
# parameters


def init_params(plan: Plan, hidden: int = HIDDEN, embed: int | None = None, seed=0) -> dict[str, np.ndarray]:
    embed = hidden if embed is None else embed
    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)

    p = {
        "lstm1.W": u(4 * hidden, embed),
        "lstm1.U": u(4 * hidden, hidden),
        "lstm1.b": u(4 * hidden),
        "lstm2.W": u(4 * hidden, hidden),
        "lstm2.U": u(4 * hidden, hidden),
        "lstm2.b": u(4 * hidden),
    }
    for name, width in plan.embed_kinds.items():
        p[f"embed.{name}"] = u(width, embed)
    for name, size in plan.heads.items():
        if size > 1:
            p[f"head.{name}"] = u(hidden, size)
    if plan.connections:
        p["conn.src"] = u(hidden)
        p["conn.dst"] = u(hidden)
    return p


@dataclass
class Decisions:
    steps: list[dict[str, int]] = field(default_factory=list)
    edges: dict[tuple[int, int], bool] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "steps": [dict(s) for s in self.steps],
            "edges": [[s, d, int(on)] for (s, d), on in sorted(self.edges.items())],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Decisions":
        return cls([{k: int(v) for k, v in s.items()} for s in d["steps"]], {(s, t): bool(on) for s, t, on in d["edges"]})


@dataclass
class EpisodeTrace:
    decisions: Decisions
    logprobs: list[float]  # one per realised decision
    total_logprob: float
    genome: object
    reward: float | None = None
    baseline: float | None = None


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _softmax(logits, valid):
    z = logits[:valid] - logits[:valid].max()
    e = np.exp(z)
    return e / e.sum()


def _lstm_step(p, layer, x, h, c):
    W, U, b = p[f"lstm{layer}.W"], p[f"lstm{layer}.U"], p[f"lstm{layer}.b"]
    H = h.shape[0]
    z = W @ x + U @ h + b
    i = _sigmoid(z[:H])
    f = _sigmoid(z[H : 2 * H])
    o = _sigmoid(z[2 * H : 3 * H])
    g = np.tanh(z[3 * H :])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new, (x, h, c, i, f, o, g, c_new)


def _onehot_concat(plan: Plan, heads: Sequence[str], chosen: Mapping[str, int]) -> np.ndarray:
    parts = []
    for name in heads:
        v = np.zeros(plan.heads[name])
        v[chosen.get(name, 0)] = 1.0
        parts.append(v)
    return np.concatenate(parts) if parts else np.zeros(0)


def _embed_heads(plan: Plan, t: int) -> tuple[str, tuple[str, ...]]:
    """Embedding name and head order used for the input of step ``t + 1``."""
    if t == 0:
        if isinstance(plan, LayeredPlan):
            return "first", ("num_layers",)
        return "first", plan.first_heads
    if isinstance(plan, LayeredPlan):
        return "layer", LAYER_FIELDS
    return "layer", plan.step_heads


def run_episode(
    params: Mapping[str, np.ndarray],
    plan: Plan,
    rng: np.random.Generator | None = None,
    forced: Decisions | None = None,
    want_grad: bool = False,
):
    """Sample (``rng``) or replay (``forced``) one episode.

    Returns ``(decisions, logprobs, grads)``; ``grads`` is the gradient of the
    total log-probability and is only computed when ``want_grad`` is set.
    """
    H = params["lstm1.U"].shape[1]
    E = params["lstm1.W"].shape[1]
    x = np.zeros(E)
    h1 = np.zeros(H)
    c1 = np.zeros(H)
    h2 = np.zeros(H)
    c2 = np.zeros(H)
    decisions = Decisions()
    logprobs: list[float] = []
    tape = []  # per step: caches and head records
    t = 0
    n_total = None
    while True:
        h1, c1, cache1 = _lstm_step(params, 1, x, h1, c1)
        h2, c2, cache2 = _lstm_step(params, 2, h1, h2, c2)
        heads = plan.first_heads if t == 0 else plan.step_heads
        chosen: dict[str, int] = {}
        head_records = []
        for name in heads:
            valid = plan.valid(name, t)
            if valid <= 1:
                chosen[name] = 0
                continue
            logits = params[f"head.{name}"].T @ h2
            prob = _softmax(logits, valid)
            if forced is not None:
                choice = forced.steps[t][name]
            else:
                choice = int(np.searchsorted(np.cumsum(prob), rng.random(), side="right"))
                choice = min(choice, valid - 1)
            chosen[name] = choice
            logprobs.append(float(np.log(prob[choice])))
            head_records.append((name, valid, prob, choice))
        decisions.steps.append(chosen)
        tape.append((cache1, cache2, h2.copy(), head_records))
        if t == 0:
            n_total = plan.n_steps(chosen)
        if t >= n_total:
            break
        kind, order = _embed_heads(plan, t)
        onehot = _onehot_concat(plan, order, chosen)
        x = params[f"embed.{kind}"].T @ onehot
        tape[-1] = tape[-1] + ((kind, onehot),)
        t += 1

    edge_records = []
    for src, dst in plan.edges(n_total):
        s = float(params["conn.src"] @ tape[src][2] + params["conn.dst"] @ tape[dst][2])
        pr = float(_sigmoid(s))
        if forced is not None:
            on = bool(forced.edges[(src, dst)])
        else:
            on = bool(rng.random() < pr)
        decisions.edges[(src, dst)] = on
        logprobs.append(float(_log_sigmoid(s) if on else _log_sigmoid(-s)))
        edge_records.append((src, dst, pr, on))

    grads = _backward(params, plan, tape, edge_records) if want_grad else None
    return decisions, logprobs, grads


def _backward(params, plan, tape, edge_records):
    g = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
    T = len(tape)
    H = params["lstm1.U"].shape[1]
    dh2 = [np.zeros(H) for _ in range(T)]
    for src, dst, pr, on in edge_records:
        coef = (1.0 if on else 0.0) - pr
        g["conn.src"] += coef * tape[src][2]
        g["conn.dst"] += coef * tape[dst][2]
        dh2[src] += coef * params["conn.src"]
        dh2[dst] += coef * params["conn.dst"]
    for t in range(T):
        h2 = tape[t][2]
        for name, valid, prob, choice in tape[t][3]:
            dlogits = np.zeros(plan.heads[name])
            dlogits[:valid] = -prob
            dlogits[choice] += 1.0
            g[f"head.{name}"] += np.outer(h2, dlogits)
            dh2[t] += params[f"head.{name}"] @ dlogits

    dh1_next = np.zeros(H)
    dc1_next = np.zeros(H)
    dh2_next = np.zeros(H)
    dc2_next = np.zeros(H)
    dx_next = None  # gradient w.r.t. the input of step t + 1
    for t in reversed(range(T)):
        record = tape[t]
        cache1, cache2 = record[0], record[1]
        if len(record) > 4 and dx_next is not None:
            kind, onehot = record[4]
            g[f"embed.{kind}"] += np.outer(onehot, dx_next)
        dh = dh2[t] + dh2_next
        dz2, dh2_next, dc2_next, dx2 = _lstm_cell_backward(params, 2, cache2, dh, dc2_next, g)
        dh = dx2 + dh1_next
        dz1, dh1_next, dc1_next, dx1 = _lstm_cell_backward(params, 1, cache1, dh, dc1_next, g)
        dx_next = dx1
    return g


def _lstm_cell_backward(params, layer, cache, dh, dc, g):
    x, h_prev, c_prev, i, f, o, gg, c = cache
    tc = np.tanh(c)
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * gg
    dgg = dc * i
    df = dc * c_prev
    dc_prev = dc * f
    dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dgg * (1 - gg * gg)])
    W, U = params[f"lstm{layer}.W"], params[f"lstm{layer}.U"]
    g[f"lstm{layer}.W"] += np.outer(dz, x)
    g[f"lstm{layer}.U"] += np.outer(dz, h_prev)
    g[f"lstm{layer}.b"] += dz
    return dz, U.T @ dz, dc_prev, W.T @ dz


def total_logprob(params, plan, decisions: Decisions) -> float:
    return float(sum(run_episode(params, plan, forced=decisions)[1]))


def grad_logprob(params, plan, decisions: Decisions) -> dict[str, np.ndarray]:
    return run_episode(params, plan, forced=decisions, want_grad=True)[2]


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    with np.errstate(over="ignore", invalid="ignore"):  # callers check for a non-finite norm
        return float(np.sqrt(sum(float(np.sum(v * v)) for v in grads.values())))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], clip: float = CLIP) -> dict[str, np.ndarray]:
    norm = global_norm(grads)
    if norm > clip:
        return {k: v * (clip / norm) for k, v in grads.items()}
    return dict(grads)


# ---------------------------------------------------------------------------
# controller


class Controller:
    """Policy parameters, Adam state and the reward baseline.

    Parameters and optimiser moments are kept at float32 precision after
    every update so a checkpoint round trip reproduces the live state exactly.
    """

    def __init__(
        self,
        space,
        hidden: int = HIDDEN,
        seed=0,
        lr: float = LR,
        beta1: float = BETA1,
        beta2: float = BETA2,
        eps: float = EPS,
        clip: float = CLIP,
        baseline_decay: float = BASELINE_DECAY,
    ):
        self.plan = plan_for(space)
        self.hidden = hidden
        self.lr, self.beta1, self.beta2, self.eps, self.clip = lr, beta1, beta2, eps, clip
        self.baseline_decay = baseline_decay
        self.params = _quantize(init_params(self.plan, hidden, seed=seed))
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.step = 0
        self.baseline: float | None = None

    def sample_episode(self, seed) -> EpisodeTrace:
        return sample_episode(self.params, self.plan, seed)

    def update(self, batch: Sequence[EpisodeTrace]) -> dict:
        return reinforce_update(self, batch)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"param.{k}": v for k, v in self.params.items()}
        out.update({f"adam.m.{k}": v for k, v in self.m.items()})
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        out["adam.step"] = np.array([self.step], dtype=np.float32)
        out["baseline"] = np.array([np.nan if self.baseline is None else self.baseline], dtype=np.float32)
        return out

    def load_state_tensors(self, tensors: Mapping[str, np.ndarray]) -> None:
        for k in self.params:
            self.params[k] = tensors[f"param.{k}"].astype(np.float64)
            self.m[k] = tensors[f"adam.m.{k}"].astype(np.float64)
            self.v[k] = tensors[f"adam.v.{k}"].astype(np.float64)
        self.step = int(tensors["adam.step"][0])
        b = float(tensors["baseline"][0])
        self.baseline = None if np.isnan(b) else b


def _quantize(d: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype=np.float32).astype(np.float64) for k, v in d.items()}


def sample_episode(params, plan, seed) -> EpisodeTrace:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    plan = plan_for(plan)
    decisions, logprobs, _ = run_episode(params, plan, rng=rng)
    return EpisodeTrace(decisions, logprobs, float(sum(logprobs)), plan.to_genome(decisions))


def reinforce_update(ctrl: Controller, batch: Sequence[EpisodeTrace]) -> dict:
    """One REINFORCE step: mean of ``(R - baseline) * grad log P``, clipped, Adam.

    The baseline used for the advantages is the EMA before this batch (the
    first batch initialises it to its mean reward) and is then moved toward
    the batch mean.
    """
    if not batch:
        raise ValueError("empty batch")
    rewards = np.array([tr.reward for tr in batch], dtype=np.float64)
    if not np.all(np.isfinite(rewards)):
        raise ControllerError("non-finite reward in batch")
    baseline = float(rewards.mean()) if ctrl.baseline is None else ctrl.baseline
    ascent = {k: np.zeros_like(v) for k, v in ctrl.params.items()}
    for tr, r in zip(batch, rewards):
        tr.baseline = baseline
        adv = r - baseline
        if adv == 0.0:
            continue
        for k, gk in grad_logprob(ctrl.params, ctrl.plan, tr.decisions).items():
            ascent[k] += adv * gk
    grads = {k: -v / len(batch) for k, v in ascent.items()}  # minimise -J
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise ControllerError("non-finite controller gradient; update aborted")
    grads = clip_by_global_norm(grads, ctrl.clip)
    ctrl.step += 1
    t = ctrl.step
    new_params, new_m, new_v = {}, {}, {}
    for k, p in ctrl.params.items():
        m = ctrl.beta1 * ctrl.m[k] + (1 - ctrl.beta1) * grads[k]
        v = ctrl.beta2 * ctrl.v[k] + (1 - ctrl.beta2) * grads[k] ** 2
        m_hat = m / (1 - ctrl.beta1**t)
        v_hat = v / (1 - ctrl.beta2**t)
        new_params[k] = p - ctrl.lr * m_hat / (np.sqrt(v_hat) + ctrl.eps)
        new_m[k], new_v[k] = m, v
    ctrl.params, ctrl.m, ctrl.v = _quantize(new_params), _quantize(new_m), _quantize(new_v)
    mean_r = float(rewards.mean())
    ctrl.baseline = float(
        np.float32(mean_r if ctrl.baseline is None else ctrl.baseline_decay * ctrl.baseline + (1 - ctrl.baseline_decay) * mean_r)
    )
    return {"grad_norm": norm, "baseline": baseline, "mean_reward": mean_r}


def rl_loop(
    space,
    evaluate: Callable,
    budget: int,
    seed: int = 0,
    batch_size: int = BATCH,
    controller: Controller | None = None,
    on_batch: Callable[[int, Controller, list[EpisodeTrace]], None] | None = None,
) -> tuple["object", Controller]:
    """Sample batches, score them with ``evaluate`` and update the controller.

    Failed evaluations (``EvaluationError``) are recorded but excluded from
    the update.  Returns ``(ObservationSet, controller)``.
    """
    from .space import encode
    from .tpe import EvaluationError, Observation, ObservationSet

    if budget < batch_size:
        raise ValueError(f"budget {budget} is smaller than the batch size {batch_size}")
    ctrl = controller if controller is not None else Controller(space, seed=seed)
    history = ObservationSet()
    index = 0
    batch_no = 0
    while index + batch_size <= budget:
        batch = []
        for b in range(batch_size):
            tr = ctrl.sample_episode(np.random.SeedSequence([seed, index]))
            try:
                tr.reward = float(evaluate(tr.genome))
            except EvaluationError:
                history.failed.append(index)
            else:
                vec = encode(tr.genome, space) if not isinstance(ctrl.plan, BanditPlan) else {"arm": tr.genome}
                history.observations.append(Observation(vec, 1.0 - tr.reward, index))
                batch.append(tr)
            index += 1
        if batch:
            ctrl.update(batch)
        if on_batch is not None:
            on_batch(batch_no, ctrl, batch)
        batch_no += 1
    return history, ctrl
