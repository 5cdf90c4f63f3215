"""The explorer loop, per-sample evaluation and the predictivity experiment.

A search runs in synchronous rounds.  Each round the explorer proposes a
batch through the configured driver, then waits until every sample of the
batch is EVALUATED or FAILED, either evaluating them itself
(``run.workers = 0``) or letting worker processes claim them.  Drivers only
ever see the terminal search records sorted by sample id, so the proposal
sequence is a pure function of the config regardless of which worker
finished first, and a run interrupted at a sample boundary resumes into the
same event log.
"""

from __future__ import annotations

import json
import logging
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import fileformats
from .config import ConfigError, SearchConfig, dump_config, load_config, parse_config
from .controller import Controller
from .evaluator.cost import search_cost
from .evaluator.dataset import DeskDataset
from .evaluator.network import BuildError
from .evaluator.surrogate import SurrogateBenchmark, evaluate_surrogate
from .evaluator.trainer import TrainBudget, make_desk_teacher, train
from .rsa import TeacherSpec, candidate_rdms, combined_score, tg_score
from .space import Space, encode, genome_from_dict, genome_key, sample_uniform, validate
from .tpe import EvaluationError, Observation, sample_seed, suggest
from .tracker import EVALUATED, FAILED, TERMINAL, SampleRecord, Tracker

log = logging.getLogger(__name__)

CHECKPOINT = "controller.tgrl"
REPORT = "report.json"


class SearchError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# evaluation (trainer + evaluator roles)


class SampleEvaluator:
    """Turns a tracker record into a result payload for :meth:`Tracker.complete`."""

    def __init__(self, config: SearchConfig, run_dir):
        self.config = config
        self.run_dir = Path(run_dir)
        self.space = config.space.build()
        ev = config.evaluator
        self.budget: TrainBudget = ev.budget()
        self.layout = ev.layout()
        self.dataset = None
        self.bench = None
        if ev.kind == "desk":
            self.dataset = DeskDataset(
                seed=config.seeds.data,
                num_classes=ev.num_classes,
                image_size=ev.image_size,
                n_train=ev.n_train,
                n_val=ev.n_val,
                n_probe=ev.n_probe,
            )
        else:
            self.bench = SurrogateBenchmark(
                self.space, seed=config.seeds.data, noise_scale=ev.surrogate_noise, pairwise_scale=ev.surrogate_pairwise
            )
        self._teacher: TeacherSpec | None = None

    @property
    def teacher_dir(self) -> Path:
        return self.run_dir / "teacher"

    @property
    def probe_ids(self) -> tuple[str, ...]:
        return self.dataset.probe.ids if self.dataset is not None else self.bench.probe_ids

    def prepare_teacher(self) -> TeacherSpec | None:
        """Create (or reload) the run's teacher RDMs under ``<run>/teacher``."""
        source = self.config.teacher_source
        if source == "none":
            return None
        manifest = self.teacher_dir / "manifest.json"
        if manifest.exists():
            self._teacher = fileformats.load_teacher_manifest(manifest)
            return self._teacher
        info = {"source": source}
        if source == "desk":
            t = self.config.teacher
            budget = TrainBudget(mature_steps=t.mature_steps, batch_size=self.budget.batch_size, lr=self.budget.lr)
            teacher = make_desk_teacher(
                self.dataset, self.config.seeds.data, budget, self.config.scoring.mode, self._subsample
            )
            spec, info["mature_accuracy"] = teacher.spec, teacher.accuracy
        elif source == "surrogate":
            spec = self.bench.teacher()
        else:
            spec = fileformats.load_teacher_manifest(self.config.manifest_path, "external-file")
            expected = self.probe_ids if self.config.scoring.mode == "per-input" else None
            if expected is not None and spec.ids != expected:
                raise SearchError("external teacher RDMs are not aligned with the evaluator's probe set")
        self.teacher_dir.mkdir(parents=True, exist_ok=True)
        fileformats.atomic_write(self.teacher_dir / "teacher.json", (json.dumps(info, sort_keys=True) + "\n").encode())
        fileformats.write_teacher_manifest(self.teacher_dir, spec)
        self._teacher = fileformats.load_teacher_manifest(manifest)
        return self._teacher

    def teacher(self) -> TeacherSpec | None:
        if self._teacher is None and self.config.teacher_source != "none":
            manifest = self.teacher_dir / "manifest.json"
            if not manifest.exists():
                raise SearchError(f"teacher manifest {manifest} has not been written yet")
            self._teacher = fileformats.load_teacher_manifest(manifest)
        return self._teacher

    @property
    def _subsample(self) -> int | None:
        return self.config.scoring.feature_subsample or None

    def evaluate(self, record: SampleRecord, sample_dir: Path | None = None) -> dict:
        """Result payload; raises :class:`EvaluationError` for a sample that must be FAILED."""
        try:
            genome = genome_from_dict(record.genome)
        except Exception as exc:
            raise EvaluationError(f"unreadable genome: {exc}") from exc
        problems = validate(genome, self.space)
        if problems:
            raise EvaluationError("invalid genome: " + "; ".join(problems))
        if record.phase == "rerank":
            return self._mature(genome)
        return self._premature(genome, sample_dir)

    def _train(self, genome, stop_at):
        try:
            res = train(genome, self.dataset, self.budget, self.config.seeds.train, stop_at, layout=self.layout)
        except BuildError as exc:
            raise EvaluationError(str(exc)) from exc
        if not res.ok:
            raise EvaluationError(res.diagnostic)
        return res

    def _premature(self, genome, sample_dir) -> dict:
        if self.dataset is not None:
            res = self._train(genome, "premature")
            p, acts, steps, examples, wall = res.p, res.activations, res.steps, res.examples, res.wall_time
        else:
            sr = evaluate_surrogate(genome, self.bench)
            p, acts, wall = sr.p, sr.activations, 0.0
            steps, examples = self.budget.premature_steps, self.budget.premature_examples
        alpha = self.config.scoring.alpha
        out = {"P": float(p), "alpha": alpha, "steps": steps, "examples": examples, "wall_time": wall}
        teacher = self.teacher()
        if teacher is None:
            out.update({"S": [], "TG": None, "best_layers": [], "teacher_layers": [], "combined": float(p)})
        else:
            rdms = candidate_rdms(acts, self.config.scoring.mode, self._subsample, self.config.seeds.data)
            tg = tg_score(rdms, teacher)
            out.update(
                {
                    "S": list(tg.similarities),
                    "TG": tg.tg,
                    "best_layers": list(tg.best_layers),
                    "teacher_layers": teacher.names,
                    "combined": combined_score(float(p), tg.tg, alpha),
                }
            )
            if sample_dir is not None:
                for name, rdm in rdms.items():
                    fileformats.save_rdm(sample_dir / f"{name}.rdm", rdm)
        if sample_dir is not None and self.config.evaluator.store_activations:
            for name, act in acts.items():
                fileformats.save_activations(sample_dir / f"{name}.act", act)
        return out

    def _mature(self, genome) -> dict:
        if self.dataset is not None:
            res = self._train(genome, "mature")
            return {
                "mature": res.mature_accuracy,
                "P": res.p,
                "steps": res.steps,
                "examples": res.examples,
                "wall_time": res.wall_time,
            }
        return {
            "mature": self.bench.score(genome),
            "P": self.bench.premature_score(genome),
            "steps": self.budget.mature_steps,
            "examples": self.budget.mature_examples,
            "wall_time": 0.0,
        }


def process_one(tracker: Tracker, evaluator: SampleEvaluator, worker_id: str) -> int | None:
    """Claim, evaluate and complete one sample; returns its id or ``None`` if the queue is empty."""
    sid = tracker.claim(worker_id)
    if sid is None:
        return None
    record = tracker.live_state.records[sid]
    sample_dir = tracker.sample_dir(sid)
    try:
        result = evaluator.evaluate(record, sample_dir)
    except EvaluationError as exc:
        log.warning("sample %s failed: %s", sid, exc)
        tracker.fail(sid, worker_id, str(exc))
        return sid
    fileformats.atomic_write(sample_dir / "result.json", (json.dumps(result, sort_keys=True) + "\n").encode())
    tracker.complete(sid, worker_id, result)
    return sid


# ---------------------------------------------------------------------------
# drivers


class Driver:
    proposer = "manual"

    def __init__(self, config: SearchConfig, space: Space, run_dir: Path):
        self.config = config
        self.space = space
        self.run_dir = run_dir
        self.seed = config.seeds.search

    def propose(self, history: Sequence[SampleRecord], first_id: int, n: int) -> list:
        raise NotImplementedError


class RandomDriver(Driver):
    proposer = "random"

    def propose(self, history, first_id, n):
        return [sample_uniform(self.space, sample_seed(self.seed, first_id + k)) for k in range(n)]


class TpeDriver(Driver):
    proposer = "tpe"

    def propose(self, history, first_id, n):
        obs = [
            Observation(encode(genome_from_dict(r.genome), self.space), 1.0 - r.result["combined"], r.sample_id)
            for r in history
            if r.status == EVALUATED
        ]
        d = self.config.driver
        return [
            suggest(obs, self.space, d.n_draws, sample_seed(self.seed, first_id + k), d.n_startup, d.prior_weight)
            for k in range(n)
        ]


class RlDriver(Driver):
    """REINFORCE controller; batch ``j`` holds search samples ``j*B .. j*B+B-1``."""

    proposer = "rl"

    def __init__(self, config, space, run_dir):
        super().__init__(config, space, run_dir)
        self.batch = config.driver.batch_size
        self.ctrl = Controller(space, hidden=config.driver.hidden, seed=self.seed)
        self.batches_done = 0
        path = run_dir / CHECKPOINT
        if path.exists():
            tensors = fileformats.load_checkpoint(path)
            self.batches_done = int(tensors.pop("meta.batches")[0])
            self.ctrl.load_state_tensors(tensors)

    def _episode(self, sid: int):
        return self.ctrl.sample_episode(np.random.SeedSequence([self.seed, sid]))

    def _catch_up(self, history: Sequence[SampleRecord]) -> None:
        by_id = {r.sample_id: r for r in history}
        while True:
            ids = range(self.batches_done * self.batch, (self.batches_done + 1) * self.batch)
            if not all(i in by_id for i in ids):
                return
            traces = []
            for i in ids:
                tr = self._episode(i)
                if genome_key(tr.genome) != genome_key(genome_from_dict(by_id[i].genome)):
                    raise SearchError(f"controller state does not reproduce sample {i}; checkpoint mismatch")
                if by_id[i].status == EVALUATED:
                    tr.reward = float(by_id[i].result["combined"])
                    traces.append(tr)
            if traces:
                self.ctrl.update(traces)
            self.batches_done += 1
            tensors = self.ctrl.state_tensors()
            tensors["meta.batches"] = np.array([self.batches_done], dtype=np.float32)
            fileformats.save_checkpoint(self.run_dir / CHECKPOINT, tensors)

    def propose(self, history, first_id, n):
        self._catch_up(history)
        if first_id != self.batches_done * self.batch:
            raise SearchError(f"rl proposals must start at a batch boundary (got sample {first_id})")
        return [self._episode(first_id + k).genome for k in range(n)]


DRIVERS = {"random": RandomDriver, "tpe": TpeDriver, "rl": RlDriver}


# ---------------------------------------------------------------------------
# explorer


def open_run(config: SearchConfig, run_dir, clock=time.time) -> Tracker:
    """Create the run directory, or reopen it after checking the config matches."""
    run_dir = Path(run_dir)
    text = dump_config(config)
    kwargs = {"clock": clock, "stale_timeout": config.run.stale_timeout, "fsync": config.run.fsync}
    if (run_dir / "events.log").exists():
        existing = (run_dir / "run.cfg").read_text(encoding="utf-8")
        if parse_config(existing) != parse_config(text):
            raise ConfigError(f"{run_dir} was started with a different configuration")
        return Tracker(run_dir, **kwargs)
    return Tracker.create(run_dir, text, **kwargs)


def load_run_config(run_dir) -> SearchConfig:
    path = Path(run_dir) / "run.cfg"
    if not path.exists():
        raise SearchError(f"{run_dir} has no run.cfg")
    return load_config(path)


def _search_rounds_pending(state):
    search = [r for r in state.records.values() if r.phase == "search"]
    return search, [r for r in search if r.status not in TERMINAL]


def run_search(
    config: SearchConfig,
    run_dir,
    max_new_evaluations: int | None = None,
    clock: Callable[[], float] = time.time,
    worker_command: Sequence[str] | None = None,
) -> Path:
    """Run (or resume) a search until the run is finished.

    ``max_new_evaluations`` stops the explorer after evaluating that many
    samples itself, leaving a resumable run directory; it only applies to
    in-process evaluation.
    """
    run_dir = Path(run_dir)
    tracker = open_run(config, run_dir, clock)
    evaluator = SampleEvaluator(config, run_dir)
    evaluator.prepare_teacher()
    driver = DRIVERS[config.driver.name](config, evaluator.space, run_dir)
    remaining = max_new_evaluations
    workers = _spawn_workers(config, run_dir, worker_command) if config.run.workers > 0 else []
    try:
        while True:
            state = tracker.snapshot()
            if state.finished:
                break
            search, pending = _search_rounds_pending(state)
            rerank = [r for r in state.records.values() if r.phase == "rerank"]
            pending += [r for r in rerank if r.status not in TERMINAL]
            if pending:
                if workers:
                    _check_workers(workers)
                    time.sleep(config.run.poll_interval)
                    continue
                if remaining is not None and remaining <= 0:
                    return run_dir
                process_one(tracker, evaluator, "explorer")
                if remaining is not None:
                    remaining -= 1
                continue
            if len(search) < config.budget.m1:
                n = min(config.driver.batch_size, config.budget.m1 - len(search))
                history = sorted(search, key=lambda r: r.sample_id)
                genomes = driver.propose(history, len(state.records), n)
                tracker.propose_many([(g.to_dict(), driver.proposer) for g in genomes])
                continue
            if config.budget.rerank_k > 0 and not rerank:
                evaluated = [r for r in search if r.status == EVALUATED]
                if not evaluated:
                    raise SearchError("no search sample was evaluated; nothing to rerank")
                top = select_top_k(evaluated, config.budget.rerank_k)
                for r in top:
                    tracker.propose(r.genome, r.proposer, phase="rerank", parent=r.sample_id)
                continue
            write_final_report(tracker.snapshot(), run_dir)
            tracker.finish()
    finally:
        _stop_workers(workers)
    return run_dir


def select_top_k(records: Sequence[SampleRecord], k: int) -> list[SampleRecord]:
    """Best ``k`` by combined score; ties go to the earlier sample."""
    return sorted(records, key=lambda r: (-r.result["combined"], r.sample_id))[: min(k, len(records))]


def final_pick(state) -> dict:
    search = [r for r in state.records.values() if r.phase == "search" and r.status == EVALUATED]
    rerank = [r for r in state.records.values() if r.phase == "rerank" and r.status == EVALUATED]
    if rerank:
        best = max(sorted(rerank, key=lambda r: r.sample_id), key=lambda r: r.result["mature"])
        parent = state.records[best.parent]
        return {
            "sample_id": parent.sample_id,
            "rerank_sample_id": best.sample_id,
            "genome": parent.genome,
            "combined": parent.result["combined"],
            "mature": best.result["mature"],
            "reranked": True,
        }
    if not search:
        raise SearchError("no evaluated samples")
    best = select_top_k(search, 1)[0]
    return {"sample_id": best.sample_id, "genome": best.genome, "combined": best.result["combined"], "mature": None, "reranked": False}


def counters_cost(counters) -> int:
    """Total examples processed, via the cost model on per-sample budgets."""
    def per(m, e):
        return (e // m, m) if m and e % m == 0 else (e, 1 if e else 0)

    e1, m1 = per(counters.m1, counters.e1)
    e2, m2 = per(counters.m2, counters.e2)
    total = search_cost(m1, e1, m2, e2)
    assert total == counters.e1 + counters.e2
    return total


def write_final_report(state, run_dir: Path) -> dict:
    rerank_k = sum(1 for r in state.records.values() if r.phase == "rerank")
    if rerank_k and not any(r.phase == "rerank" and r.status == EVALUATED for r in state.records.values()):
        raise SearchError("every rerank retrain failed")
    report = {
        "best": final_pick(state),
        "counters": {
            "M1": state.counters.m1,
            "E1_total": state.counters.e1,
            "M2": state.counters.m2,
            "E2_total": state.counters.e2,
        },
        "total_examples": counters_cost(state.counters),
        "evaluated": len(state.by_status(EVALUATED)),
        "failed": len(state.by_status(FAILED)),
    }
    fileformats.atomic_write(run_dir / REPORT, (json.dumps(report, indent=2, sort_keys=True) + "\n").encode())
    return report


def _spawn_workers(config, run_dir, command):
    procs = []
    for i in range(config.run.workers):
        cmd = list(command) if command else [sys.executable, "-m", "tgsage.cli"]
        cmd += ["worker", "--run-dir", str(run_dir), "--worker-id", f"w{i}"]
        procs.append(subprocess.Popen(cmd, stdout=subprocess.DEVNULL))
    return procs


def _check_workers(procs):
    if procs and all(p.poll() is not None for p in procs):
        codes = [p.returncode for p in procs]
        raise SearchError(f"all workers exited before the run finished (exit codes {codes})")


def _stop_workers(procs):
    for p in procs:
        if p.poll() is None:
            try:
                p.wait(timeout=15)
            except subprocess.TimeoutExpired:
                p.terminate()
                p.wait()


# ---------------------------------------------------------------------------
# worker


BACKOFF_BASE = 0.1
BACKOFF_CAP = 10.0


def backoff_delays(base: float = BACKOFF_BASE, cap: float = BACKOFF_CAP):
    delay = base
    while True:
        yield delay
        delay = min(cap, delay * 2)


def worker_loop(
    run_dir,
    worker_id: str,
    sleep: Callable[[float], None] = time.sleep,
    clock: Callable[[], float] = time.time,
    max_samples: int | None = None,
    stale_timeout: float | None = None,
) -> int:
    """Claim and evaluate samples until the run is finished; returns the number processed."""
    config = load_run_config(run_dir)
    tracker = Tracker(
        run_dir,
        clock=clock,
        stale_timeout=config.run.stale_timeout if stale_timeout is None else stale_timeout,
        fsync=config.run.fsync,
    )
    evaluator = SampleEvaluator(config, run_dir)
    done = 0
    delays = backoff_delays()
    while config.teacher_source != "none" and not (evaluator.teacher_dir / "manifest.json").exists():
        if tracker.snapshot().finished:
            return 0
        sleep(next(delays))
    while max_samples is None or done < max_samples:
        if tracker.snapshot().finished:
            break
        sid = process_one(tracker, evaluator, worker_id)
        if sid is None:
            sleep(next(delays))
            continue
        delays = backoff_delays()
        done += 1
    return done


# ---------------------------------------------------------------------------
# predictivity experiment


@dataclass
class PredictivityReport:
    kind: str
    budgets: list[int]
    teacher_layers: list[str]
    members: list[dict]  # genome key, mature, and per-budget P / S / TG / combined
    table: dict[int, dict[str, float | None]]  # budget -> predictor -> corr with mature
    alpha_sweep: dict[int, dict[float, float | None]]
    zero_variance: list[str] = field(default_factory=list)
    dropped: int = 0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "budgets": self.budgets,
            "teacher_layers": self.teacher_layers,
            "members": self.members,
            "table": {str(b): row for b, row in self.table.items()},
            "alpha_sweep": {str(b): {repr(a): v for a, v in row.items()} for b, row in self.alpha_sweep.items()},
            "zero_variance": self.zero_variance,
            "dropped": self.dropped,
        }


def correlation(x, y, kind: str = "spearman") -> float | None:
    """Rank (default) or Pearson correlation; ``None`` when either side is constant."""
    from scipy import stats

    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    if kind == "spearman":
        r = stats.spearmanr(x, y)[0]
    elif kind == "pearson":
        r = stats.pearsonr(x, y)[0]
    else:
        raise ValueError(f"unknown correlation kind {kind!r}")
    return float(np.clip(r, -1.0, 1.0))


DEFAULT_ALPHAS = (0.0, 0.25, 0.5, 1.0, 2.0, 5.0)
MIN_POOL = 10


def default_budgets(budget: TrainBudget) -> list[int]:
    """Premature ladder mature/32, mature/16 and the search premature budget."""
    ladder = {budget.mature_steps // 32, budget.mature_steps // 16, budget.premature_steps}
    return sorted(b for b in ladder if 0 < b < budget.mature_steps) or [budget.premature_steps]


def run_predictivity(
    config: SearchConfig,
    pool: Sequence | int = 64,
    budgets: Sequence[int] | None = None,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    kind: str = "spearman",
    member_seeds: Sequence[int] | None = None,
    teacher: TeacherSpec | None = None,
    work_dir=None,
) -> PredictivityReport:
    """Correlate premature predictors with mature accuracy over a pool of genomes.

    ``pool`` is a genome list or a size to sample uniformly (seeded by
    ``seeds.search``).  Each member is trained once to maturity with
    snapshots at every premature budget.  ``member_seeds`` optionally gives
    each member its own training seed.
    """
    import tempfile

    if config.evaluator.kind != "desk":
        raise ConfigError("the predictivity experiment needs the desk evaluator")
    work = Path(work_dir) if work_dir is not None else Path(tempfile.mkdtemp(prefix="tgsage-pred-"))
    evaluator = SampleEvaluator(config, work)
    space = evaluator.space
    if isinstance(pool, int):
        rng = np.random.default_rng(config.seeds.search)
        pool = [sample_uniform(space, rng) for _ in range(pool)]
    pool = list(pool)
    if len(pool) < MIN_POOL:
        raise ValueError(f"pool size must be >= {MIN_POOL}, got {len(pool)}")
    if teacher is None:
        teacher = evaluator.prepare_teacher()
    budget = evaluator.budget
    budgets = sorted(set(budgets or default_budgets(budget)))
    if any(not 0 <= b < budget.mature_steps for b in budgets):
        raise ValueError("premature budgets must lie below the mature budget")
    mode, sub, rdm_seed = config.scoring.mode, evaluator._subsample, config.seeds.data

    members = []
    dropped = 0
    for i, genome in enumerate(pool):
        seed = config.seeds.train if member_seeds is None else int(member_seeds[i])
        try:
            res = train(genome, evaluator.dataset, budget, seed, "mature", capture_steps=budgets, layout=evaluator.layout)
            diag = res.diagnostic
        except BuildError as exc:
            res, diag = None, str(exc)
        if res is None or not res.ok:
            log.warning("pool member %d dropped: %s", i, diag)
            dropped += 1
            continue
        row = {"genome": genome_key(genome), "seed": seed, "mature": res.mature_accuracy, "budgets": {}}
        for b in budgets:
            snap = res.snapshots[b]
            tg = tg_score(candidate_rdms(snap.activations, mode, sub, rdm_seed), teacher)
            row["budgets"][str(b)] = {"P": snap.accuracy, "S": list(tg.similarities), "TG": tg.tg}
        members.append(row)
    if len(members) < MIN_POOL:
        raise SearchError(f"only {len(members)} pool members survived training; need {MIN_POOL}")
    return summarize_predictivity(members, budgets, teacher.names, alphas, kind, dropped, config.scoring.alpha)


def summarize_predictivity(
    members, budgets, teacher_layers, alphas=DEFAULT_ALPHAS, kind="spearman", dropped=0, alpha=1.0
):
    mature = [m["mature"] for m in members]
    table, sweep, flags = {}, {}, []

    def corr(name, b, values):
        r = correlation(values, mature, kind)
        if r is None:
            flags.append(f"{name}@{b}")
        return r

    for b in budgets:
        rows = [m["budgets"][str(b)] for m in members]
        p = np.array([r["P"] for r in rows])
        tg = np.array([r["TG"] for r in rows])
        entry = {"P": corr("P", b, p), "TG": corr("TG", b, tg)}
        for j, name in enumerate(teacher_layers):
            entry[f"S[{name}]"] = corr(f"S[{name}]", b, [r["S"][j] for r in rows])
        entry["combined"] = corr("combined", b, p + alpha * tg)
        table[b] = entry
        sweep[b] = {float(a): correlation(p + float(a) * tg, mature, kind) for a in alphas}
    if correlation(mature, mature, kind) is None:
        flags.append("mature")
    return PredictivityReport(kind, list(budgets), list(teacher_layers), members, table, sweep, flags, dropped)
