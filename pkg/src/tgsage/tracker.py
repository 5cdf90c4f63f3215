"""Event-sourced run directory: the single source of truth for sample state.

Layout::

    run.cfg             frozen configuration snapshot
    events.log          one canonical JSON event per line
    events.lock         flock target serialising writers
    samples/<id>/       per-sample artifacts
    claims/<id>.owner   claim markers (created exclusively)

Every mutation takes an exclusive lock, catches up on events written by
other processes, validates the transition against the replayed state and
appends one or more complete lines.  Readers never lock; a torn trailing
line (a writer crashed mid-append) is invisible to them and is truncated by
the next writer.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

PROPOSED, CLAIMED, TRAINED, EVALUATED, FAILED = "PROPOSED", "CLAIMED", "TRAINED", "EVALUATED", "FAILED"
TERMINAL = (EVALUATED, FAILED)
PHASES = ("search", "rerank")
PROPOSERS = ("tpe", "rl", "random", "manual")
DEFAULT_STALE_TIMEOUT = 3600.0


class TrackerError(RuntimeError):
    """Rejected transition or unusable run directory."""


@dataclass
class SampleRecord:
    sample_id: int
    genome: dict
    proposer: str
    phase: str = "search"
    parent: int | None = None
    status: str = PROPOSED
    owner: str | None = None
    claimed_at: float | None = None
    result: dict | None = None
    diagnostic: str | None = None
    trained_count: int = 0
    claim_count: int = 0
    completed_seq: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Counters:
    m1: int = 0
    e1: int = 0
    m2: int = 0
    e2: int = 0


@dataclass
class RunState:
    records: dict[int, SampleRecord] = field(default_factory=dict)
    counters: Counters = field(default_factory=Counters)
    finished: bool = False
    seq: int = 0
    completion_order: list[int] = field(default_factory=list)

    def evaluated(self) -> list[SampleRecord]:
        """EVALUATED records in completion order."""
        return [self.records[i] for i in self.completion_order if self.records[i].status == EVALUATED]

    def by_status(self, status: str) -> list[SampleRecord]:
        return [r for r in self.records.values() if r.status == status]

    def table(self) -> dict:
        return {
            "records": [self.records[i].to_dict() for i in sorted(self.records)],
            "counters": asdict(self.counters),
            "finished": self.finished,
            "seq": self.seq,
            "completion_order": list(self.completion_order),
        }

    def digest(self) -> str:
        return hashlib.sha256(_canonical(self.table()).encode("utf-8")).hexdigest()


def _canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def apply_event(state: RunState, event: Mapping) -> None:
    """Advance ``state`` by one event; raises :class:`TrackerError` on an illegal transition."""
    seq, kind, sid, payload = event["seq"], event["transition"], event["sample_id"], event["payload"]
    if seq != state.seq + 1:
        raise TrackerError(f"event seq {seq} does not follow {state.seq}")
    rec = state.records.get(sid) if sid is not None else None

    def need(*statuses):
        if rec is None:
            raise TrackerError(f"{kind}: unknown sample {sid}")
        if rec.status not in statuses:
            raise TrackerError(f"{kind}: sample {sid} is {rec.status}, expected {'/'.join(statuses)}")

    if kind == "propose":
        if sid != len(state.records):
            raise TrackerError(f"propose: sample id {sid} is not the next id {len(state.records)}")
        state.records[sid] = SampleRecord(
            sid, payload["genome"], payload["proposer"], payload.get("phase", "search"), payload.get("parent")
        )
    elif kind in ("claim", "reclaim"):
        need(PROPOSED) if kind == "claim" else need(CLAIMED, TRAINED)
        rec.status, rec.owner, rec.claimed_at = CLAIMED, payload["owner"], event["timestamp"]
        rec.claim_count += 1
    elif kind == "trained":
        need(CLAIMED)
        rec.status = TRAINED
        rec.trained_count += 1
    elif kind == "evaluated":
        need(TRAINED)
        rec.status, rec.result = EVALUATED, dict(payload["result"])
        rec.completed_seq = seq
        state.completion_order.append(sid)
        examples = int(rec.result.get("examples", 0))
        if rec.phase == "rerank":
            state.counters.m2 += 1
            state.counters.e2 += examples
        else:
            state.counters.m1 += 1
            state.counters.e1 += examples
    elif kind == "fail":
        need(PROPOSED, CLAIMED, TRAINED)
        rec.status, rec.diagnostic = FAILED, payload.get("diagnostic", "")
        rec.completed_seq = seq
        state.completion_order.append(sid)
    elif kind == "finish":
        state.finished = True
    else:
        raise TrackerError(f"unknown transition {kind!r}")
    state.seq = seq


def parse_lines(data: bytes) -> tuple[list[dict], int]:
    """Complete events in ``data`` and the byte length they span."""
    end = data.rfind(b"\n") + 1
    events = [json.loads(line) for line in data[:end].splitlines() if line.strip()]
    return events, end


def replay(events: Iterable[Mapping]) -> RunState:
    state = RunState()
    for ev in events:
        apply_event(state, ev)
    return state


class Tracker:
    """Handle on a run directory; safe to use from many processes at once."""

    def __init__(
        self,
        path,
        clock: Callable[[], float] = time.time,
        stale_timeout: float = DEFAULT_STALE_TIMEOUT,
        fsync: bool = True,
    ):
        self.path = Path(path)
        if not (self.path / "events.log").exists():
            raise TrackerError(f"{self.path} is not a run directory (no events.log)")
        self.clock = clock
        self.stale_timeout = float(stale_timeout)
        self.fsync = fsync
        self._state = RunState()
        self._offset = 0

    # -- construction -----------------------------------------------------

    @classmethod
    def create(cls, path, config_text: str = "", **kwargs) -> "Tracker":
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        (path / "samples").mkdir(exist_ok=True)
        (path / "claims").mkdir(exist_ok=True)
        cfg = path / "run.cfg"
        if not cfg.exists():
            cfg.write_text(config_text, encoding="utf-8")
        (path / "events.log").touch()
        (path / "events.lock").touch()
        return cls(path, **kwargs)

    @property
    def log_path(self) -> Path:
        return self.path / "events.log"

    def sample_dir(self, sample_id: int) -> Path:
        d = self.path / "samples" / str(sample_id)
        d.mkdir(parents=True, exist_ok=True)
        return d

    # -- reading ------------------------------------------------------------

    def _catch_up(self) -> None:
        with open(self.log_path, "rb") as fh:
            fh.seek(self._offset)
            data = fh.read()
        events, used = parse_lines(data)
        for ev in events:
            apply_event(self._state, ev)
        self._offset += used

    def snapshot(self) -> RunState:
        """Point-in-time state equal to a replay of some complete-event prefix."""
        self._catch_up()
        return replay_copy(self._state)

    def events(self) -> list[dict]:
        return parse_lines(self.log_path.read_bytes())[0]

    @property
    def live_state(self) -> RunState:
        return self._state

    # -- writing ------------------------------------------------------------

    @contextmanager
    def _locked(self):
        with open(self.path / "events.lock", "a+b") as lock:
            fcntl.flock(lock.fileno(), fcntl.LOCK_EX)
            try:
                self._repair_tail()
                self._catch_up()
                yield
            finally:
                fcntl.flock(lock.fileno(), fcntl.LOCK_UN)

    def _repair_tail(self) -> None:
        size = self.log_path.stat().st_size
        if size == 0:
            return
        with open(self.log_path, "r+b") as fh:
            fh.seek(max(0, size - 65536))
            tail = fh.read()
            if tail.endswith(b"\n"):
                return
            cut = tail.rfind(b"\n")
            if cut < 0 and size > len(tail):
                fh.seek(0)
                cut = fh.read().rfind(b"\n")
                keep = cut + 1
            else:
                keep = size - len(tail) + cut + 1
            fh.truncate(keep)

    def _append(self, items: list[tuple[str, int | None, dict]]) -> list[dict]:
        """Validate and durably append events; must hold the lock."""
        trial = replay_copy(self._state)
        events, lines = [], []
        seq = self._state.seq
        now = float(self.clock())
        for kind, sid, payload in items:
            seq += 1
            ev = {"seq": seq, "timestamp": now, "sample_id": sid, "transition": kind, "payload": payload}
            apply_event(trial, ev)
            events.append(ev)
            lines.append(_canonical(ev) + "\n")
        data = "".join(lines).encode("utf-8")
        fd = os.open(self.log_path, os.O_WRONLY | os.O_APPEND)
        try:
            written = os.write(fd, data)
            if written != len(data):
                raise TrackerError(f"short write to events.log ({written}/{len(data)} bytes)")
            if self.fsync:
                os.fsync(fd)
        finally:
            os.close(fd)
        for ev in events:
            apply_event(self._state, ev)
        self._offset += len(data)
        return events

    def propose(self, genome: Mapping, proposer: str, phase: str = "search", parent: int | None = None) -> int:
        if proposer not in PROPOSERS:
            raise TrackerError(f"unknown proposer {proposer!r}")
        if phase not in PHASES:
            raise TrackerError(f"unknown phase {phase!r}")
        with self._locked():
            sid = len(self._state.records)
            payload = {"genome": dict(genome), "proposer": proposer, "phase": phase, "parent": parent}
            self._append([("propose", sid, payload)])
            return sid

    def propose_many(self, items: Iterable[tuple[Mapping, str]], phase: str = "search") -> list[int]:
        with self._locked():
            first = len(self._state.records)
            batch = []
            for k, (genome, proposer) in enumerate(items):
                batch.append(("propose", first + k, {"genome": dict(genome), "proposer": proposer, "phase": phase, "parent": None}))
            self._append(batch)
            return [first + k for k in range(len(batch))]

    def claim(self, worker_id: str) -> int | None:
        """Oldest PROPOSED (or stale CLAIMED/TRAINED) sample, now owned by ``worker_id``."""
        with self._locked():
            now = float(self.clock())
            for rec in sorted(self._state.records.values(), key=lambda r: r.sample_id):
                if rec.status == PROPOSED:
                    if not self._mark(rec.sample_id, worker_id, exclusive=True):
                        # a marker on a PROPOSED record seen under the lock is left
                        # by a claimer that crashed before appending its event
                        self._mark(rec.sample_id, worker_id, exclusive=False)
                    self._append([("claim", rec.sample_id, {"owner": worker_id})])
                    return rec.sample_id
                if rec.status in (CLAIMED, TRAINED) and now - rec.claimed_at >= self.stale_timeout:
                    self._mark(rec.sample_id, worker_id, exclusive=False)
                    self._append([("reclaim", rec.sample_id, {"owner": worker_id, "previous_owner": rec.owner})])
                    return rec.sample_id
            return None

    def _mark(self, sid: int, owner: str, exclusive: bool) -> bool:
        marker = self.path / "claims" / f"{sid}.owner"
        if exclusive:
            try:
                fd = os.open(marker, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o644)
            except FileExistsError:
                return False
            with os.fdopen(fd, "w") as fh:
                fh.write(owner + "\n")
            return True
        tmp = marker.with_suffix(f".{os.getpid()}.tmp")
        tmp.write_text(owner + "\n")
        os.replace(tmp, marker)
        return True

    def _owned(self, sid: int, owner: str | None, *statuses: str) -> SampleRecord:
        rec = self._state.records.get(sid)
        if rec is None:
            raise TrackerError(f"unknown sample {sid}")
        if rec.status not in statuses:
            raise TrackerError(f"sample {sid} is {rec.status}, expected {'/'.join(statuses)}")
        if owner is not None and rec.owner != owner:
            raise TrackerError(f"sample {sid} is owned by {rec.owner!r}, not {owner!r}")
        return rec

    def mark_trained(self, sample_id: int, owner: str, info: Mapping | None = None) -> None:
        with self._locked():
            self._owned(sample_id, owner, CLAIMED)
            self._append([("trained", sample_id, dict(info or {}))])

    def complete(self, sample_id: int, owner: str, result: Mapping) -> None:
        """Record scores for a sample claimed by ``owner``; ``result['examples']`` feeds the cost counters."""
        with self._locked():
            rec = self._owned(sample_id, owner, CLAIMED, TRAINED)
            batch = [] if rec.status == TRAINED else [("trained", sample_id, {})]
            batch.append(("evaluated", sample_id, {"result": dict(result)}))
            self._append(batch)

    def fail(self, sample_id: int, owner: str | None, diagnostic: str) -> None:
        with self._locked():
            if owner is None:
                self._owned(sample_id, None, PROPOSED)
            else:
                self._owned(sample_id, owner, CLAIMED, TRAINED)
            self._append([("fail", sample_id, {"diagnostic": str(diagnostic)})])

    def finish(self) -> None:
        with self._locked():
            if not self._state.finished:
                self._append([("finish", None, {})])


def replay_copy(state: RunState) -> RunState:
    out = RunState(
        {k: SampleRecord(**asdict(v)) for k, v in state.records.items()},
        Counters(**asdict(state.counters)),
        state.finished,
        state.seq,
        list(state.completion_order),
    )
    return out


def load_events(path) -> list[dict]:
    """Parsed events of the run directory ``path`` (a torn tail is ignored)."""
    return parse_lines((Path(path) / "events.log").read_bytes())[0]


def replay_dir(path) -> RunState:
    return replay(load_events(path))


VOLATILE = ("timestamp", "owner", "previous_owner", "wall_time")


def stable_events(events: Iterable[Mapping]) -> list[dict]:
    """Events with wall-clock and worker-identity fields removed, for replay-equivalence checks."""

    def strip(obj):
        if isinstance(obj, Mapping):
            return {k: strip(v) for k, v in obj.items() if k not in VOLATILE}
        if isinstance(obj, list):
            return [strip(v) for v in obj]
        return obj

    return [strip(ev) for ev in events]


def log_digest(events: Iterable[Mapping]) -> str:
    return hashlib.sha256("\n".join(_canonical(e) for e in stable_events(events)).encode("utf-8")).hexdigest()
