import multiprocessing as mp
import os

import pytest
from hypothesis import given, settings, strategies as st

from tgsage.tracker import (
    CLAIMED,
    EVALUATED,
    FAILED,
    PROPOSED,
    TRAINED,
    Tracker,
    TrackerError,
    apply_event,
    load_events,
    log_digest,
    parse_lines,
    replay,
    replay_dir,
    stable_events,
)

G = {"kind": "layered", "layers": [], "edges": []}


class FakeClock:
    def __init__(self, t=1000.0):
        self.t = t

    def __call__(self):
        return self.t


def make(tmp_path, **kw):
    kw.setdefault("fsync", False)
    return Tracker.create(tmp_path / "run", "cfg", **kw)


def drain(path, worker_id, examples=10, stale_timeout=3600.0):
    """Worker body: claim and complete until the queue is empty."""
    t = Tracker(path, fsync=False, stale_timeout=stale_timeout)
    done = []
    while True:
        sid = t.claim(worker_id)
        if sid is None:
            return done
        t.complete(sid, worker_id, {"combined": float(sid), "examples": examples})
        done.append(sid)


def _drain_into(path, worker_id, queue):
    queue.put((worker_id, drain(path, worker_id)))


def _claim_and_die(path):
    t = Tracker(path, fsync=False)
    t.claim("doomed")
    os._exit(0)


class TestStateMachine:
    def test_create_layout(self, tmp_path):
        t = make(tmp_path)
        for name in ("events.log", "events.lock", "run.cfg", "samples", "claims"):
            assert (t.path / name).exists()
        assert (t.path / "run.cfg").read_text() == "cfg"

    def test_not_a_run_dir(self, tmp_path):
        with pytest.raises(TrackerError, match="not a run directory"):
            Tracker(tmp_path)

    def test_happy_path(self, tmp_path):
        t = make(tmp_path)
        sid = t.propose(G, "tpe")
        assert sid == 0 and t.snapshot().records[0].status == PROPOSED
        assert t.claim("w") == 0 and t.snapshot().records[0].status == CLAIMED
        t.mark_trained(0, "w")
        assert t.snapshot().records[0].status == TRAINED
        t.complete(0, "w", {"combined": 0.5, "examples": 7})
        s = t.snapshot()
        assert s.records[0].status == EVALUATED and s.records[0].result["combined"] == 0.5
        assert (s.counters.m1, s.counters.e1, s.counters.m2, s.counters.e2) == (1, 7, 0, 0)
        assert [e["transition"] for e in t.events()] == ["propose", "claim", "trained", "evaluated"]

    def test_complete_from_claimed_adds_trained(self, tmp_path):
        t = make(tmp_path)
        t.propose(G, "rl")
        t.claim("w")
        t.complete(0, "w", {"examples": 1})
        assert [e["transition"] for e in t.events()][-2:] == ["trained", "evaluated"]
        assert t.snapshot().records[0].trained_count == 1

    def test_rerank_counters(self, tmp_path):
        t = make(tmp_path)
        t.propose(G, "tpe")
        t.propose(G, "tpe", phase="rerank", parent=0)
        for _ in range(2):
            sid = t.claim("w")
            t.complete(sid, "w", {"examples": 100 if sid else 3})
        c = t.snapshot().counters
        assert (c.m1, c.e1, c.m2, c.e2) == (1, 3, 1, 100)

    def test_illegal_transitions(self, tmp_path):
        t = make(tmp_path)
        t.propose(G, "tpe")
        with pytest.raises(TrackerError, match="PROPOSED"):
            t.complete(0, "w", {})
        with pytest.raises(TrackerError, match="unknown sample"):
            t.mark_trained(5, "w")
        t.claim("a")
        with pytest.raises(TrackerError, match="owned by 'a'"):
            t.complete(0, "b", {})
        t.complete(0, "a", {})
        with pytest.raises(TrackerError, match="EVALUATED"):
            t.fail(0, "a", "late")
        with pytest.raises(TrackerError):
            t.propose(G, "gpt")
        with pytest.raises(TrackerError):
            t.propose(G, "tpe", phase="warmup")
        # a rejected call appends nothing
        assert len(t.events()) == 4

    def test_fail_paths(self, tmp_path):
        t = make(tmp_path)
        t.propose_many([(G, "random")] * 2)
        t.fail(0, None, "bad genome")
        t.claim("w")
        t.fail(1, "w", "diverged")
        s = t.snapshot()
        assert [r.status for r in s.records.values()] == [FAILED, FAILED]
        assert s.records[1].diagnostic == "diverged" and s.completion_order == [0, 1]
        assert s.counters.m1 == 0

    def test_claim_order_and_empty_queue(self, tmp_path):
        t = make(tmp_path)
        assert t.propose_many([(G, "tpe")] * 3) == [0, 1, 2]
        assert [t.claim("w") for _ in range(4)] == [0, 1, 2, None]

    def test_finish_idempotent(self, tmp_path):
        t = make(tmp_path)
        t.finish()
        t.finish()
        assert t.snapshot().finished and len(t.events()) == 1

    def test_replay_rejects_gaps_and_ids(self):
        ev = {"seq": 2, "timestamp": 0.0, "sample_id": 0, "transition": "propose", "payload": {"genome": G, "proposer": "tpe"}}
        with pytest.raises(TrackerError, match="seq"):
            replay([ev])
        with pytest.raises(TrackerError, match="next id"):
            replay([dict(ev, seq=1, sample_id=3)])
        with pytest.raises(TrackerError, match="unknown transition"):
            replay([dict(ev, seq=1, transition="teleport")])


class TestReplay:
    def test_snapshot_equals_prefix_replay(self, tmp_path):
        t = make(tmp_path)
        t.propose_many([(G, "tpe")] * 4)
        for _ in range(3):
            sid = t.claim("w")
            t.complete(sid, "w", {"examples": sid})
        events = load_events(t.path)
        for k in range(len(events) + 1):
            assert replay(events[:k]).seq == k
        assert replay(events).digest() == t.snapshot().digest() == replay_dir(t.path).digest()

    def test_second_handle_catches_up(self, tmp_path):
        a = make(tmp_path)
        b = Tracker(a.path, fsync=False)
        a.propose(G, "tpe")
        assert b.claim("w") == 0
        assert a.snapshot().records[0].owner == "w"

    def test_snapshot_is_a_copy(self, tmp_path):
        t = make(tmp_path)
        t.propose(G, "tpe")
        s = t.snapshot()
        s.records[0].status = EVALUATED
        assert t.snapshot().records[0].status == PROPOSED

    def test_stable_digest_ignores_owners_and_time(self, tmp_path):
        digests = []
        for k, owner in enumerate(("alpha", "beta")):
            t = Tracker.create(tmp_path / f"r{k}", "", clock=FakeClock(100.0 * (k + 1)), fsync=False)
            t.propose(G, "tpe")
            t.claim(owner)
            t.complete(0, owner, {"examples": 1, "wall_time": k})
            digests.append(log_digest(t.events()))
        assert digests[0] == digests[1]
        assert all("owner" not in e["payload"] for e in stable_events(t.events()))

    @settings(max_examples=50)
    @given(st.lists(st.sampled_from(["propose", "claim", "train", "complete", "fail"]), max_size=40))
    def test_random_operation_sequences_replay(self, ops):
        import tempfile
        from pathlib import Path

        with tempfile.TemporaryDirectory() as d:
            t = Tracker.create(Path(d), "", fsync=False)
            for op in ops:
                s = t.snapshot()
                try:
                    if op == "propose":
                        t.propose(G, "tpe")
                    elif op == "claim":
                        t.claim("w")
                    else:
                        live = [r for r in s.records.values() if r.status in (CLAIMED, TRAINED)]
                        if not live:
                            continue
                        sid = live[0].sample_id
                        if op == "train":
                            t.mark_trained(sid, "w")
                        elif op == "complete":
                            t.complete(sid, "w", {"examples": 2})
                        else:
                            t.fail(sid, "w", "x")
                except TrackerError:
                    pass
            s = t.snapshot()
            assert s.digest() == replay_dir(d).digest()
            evaluated = s.by_status(EVALUATED)
            assert s.counters.m1 == len(evaluated) and s.counters.e1 == 2 * len(evaluated)
            assert sorted(s.completion_order) == sorted(
                r.sample_id for r in s.records.values() if r.status in (EVALUATED, FAILED)
            )


class TestFaults:
    def test_torn_tail_invisible_and_repaired(self, tmp_path):
        t = make(tmp_path)
        t.propose(G, "tpe")
        good = t.log_path.read_bytes()
        with open(t.log_path, "ab") as fh:
            fh.write(b'{"seq": 2, "transition": "cla')
        assert parse_lines(t.log_path.read_bytes())[0] == parse_lines(good)[0]
        fresh = Tracker(t.path, fsync=False)
        assert fresh.snapshot().seq == 1
        assert fresh.claim("w") == 0
        data = t.log_path.read_bytes()
        assert data.startswith(good) and data.endswith(b"\n") and b"cla\n" not in data
        assert replay_dir(t.path).records[0].status == CLAIMED

    def test_torn_first_line(self, tmp_path):
        t = make(tmp_path)
        t.log_path.write_bytes(b'{"seq": 1')
        assert Tracker(t.path, fsync=False).propose(G, "tpe") == 0
        assert len(load_events(t.path)) == 1

    def test_orphan_claim_marker(self, tmp_path):
        t = make(tmp_path)
        t.propose(G, "tpe")
        (t.path / "claims" / "0.owner").write_text("ghost\n")
        assert t.claim("w") == 0
        assert (t.path / "claims" / "0.owner").read_text() == "w\n"

    def test_stale_claim_reclaimed_with_injected_clock(self, tmp_path):
        clock = FakeClock()
        t = make(tmp_path, clock=clock, stale_timeout=60)
        t.propose(G, "tpe")
        assert t.claim("dead") == 0
        clock.t += 59
        assert t.claim("w2") is None
        clock.t += 1
        assert t.claim("w2") == 0
        with pytest.raises(TrackerError, match="owned by 'w2'"):
            t.complete(0, "dead", {})
        t.complete(0, "w2", {"examples": 5})
        s = t.snapshot()
        assert s.records[0].claim_count == 2 and s.counters.e1 == 5
        assert [e["transition"] for e in t.events()][-3:] == ["reclaim", "trained", "evaluated"]

    def test_stale_trained_reclaimed(self, tmp_path):
        clock = FakeClock()
        t = make(tmp_path, clock=clock, stale_timeout=10)
        t.propose(G, "tpe")
        t.claim("a")
        t.mark_trained(0, "a")
        clock.t += 11
        assert t.claim("b") == 0
        t.complete(0, "b", {})
        assert t.snapshot().records[0].trained_count == 2

    def test_kill_and_reclaim(self, tmp_path):
        t = make(tmp_path, stale_timeout=0.0)
        t.propose_many([(G, "tpe")] * 5)
        ctx = mp.get_context("fork")
        p = ctx.Process(target=_claim_and_die, args=(t.path,))
        p.start()
        p.join()
        assert t.snapshot().records[0].owner == "doomed"
        done = drain(t.path, "survivor", stale_timeout=0.0)
        s = t.snapshot()
        assert sorted(done) == [0, 1, 2, 3, 4]
        assert all(r.status == EVALUATED for r in s.records.values())
        assert s.counters.m1 == 5 and s.records[0].claim_count == 2


class TestConcurrency:
    def test_eight_workers_two_hundred_samples(self, tmp_path):
        t = make(tmp_path)
        t.propose_many([({"i": i}, "random") for i in range(200)])
        ctx = mp.get_context("fork")
        q = ctx.Queue()
        procs = [ctx.Process(target=_drain_into, args=(t.path, f"w{i}", q)) for i in range(8)]
        for p in procs:
            p.start()
        per_worker = dict(q.get(timeout=120) for _ in procs)
        for p in procs:
            p.join(timeout=60)
            assert p.exitcode == 0
        done = [sid for ws in per_worker.values() for sid in ws]
        assert sorted(done) == list(range(200))
        events = load_events(t.path)
        assert sum(e["transition"] == "evaluated" for e in events) == 200
        assert sum(e["transition"] == "claim" for e in events) == 200
        live = Tracker(t.path, fsync=False).snapshot()
        assert replay(events).digest() == live.digest()
        assert live.counters.m1 == 200 and live.counters.e1 == 2000
        claims = {e["sample_id"]: e["payload"]["owner"] for e in events if e["transition"] == "claim"}
        for w, ids in per_worker.items():
            assert all(claims[i] == w for i in ids)
