import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import chisquare

from tgsage.controller import (
    BanditPlan,
    Controller,
    ControllerError,
    Decisions,
    _softmax,
    clip_by_global_norm,
    global_norm,
    grad_logprob,
    init_params,
    plan_for,
    reinforce_update,
    rl_loop,
    run_episode,
    sample_episode,
    total_logprob,
)
from tgsage.fileformats import load_checkpoint, save_checkpoint
from tgsage.space import CellSpace, LayeredSpace, MicroSpace, validate

SPACES = [
    LayeredSpace(max_layers=4),
    MicroSpace(),
    MicroSpace(connectivity="free"),
    CellSpace(num_blocks=3),
]


def fd_max_rel_error(params, plan, decisions, h=1e-5):
    g = grad_logprob(params, plan, decisions)
    worst = 0.0
    for k, v in params.items():
        for idx in np.ndindex(v.shape):
            old = v[idx]
            v[idx] = old + h
            a = total_logprob(params, plan, decisions)
            v[idx] = old - h
            b = total_logprob(params, plan, decisions)
            v[idx] = old
            num = (a - b) / (2 * h)
            worst = max(worst, abs(num - g[k][idx]) / (max(abs(num), abs(g[k][idx])) + 1e-8))
    return worst


class TestEpisodes:
    def test_zero_weights_give_uniform_choices(self):
        space = LayeredSpace(max_layers=4)
        plan = plan_for(space)
        p = {k: np.zeros_like(v) for k, v in init_params(plan, hidden=8).items()}
        tr = sample_episode(p, plan, 0)
        idx = 0
        for t, step in enumerate(tr.decisions.steps):
            heads = plan.first_heads if t == 0 else plan.step_heads
            for name in heads:
                assert tr.logprobs[idx] == pytest.approx(-math.log(plan.heads[name]), abs=1e-12)
                idx += 1
        # remaining decisions are edges at sigmoid(0) = 0.5
        assert len(tr.logprobs) - idx == len(tr.decisions.edges) > 0
        assert all(lp == pytest.approx(math.log(0.5), abs=1e-12) for lp in tr.logprobs[idx:])

    def test_size_four_head_logprob(self):
        plan = BanditPlan(4)
        p = {k: np.zeros_like(v) for k, v in init_params(plan, hidden=4).items()}
        for arm in range(4):
            assert total_logprob(p, plan, Decisions([{"arm": arm}])) == pytest.approx(math.log(0.25), abs=1e-15)

    @pytest.mark.parametrize("space", SPACES, ids=lambda s: type(s).__name__)
    def test_deterministic(self, space):
        ctrl = Controller(space, seed=2)
        a, b = ctrl.sample_episode(17), ctrl.sample_episode(17)
        assert a.decisions == b.decisions and a.logprobs == b.logprobs and a.genome == b.genome

    @pytest.mark.parametrize("space", SPACES, ids=lambda s: type(s).__name__)
    def test_genomes_valid(self, space):
        ctrl = Controller(space, seed=0)
        for s in range(30):
            assert validate(ctrl.sample_episode(s).genome, space) == []

    @pytest.mark.parametrize("space", SPACES, ids=lambda s: type(s).__name__)
    def test_logprob_bookkeeping(self, space):
        plan = plan_for(space)
        p = {k: 5 * v for k, v in init_params(plan, hidden=6, seed=3).items()}
        for s in range(20):
            tr = sample_episode(p, plan, s)
            assert tr.total_logprob == pytest.approx(sum(tr.logprobs), abs=1e-12)
            assert math.exp(tr.total_logprob) == pytest.approx(float(np.prod(np.exp(tr.logprobs))), abs=1e-9)
            assert all(lp < 0 or lp == 0 for lp in tr.logprobs)
            assert total_logprob(p, plan, tr.decisions) == pytest.approx(tr.total_logprob, abs=1e-12)

    def test_cell_inputs_respect_block_index(self):
        ctrl = Controller(CellSpace(num_blocks=4), seed=1)
        for s in range(30):
            g = ctrl.sample_episode(s).genome
            for k, b in enumerate(g.blocks, start=1):
                assert b.input_a <= k and b.input_b <= k

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    def test_softmax_proper(self, logits):
        p = _softmax(np.array(logits), len(logits))
        assert abs(p.sum() - 1.0) <= 1e-9 and np.all(p >= 0)

    def test_heads_proper_on_random_states(self):
        plan = plan_for(LayeredSpace(max_layers=3))
        p = init_params(plan, hidden=8, seed=4)
        rng = np.random.default_rng(0)
        for _ in range(200):
            h = rng.normal(size=8) * 3
            for name, size in plan.heads.items():
                if size > 1:
                    assert abs(_softmax(p[f"head.{name}"].T @ h, size).sum() - 1.0) <= 1e-9

    def test_boltzmann_frequencies(self):
        plan = BanditPlan(6)
        p = {k: 8 * v for k, v in init_params(plan, hidden=4, seed=5).items()}
        probs = np.array([math.exp(total_logprob(p, plan, Decisions([{"arm": a}]))) for a in range(6)])
        assert abs(probs.sum() - 1) < 1e-12
        rng = np.random.default_rng(1)
        n = 10_000
        counts = np.bincount([sample_episode(p, plan, rng).genome for _ in range(n)], minlength=6)
        assert chisquare(counts, probs * n).pvalue > 1e-3


class TestGradient:
    def test_toy_controller_finite_differences(self):
        # hidden size 1, two arms: 2 x 4 + 4 + one 1x2 head plus embeddings stays tiny
        plan = BanditPlan(3)
        p = {k: 10 * v for k, v in init_params(plan, hidden=1, embed=1, seed=0).items()}
        n_params = sum(v.size for v in p.values())
        assert n_params <= 30
        for arm in range(3):
            assert fd_max_rel_error(p, plan, Decisions([{"arm": arm}])) < 1e-4

    @pytest.mark.parametrize("space", SPACES, ids=lambda s: type(s).__name__)
    def test_full_plans_finite_differences(self, space):
        plan = plan_for(space)
        p = {k: 10 * v for k, v in init_params(plan, hidden=3, seed=1).items()}
        tr = sample_episode(p, plan, 5)
        assert fd_max_rel_error(p, plan, tr.decisions) < 1e-4


class TestUpdate:
    def test_zero_advantage_keeps_params(self):
        ctrl = Controller(BanditPlan(4), hidden=4, seed=0)
        ctrl.baseline = 0.5
        before = {k: v.copy() for k, v in ctrl.params.items()}
        batch = [ctrl.sample_episode(s) for s in range(5)]
        for tr in batch:
            tr.reward = 0.5
        ctrl.update(batch)
        assert all(np.array_equal(before[k], ctrl.params[k]) for k in before)

    def test_clip(self):
        g = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
        assert global_norm(g) == 5.0
        c = clip_by_global_norm(g, 1.0)
        assert global_norm(c) == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(c["a"], [0.6, 0.0])
        assert clip_by_global_norm({"a": np.array([0.3])}, 1.0)["a"][0] == 0.3

    def test_adam_first_step_oracle(self):
        # beta1 = 0: the first step moves each parameter by lr * g / (|g| + eps) exactly
        ctrl = Controller(BanditPlan(3), hidden=2, seed=1)
        ctrl.baseline = 0.0
        before = {k: v.copy() for k, v in ctrl.params.items()}
        tr = ctrl.sample_episode(3)
        tr.reward = 0.25
        g = grad_logprob(before, ctrl.plan, tr.decisions)
        grads = {k: -0.25 * v for k, v in g.items()}
        grads = clip_by_global_norm(grads, 1.0)
        ctrl.update([tr])
        for k in before:
            expect = before[k] - 1e-3 * grads[k] / (np.abs(grads[k]) + 1e-8)
            np.testing.assert_allclose(ctrl.params[k], np.float32(expect), atol=1e-7)

    def test_baseline_ema(self):
        ctrl = Controller(BanditPlan(3), hidden=2, seed=0)
        batch = [ctrl.sample_episode(s) for s in range(5)]
        for i, tr in enumerate(batch):
            tr.reward = 0.1 * i
        ctrl.update(batch)
        assert ctrl.baseline == pytest.approx(0.2, abs=1e-7)
        for tr in batch:
            tr.reward = 1.0
        info = ctrl.update(batch)
        assert info["baseline"] == pytest.approx(0.2, abs=1e-7)
        assert ctrl.baseline == pytest.approx(0.95 * 0.2 + 0.05 * 1.0, abs=1e-7)

    def test_reward_shift_invariance_after_baseline_absorbs_it(self):
        a = Controller(BanditPlan(5), hidden=4, seed=9)
        b = Controller(BanditPlan(5), hidden=4, seed=9)
        for ctrl, k in ((a, 0.5), (b, 0.75)):
            for it in range(20):  # constant rewards: baseline converges to k, no movement
                batch = [ctrl.sample_episode([it, s]) for s in range(5)]
                for tr in batch:
                    tr.reward = k
                ctrl.update(batch)
        assert a.baseline == 0.5 and b.baseline == 0.75
        for it in range(10):
            ba = [a.sample_episode([100, it, s]) for s in range(5)]
            bb = [b.sample_episode([100, it, s]) for s in range(5)]
            for tra, trb, r in zip(ba, bb, [0.0, 0.125, 0.5, 0.875, 1.0]):
                tra.reward, trb.reward = r, r + 0.25
            a.update(ba)
            b.update(bb)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_zero_reward_drift_bound(self):
        ctrl = Controller(BanditPlan(4), hidden=4, seed=0)
        for it in range(20):
            before = {k: v.copy() for k, v in ctrl.params.items()}
            batch = [ctrl.sample_episode([it, s]) for s in range(5)]
            for tr in batch:
                tr.reward = 0.0
            ctrl.update(batch)
            drift = max(float(np.abs(ctrl.params[k] - before[k]).max()) for k in before)
            assert drift <= 1.0 * 1e-3

    def test_non_finite_reward(self):
        ctrl = Controller(BanditPlan(3), hidden=2)
        tr = ctrl.sample_episode(0)
        tr.reward = float("nan")
        with pytest.raises(ControllerError):
            ctrl.update([tr])

    def test_non_finite_gradient_aborts(self):
        ctrl = Controller(BanditPlan(3), hidden=2)
        ctrl.baseline = 0.0
        tr = ctrl.sample_episode(0)
        tr.reward = 1e308
        before = {k: v.copy() for k, v in ctrl.params.items()}
        with pytest.raises(ControllerError, match="non-finite"):
            ctrl.update([tr, tr])
        assert all(np.array_equal(before[k], ctrl.params[k]) for k in before)

    def test_checkpoint_round_trip(self, tmp_path):
        ctrl = Controller(MicroSpace(), seed=3)
        for it in range(3):
            batch = [ctrl.sample_episode([it, s]) for s in range(5)]
            for tr in batch:
                tr.reward = float(len(tr.genome.layers)) / 3
            ctrl.update(batch)
        save_checkpoint(tmp_path / "c.tgrl", ctrl.state_tensors())
        other = Controller(MicroSpace(), seed=99)
        other.load_state_tensors(load_checkpoint(tmp_path / "c.tgrl"))
        for k in ctrl.params:
            assert np.array_equal(ctrl.params[k], other.params[k])
            assert np.array_equal(ctrl.m[k], other.m[k]) and np.array_equal(ctrl.v[k], other.v[k])
        assert (other.step, other.baseline) == (ctrl.step, ctrl.baseline)
        assert other.sample_episode(5).decisions == ctrl.sample_episode(5).decisions


class TestLoop:
    def test_budget_below_batch(self):
        with pytest.raises(ValueError, match="batch"):
            rl_loop(MicroSpace(), lambda g: 0.5, 4, batch_size=5)

    def test_records_every_sample(self):
        hist, ctrl = rl_loop(MicroSpace(), lambda g: 0.5, 15, seed=1, batch_size=5)
        assert hist.n_samples == 15 and ctrl.step == 3
        assert [o.sample_id for o in hist] == list(range(15))

    def test_bandit_learns_best_arm(self):
        plan = BanditPlan(8)
        hist, ctrl = rl_loop(plan, lambda arm: 1.0 if arm == 5 else 0.2, 5 * 600, seed=0)
        p_best = math.exp(total_logprob(ctrl.params, ctrl.plan, Decisions([{"arm": 5}])))
        assert p_best >= 0.9
