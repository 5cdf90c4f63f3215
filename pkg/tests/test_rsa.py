import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp
from scipy.spatial.distance import pdist, squareform
from scipy.stats import pearsonr

from tgsage.rsa import (
    ActivationMatrix,
    Rdm,
    RsaError,
    TeacherSpec,
    category_means,
    combined_score,
    compute_category_rdm,
    compute_rdm,
    rdm_similarity,
    score_candidate,
    tg_score,
)


def act(values, cats=None):
    values = np.asarray(values, dtype=float)
    return ActivationMatrix(values, [f"i{k}" for k in range(len(values))], cats)


def rdm_from_upper(upper, n=3, ids=None):
    m = np.zeros((n, n))
    m[np.triu_indices(n, 1)] = upper
    m = m + m.T
    return Rdm(m, ids or [f"i{k}" for k in range(n)])


def random_teacher(rng, n=12, layers=3):
    rdms = {f"L{k}": compute_rdm(act(rng.normal(size=(n, 20)))) for k in range(1, layers + 1)}
    return TeacherSpec.from_rdms(rdms)


def _with_spread(a):
    # a per-column ramp gives every row nonzero variance without heavy filtering
    return a + np.linspace(0.0, 1.0, a.shape[1])[None, :]


matrices = (
    st.integers(3, 30)
    .flatmap(
        lambda n: hnp.arrays(
            np.float64,
            st.tuples(st.just(n), st.integers(4, 40)),
            elements=st.floats(-1e3, 1e3, allow_nan=False, width=64),
        )
    )
    .map(_with_spread)
    .filter(lambda a: np.all(np.ptp(a, axis=1) > 0))
)


class TestComputeRdm:
    def test_worked_example(self):
        m = compute_rdm(act([[1, 2, 3], [2, 4, 6], [3, 2, 1]])).values
        assert (m[0, 1], m[0, 2], m[1, 2]) == (0.0, 2.0, 2.0)

    def test_identical_rows(self, rng):
        F = rng.normal(size=(6, 9))
        F[4] = F[1]
        assert compute_rdm(act(F)).values[1, 4] == 0.0

    def test_full_subsample_is_noop(self, rng):
        F = rng.normal(size=(50, 20))
        a = compute_rdm(act(F), subsample_size=20, seed=3).values
        b = compute_rdm(act(F), subsample_size=None).values
        assert np.array_equal(a, b)

    def test_matches_scipy_correlation_distance(self, rng):
        F = rng.normal(size=(25, 40))
        np.testing.assert_allclose(compute_rdm(act(F), None).values, squareform(pdist(F, "correlation")), atol=1e-12)

    def test_subsample_is_seeded_without_replacement(self, rng):
        F = rng.normal(size=(10, 600))
        a = compute_rdm(act(F), 512, seed=1).values
        assert np.array_equal(a, compute_rdm(act(F), 512, seed=1).values)
        assert not np.array_equal(a, compute_rdm(act(F), 512, seed=2).values)
        # oracle: the same columns chosen by hand
        cols = np.random.default_rng(1).choice(600, 512, replace=False)
        np.testing.assert_allclose(a, squareform(pdist(F[:, cols], "correlation")), atol=1e-12)

    def test_default_subsample_is_512(self, rng):
        F = rng.normal(size=(8, 700))
        np.testing.assert_array_equal(compute_rdm(act(F)).values, compute_rdm(act(F), 512, 0).values)

    def test_zero_variance_row_names_input(self, rng):
        F = rng.normal(size=(5, 7))
        F[3] = 2.0
        with pytest.raises(RsaError, match="i3"):
            compute_rdm(act(F))

    def test_too_few_inputs(self):
        with pytest.raises(RsaError, match="3"):
            compute_rdm(act([[1, 2, 3], [3, 1, 2]]))

    def test_duplicate_ids_rejected(self):
        with pytest.raises(RsaError):
            ActivationMatrix(np.eye(3), ["a", "a", "b"])

    @given(matrices)
    def test_invariants(self, F):
        m = compute_rdm(act(F), None).values
        assert np.array_equal(m, m.T)
        assert np.all(np.diag(m) == 0.0)
        assert m.min() >= 0.0 and m.max() <= 2.0

    @given(matrices, st.randoms(use_true_random=False))
    def test_column_permutation_exact(self, F, r):
        perm = list(range(F.shape[1]))
        r.shuffle(perm)
        assert np.array_equal(compute_rdm(act(F), None).values, compute_rdm(act(F[:, perm]), None).values)

    @given(
        hnp.arrays(np.float64, st.tuples(st.integers(3, 20), st.integers(4, 30)), elements=st.floats(-10, 10)),
        st.floats(0.01, 100),
        st.floats(-100, 100),
        st.integers(0, 19),
    )
    def test_row_affine_invariance(self, F, a, b, row):
        row = row % F.shape[0]
        if np.any(np.std(F, axis=1) < 1e-3):
            return
        G = F.copy()
        G[row] = a * G[row] + b
        np.testing.assert_allclose(compute_rdm(act(F), None).values, compute_rdm(act(G), None).values, atol=1e-9)


class TestCategoryRdm:
    def test_duplicates_equal_representatives(self, rng):
        reps = rng.normal(size=(4, 10))
        F = np.repeat(reps, 3, axis=0)
        cats = [f"c{k}" for k in range(4) for _ in range(3)]
        a = compute_category_rdm(act(F, cats)).values
        np.testing.assert_allclose(a, compute_rdm(act(reps)).values, atol=1e-12)

    def test_eight_categories_shape(self, rng):
        F = rng.normal(size=(64, 30))
        cats = [f"obj{k % 8}" for k in range(64)]
        rdm = compute_category_rdm(act(F, cats))
        assert rdm.values.shape == (8, 8)
        assert rdm.ids == tuple(f"obj{k}" for k in range(8))

    def test_arithmetic_mean(self):
        means, cats = category_means(act([[0, 1], [2, 3], [5, 9]], ["a", "a", "b"]))
        np.testing.assert_array_equal(means[0], [1, 2])
        assert cats == ("a", "b")

    def test_first_appearance_order(self, rng):
        _, cats = category_means(act(rng.normal(size=(4, 3)), ["z", "a", "z", "m"]))
        assert cats == ("z", "a", "m")

    def test_missing_categories(self, rng):
        with pytest.raises(RsaError, match="category"):
            compute_category_rdm(act(rng.normal(size=(4, 3))))


class TestSimilarity:
    def test_self(self, rng):
        m = compute_rdm(act(rng.normal(size=(10, 5))))
        assert abs(rdm_similarity(m, m) - 1.0) <= 1e-12

    def test_reversed(self):
        assert rdm_similarity(rdm_from_upper([0.1, 0.2, 0.3]), rdm_from_upper([0.3, 0.2, 0.1])) == pytest.approx(-1.0, abs=1e-12)

    def test_affine(self):
        u = np.array([0.1, 0.7, 0.3])
        assert rdm_similarity(rdm_from_upper(u), rdm_from_upper(0.5 * u + 0.1)) == pytest.approx(1.0, abs=1e-12)

    def test_matches_scipy(self, rng):
        a = compute_rdm(act(rng.normal(size=(15, 8))))
        b = compute_rdm(act(rng.normal(size=(15, 8))))
        assert rdm_similarity(a, b) == pytest.approx(pearsonr(a.upper(), b.upper())[0], abs=1e-12)

    def test_dimension_mismatch(self, rng):
        a = compute_rdm(act(rng.normal(size=(5, 8))))
        b = compute_rdm(act(rng.normal(size=(6, 8))))
        with pytest.raises(RsaError, match="mismatch"):
            rdm_similarity(a, b)

    def test_zero_variance_triangle(self):
        with pytest.raises(RsaError, match="variance"):
            rdm_similarity(rdm_from_upper([1, 1, 1]), rdm_from_upper([0.1, 0.2, 0.3]))

    @given(st.integers(0, 10_000))
    def test_symmetric(self, seed):
        r = np.random.default_rng(seed)
        a = compute_rdm(act(r.normal(size=(7, 5))))
        b = compute_rdm(act(r.normal(size=(7, 5))))
        assert rdm_similarity(a, b) == rdm_similarity(b, a)
        assert -1.0 <= rdm_similarity(a, b) <= 1.0

    def test_rdm_type_rejects_bad_values(self):
        with pytest.raises(RsaError):
            Rdm(np.array([[0, 1, 2], [1, 0, 1], [2, 0.5, 0]]), "abc")
        with pytest.raises(RsaError):
            Rdm(np.array([[0.1, 1], [1, 0]]), "ab")
        with pytest.raises(RsaError):
            Rdm(np.array([[0, 3], [3, 0]]), "ab")


class TestTg:
    def test_copies_of_teacher(self, rng):
        teacher = random_teacher(rng)
        res = tg_score({l.name: l.rdm for l in teacher.layers}, teacher)
        assert res.similarities == pytest.approx((1.0, 1.0, 1.0), abs=1e-12)
        assert res.tg == pytest.approx(1.0, abs=1e-12)
        assert res.best_layers == ("L1", "L2", "L3")

    def test_max_over_candidates(self):
        t = rdm_from_upper([0.1, 0.5, 0.9, 0.4, 0.3, 0.8], n=4)
        teacher = TeacherSpec.from_rdms({"T": t})
        # build candidates with known correlations to the teacher triangle
        u = t.upper()
        noise = np.array([0.3, -0.1, 0.2, 0.5, -0.4, 0.1])
        cands = {"a": rdm_from_upper(0.5 + 0.2 * (u - u.mean()) + 0.1 * noise, 4),
                 "b": rdm_from_upper(0.5 + 0.2 * (u - u.mean()) + 0.02 * noise, 4)}
        sims = {k: pearsonr(u, v.upper())[0] for k, v in cands.items()}
        res = tg_score(cands, teacher)
        assert res.similarities[0] == pytest.approx(max(sims.values()), abs=1e-12)
        assert res.best_layers == ("b",)

    def test_mean_of_s(self):
        # teacher layers L1, L2; candidate equals L1, and its similarity to L2 is computed via scipy
        t1 = rdm_from_upper([0.1, 0.5, 0.9, 0.4, 0.3, 0.8], 4)
        t2 = rdm_from_upper([0.9, 0.2, 0.4, 0.1, 0.6, 0.5], 4)
        teacher = TeacherSpec.from_rdms({"L1": t1, "L2": t2})
        res = tg_score({"c": t1}, teacher)
        s2 = pearsonr(t1.upper(), t2.upper())[0]
        assert res.tg == pytest.approx((1.0 + s2) / 2, abs=1e-12)

    def test_alignment_mismatch(self, rng):
        teacher = random_teacher(rng, n=5, layers=1)
        other = Rdm(teacher.layers[0].rdm.values, [f"x{k}" for k in range(5)])
        with pytest.raises(RsaError, match="aligned"):
            tg_score({"c": other}, teacher)

    def test_empty_candidate(self, rng):
        with pytest.raises(RsaError):
            tg_score({}, random_teacher(rng, layers=1))

    @given(st.integers(0, 10_000), st.integers(1, 4))
    def test_adding_layer_never_decreases(self, seed, k):
        r = np.random.default_rng(seed)
        teacher = random_teacher(r, n=8)
        cands = [(f"c{i}", compute_rdm(act(r.normal(size=(8, 6))))) for i in range(k + 1)]
        before = tg_score(cands[:k], teacher)
        after = tg_score(cands, teacher)
        assert all(b2 >= b1 for b1, b2 in zip(before.similarities, after.similarities))
        assert after.tg >= before.tg

    def test_teacher_alignment_required(self, rng):
        a = compute_rdm(act(rng.normal(size=(5, 4))))
        b = Rdm(a.values, list("vwxyz"))
        with pytest.raises(RsaError):
            TeacherSpec.from_rdms({"a": a, "b": b})


class TestCombined:
    def test_examples(self):
        assert combined_score(0.3, 0.5, 1.0) == pytest.approx(0.8, abs=1e-15)
        assert combined_score(0.3, 0.2, 5.0) == pytest.approx(1.3, abs=1e-15)
        assert combined_score(0.42, 0.9, 0.0) == 0.42

    def test_negative_alpha(self):
        with pytest.raises(ValueError):
            combined_score(0.1, 0.1, -1)

    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(-1, 1)), min_size=1, max_size=30))
    def test_alpha_zero_argmax_is_argmax_p(self, pool):
        scores = [combined_score(p, tg, 0.0) for p, tg in pool]
        assert scores == [p for p, _ in pool]
        assert int(np.argmax(scores)) == int(np.argmax([p for p, _ in pool]))


class TestScoreCandidate:
    def test_identical_single_layer(self, rng):
        F = act(rng.normal(size=(10, 30)))
        teacher = TeacherSpec.from_rdms({"T": compute_rdm(F)})
        s = score_candidate([F], 0.0, teacher, alpha=2.5)
        assert s.combined == pytest.approx(2.5, abs=1e-12)

    def test_alpha_zero_ignores_activations(self, rng):
        teacher = random_teacher(rng, n=10)
        a = score_candidate([act(rng.normal(size=(10, 4)))], 0.37, teacher, alpha=0.0)
        b = score_candidate([act(rng.normal(size=(10, 4)))], 0.37, teacher, alpha=0.0)
        assert a.combined == b.combined == 0.37

    def test_records_intermediates(self, rng):
        teacher = random_teacher(rng, n=10)
        s = score_candidate([act(rng.normal(size=(10, 4))) for _ in range(2)], 0.5, teacher, alpha=1.0)
        assert s.tg == pytest.approx(np.mean(s.similarities), abs=1e-15)
        assert s.combined == s.p + s.alpha * s.tg
        assert s.teacher_layers == ("L1", "L2", "L3")
        d = s.to_dict()
        assert type(s).from_dict(d) == s

    def test_per_category_mode(self, rng):
        cats = [f"c{k % 4}" for k in range(12)]
        F = act(rng.normal(size=(12, 5)), cats)
        teacher = TeacherSpec.from_rdms({"T": compute_category_rdm(F)})
        s = score_candidate([F], 0.1, teacher, mode="per-category")
        assert s.tg == pytest.approx(1.0, abs=1e-12)
