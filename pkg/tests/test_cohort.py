import numpy as np
import pytest

from xpbench.cohort import (
    THRESHOLD_GRID,
    DropoutFilter,
    filter_early_dropouts,
    fit_dropout_filter,
    representative_sample,
    write_sample_csv,
)
from xpbench.errors import InsufficientClassError, InvalidInputError
from xpbench.predictor import PredictorHandle


def fixed_prob_filter(pass_probs, threshold):
    probs = np.asarray(pass_probs, dtype=float)
    handle = PredictorHandle(lambda X: probs[: X.shape[0]], "stub", 2, 1)
    return DropoutFilter(handle, threshold)


class TestDropoutFilter:
    def test_grid_definition(self):
        assert THRESHOLD_GRID == (0.96, 0.97, 0.98, 0.99, 0.995, 0.999)

    def test_separable_ties_break_to_largest_threshold(self):
        grades = np.array([[0.0, 0.0]] * 40 + [[1.0, 1.0]] * 40)
        labels = np.array([0] * 40 + [1] * 40)
        fitted = fit_dropout_filter(grades, labels)
        assert fitted.threshold == 0.999

    def test_boundary_is_strict(self):
        dropout = fixed_prob_filter([1 - 0.9991, 1 - 0.999], 0.999)
        retained = filter_early_dropouts(dropout, np.zeros((2, 2)), ["a", "b"])
        assert retained == ["b"]  # p_fail 0.9991 removed, 0.999 kept

    def test_empty_cohort(self):
        dropout = fixed_prob_filter([], 0.99)
        assert filter_early_dropouts(dropout, np.zeros((0, 2)), []) == []

    def test_needs_two_grade_columns(self):
        with pytest.raises(InvalidInputError):
            fit_dropout_filter(np.zeros((10, 1)), np.array([0, 1] * 5))

    def test_filtered_count_matches_independent_oracle(self):
        # 30% trivially failing students; oracle re-implements the whole
        # rule with sklearn's logistic fit
        sklearn = pytest.importorskip("sklearn.linear_model")
        rng = np.random.default_rng(42)
        n = 500
        failing = rng.random(n) < 0.3
        grades = np.where(failing[:, None],
                          rng.uniform(0.0, 0.05, (n, 2)),
                          rng.uniform(0.3, 1.0, (n, 2)))
        labels = (~failing).astype(int)
        fitted = fit_dropout_filter(grades, labels)
        ours = len(filter_early_dropouts(fitted, grades,
                                         [str(i) for i in range(n)]))

        clf = sklearn.LogisticRegression(C=1e4).fit(grades, labels)
        p_fail = clf.predict_proba(grades)[:, 0]
        best_bac, best_thr = -1.0, None
        for thr in THRESHOLD_GRID:
            pred = np.where(p_fail > thr, 0, 1)
            recalls = [np.mean(pred[labels == c] == c) for c in (0, 1)]
            bac = np.mean(recalls)
            if bac >= best_bac:
                best_bac, best_thr = bac, thr
        oracle = int(np.sum(p_fail <= best_thr))
        assert abs(ours - oracle) <= 5

    def test_raising_threshold_never_removes_more(self):
        rng = np.random.default_rng(1)
        p_fail = rng.uniform(0.9, 1.0, 50)
        counts = []
        for thr in THRESHOLD_GRID:
            dropout = fixed_prob_filter(1 - p_fail, thr)
            counts.append(len(filter_early_dropouts(
                dropout, np.zeros((50, 2)), [str(i) for i in range(50)])))
        assert all(a <= b for a, b in zip(counts, counts[1:]))


class TestRepresentativeSample:
    def test_exhaustive_class(self):
        probs = np.linspace(0, 1, 100)
        labels = np.array([0] * 50 + [1] * 50)
        sample = representative_sample(probs, labels, 100, seed=0)
        assert sorted(sample.indices.tolist()) == list(range(100))

    def test_rank_formula_on_100_members(self):
        # independent evaluation of round(i*(m-1)/(k-1)) with m=100, k=50
        rng = np.random.default_rng(7)
        probs = np.concatenate([rng.permutation(100) / 100.0,
                                rng.uniform(0, 1, 50)])
        labels = np.array([0] * 100 + [1] * 50)
        sample = representative_sample(probs, labels, 100, seed=3)
        expected = sorted({int(np.floor(i * 99 / 49 + 0.5)) for i in range(50)})
        got = sorted(sample.ranks[sample.labels == 0].tolist())
        assert got == expected

    def test_insufficient_class_names_the_class(self):
        probs = np.linspace(0, 1, 30)
        with pytest.raises(InsufficientClassError) as err:
            representative_sample(probs, np.ones(30, dtype=int), 10)
        assert err.value.class_label == 0

    def test_extremes_always_included(self):
        rng = np.random.default_rng(11)
        for trial in range(30):
            n_members = rng.integers(8, 60)
            probs = rng.uniform(0, 1, n_members * 2)
            labels = np.array([0] * n_members + [1] * n_members)
            k = int(rng.integers(2, min(8, n_members))) * 2
            sample = representative_sample(probs, labels, k, seed=trial)
            for cls in (0, 1):
                members = np.flatnonzero(labels == cls)
                chosen = sample.indices[sample.labels == cls]
                assert members[np.argmin(probs[members])] in chosen
                assert members[np.argmax(probs[members])] in chosen

    def test_permutation_invariance_with_distinct_probs(self):
        rng = np.random.default_rng(5)
        probs = rng.permutation(40) / 40.0
        labels = np.array([0, 1] * 20)
        base = representative_sample(probs, labels, 20, seed=1)
        perm = rng.permutation(40)
        moved = representative_sample(probs[perm], labels[perm], 20, seed=9)
        assert sorted(perm[moved.indices].tolist()) == sorted(base.indices.tolist())

    def test_manifest_csv(self, tmp_path):
        probs = np.linspace(0.1, 0.9, 8)
        labels = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        sample = representative_sample(probs, labels, 4, seed=0)
        path = tmp_path / "sample.csv"
        write_sample_csv(sample, [f"s{i}" for i in range(8)], path)
        lines = path.read_text().splitlines()
        assert lines[0] == "student_id,class,p_hat,rank"
        assert len(lines) == 5
