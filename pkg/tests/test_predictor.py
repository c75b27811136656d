import numpy as np
import pytest

from xpbench.errors import (
    DegenerateLabelsError,
    InvalidInputError,
    UndefinedMetricError,
)
from xpbench.featgen import FeatureTensor
from xpbench.predictor import (
    Instance,
    LabeledDataset,
    PredictorHandle,
    balanced_accuracy,
    load_model,
    save_model,
    stratified_split,
    train_logistic,
    train_sequence_net,
)


def tensor_from_matrix(X, week_count=1):
    X = np.asarray(X, dtype=float)
    fcount = X.shape[1] // week_count
    data = X.reshape(X.shape[0], week_count, fcount)
    names = tuple(f"f{i}" for i in range(fcount))
    ids = tuple(f"s{i}" for i in range(X.shape[0]))
    return FeatureTensor(data, names, ids)


class TestLogistic:
    def test_separable_1d(self):
        X = np.array([[0.0]] * 50 + [[1.0]] * 50)
        y = np.array([0] * 50 + [1] * 50)
        handle = train_logistic(X, y, l2_strength=1e-6, max_iter=300)
        p = handle.predict(X)
        assert p[:50].max() < 0.5 < p[50:].min()
        assert np.mean((p >= 0.5) == y) == 1.0

    def test_threshold_rule_recovery(self):
        # labels come from an independent rule: pass iff mean grade > 0.5
        rng = np.random.default_rng(12)
        grades = rng.uniform(0, 1, (200, 6))
        y = (grades.mean(axis=1) > 0.5).astype(int)
        tr, te = stratified_split(y, 0.2, seed=12)
        handle = train_logistic(grades[tr], y[tr], l2_strength=1e-4, max_iter=2000)
        pred = (handle.predict(grades[te]) >= 0.5).astype(int)
        assert balanced_accuracy(y[te], pred) >= 0.95

    def test_all_zero_features_give_class_prior(self):
        X = np.zeros((100, 3))
        y = np.array([0] * 30 + [1] * 70)
        handle = train_logistic(X, y, l2_strength=1e-3)
        assert np.allclose(handle.predict(X), 0.7, atol=1e-3)
        assert np.abs(handle.params[0][1]).max() < 1e-8

    def test_loss_monotone_across_accepted_steps(self):
        rng = np.random.default_rng(0)
        X = rng.normal(0, 1, (80, 5))
        y = (X[:, 0] + 0.3 * rng.normal(size=80) > 0).astype(int)
        handle = train_logistic(X, y, l2_strength=1e-3, max_iter=200)
        losses = np.array(handle.training_losses)
        assert np.all(np.diff(losses) <= 1e-12)

    def test_l2_shrinkage_monotone(self):
        rng = np.random.default_rng(1)
        X = rng.normal(0, 1, (150, 4))
        y = (X[:, 1] > 0).astype(int)
        prior = y.mean()
        norms, gaps = [], []
        for l2 in (0.01, 1.0, 100.0):
            handle = train_logistic(X, y, l2_strength=l2, max_iter=500)
            norms.append(float(np.linalg.norm(handle.params[0][1])))
            gaps.append(float(np.abs(handle.predict(X) - prior).mean()))
        assert norms[0] > norms[1] > norms[2]
        assert gaps[0] > gaps[1] > gaps[2]

    def test_degenerate_labels(self):
        with pytest.raises(DegenerateLabelsError):
            train_logistic(np.ones((5, 2)), np.ones(5, dtype=int))

    def test_non_finite_features(self):
        X = np.ones((4, 2))
        X[0, 0] = np.nan
        with pytest.raises(InvalidInputError):
            train_logistic(X, np.array([0, 1, 0, 1]))


class TestBalancedAccuracy:
    def test_perfect(self):
        assert balanced_accuracy([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0

    def test_all_positive_degenerate(self):
        assert balanced_accuracy([0, 0, 1, 1], [1, 1, 1, 1]) == 0.5

    def test_hand_counted_recalls(self):
        # class-0 recall 2/3, class-1 recall 1 -> (2/3 + 1)/2
        assert balanced_accuracy([0, 0, 0, 1], [0, 0, 1, 1]) == pytest.approx(5 / 6)

    def test_single_class_truth_is_undefined(self):
        with pytest.raises(UndefinedMetricError):
            balanced_accuracy([1, 1, 1], [0, 1, 1])

    def test_relabeling_symmetry(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            y = rng.integers(0, 2, 30)
            if np.unique(y).size < 2:
                continue
            p = rng.integers(0, 2, 30)
            assert balanced_accuracy(y, p) == pytest.approx(
                balanced_accuracy(1 - y, 1 - p))


class TestSequenceNet:
    def _dataset(self, seed=0, n=120, w=4, f=5, signal=True):
        rng = np.random.default_rng(seed)
        X = rng.uniform(0, 1, (n, w, f))
        if signal:
            y = (X[:, :, 0].mean(axis=1) > 0.5).astype(int)
        else:
            y = rng.integers(0, 2, n)
        if np.unique(y).size < 2:  # guard degenerate draw
            y[0] = 1 - y[0]
        tensor = FeatureTensor(X, tuple(f"f{i}" for i in range(f)),
                               tuple(f"s{i}" for i in range(n)))
        return LabeledDataset(tensor, y, tensor.student_ids)

    def test_course_model_beats_bar(self, course7, course7_model):
        labels = course7["labels"]
        tensor = course7["tensor"]
        handle = course7_model["handle"]
        test_idx = course7_model["test_idx"]
        pred = (handle.predict(tensor.subset(test_idx).flat_matrix()) >= 0.5).astype(int)
        assert balanced_accuracy(labels[test_idx], pred) >= 0.85

    def test_shuffled_labels_are_unlearnable(self, course7):
        labels = np.random.default_rng(0).permutation(course7["labels"])
        tensor = course7["tensor"]
        tr, te = stratified_split(labels, 0.2, seed=0)
        ds = LabeledDataset(tensor.subset(tr), labels[tr],
                            [tensor.student_ids[i] for i in tr])
        handle = train_sequence_net(ds, hidden_sizes=(32, 16), epochs=15, seed=0)
        pred = (handle.predict(tensor.subset(te).flat_matrix()) >= 0.5).astype(int)
        assert 0.4 <= balanced_accuracy(labels[te], pred) <= 0.6

    def test_final_loss_below_initial(self):
        ds = self._dataset()
        handle = train_sequence_net(ds, hidden_sizes=(8,), epochs=5, seed=1)
        assert handle.final_loss < handle.initial_loss

    def test_longer_budget_never_worse(self):
        ds = self._dataset(seed=3)
        short = train_sequence_net(ds, hidden_sizes=(8,), epochs=1, seed=9)
        long = train_sequence_net(ds, hidden_sizes=(8,), epochs=15, seed=9)
        assert long.final_loss <= short.final_loss

    def test_seed_determinism(self, tmp_path):
        ds = self._dataset(seed=4)
        a = train_sequence_net(ds, hidden_sizes=(8, 4), epochs=3, seed=11)
        b = train_sequence_net(ds, hidden_sizes=(8, 4), epochs=3, seed=11)
        for (_, va), (_, vb) in zip(a.params, b.params):
            assert np.array_equal(va, vb)
        save_model(a, tmp_path / "a.txt")
        save_model(b, tmp_path / "b.txt")
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_week_shared_variant_trains(self):
        ds = self._dataset(seed=6)
        handle = train_sequence_net(ds, hidden_sizes=(6, 8), epochs=5, seed=2,
                                    week_shared=True)
        assert handle.kind == "mlp-weekshared"
        assert handle.final_loss < handle.initial_loss

    def test_validation_errors(self):
        ds = self._dataset()
        with pytest.raises(InvalidInputError):
            train_sequence_net(ds, hidden_sizes=())
        with pytest.raises(InvalidInputError):
            train_sequence_net(ds, learning_rate=0.0)
        one_class = LabeledDataset(ds.features, np.zeros(len(ds), dtype=int),
                                   ds.student_ids)
        with pytest.raises(DegenerateLabelsError):
            train_sequence_net(one_class)


class TestModelIO:
    @pytest.mark.parametrize("kind,kwargs", [
        ("logistic", {}),
        ("mlp", {"week_shared": False}),
        ("mlp-weekshared", {"week_shared": True}),
    ])
    def test_round_trip_predictions(self, tmp_path, kind, kwargs):
        rng = np.random.default_rng(2)
        X = rng.uniform(0, 1, (60, 3, 4))
        y = (X[:, :, 1].mean(axis=1) > 0.5).astype(int)
        tensor = tensor_from_matrix(X.reshape(60, 12), week_count=3)
        if kind == "logistic":
            handle = train_logistic(X.reshape(60, 12), y, week_count=3)
        else:
            ds = LabeledDataset(tensor, y, tensor.student_ids)
            handle = train_sequence_net(ds, hidden_sizes=(5, 4), epochs=3,
                                        seed=0, **kwargs)
        path = tmp_path / "model.txt"
        save_model(handle, path)
        loaded = load_model(path)
        probe = rng.uniform(0, 1, (20, 12))
        assert np.array_equal(handle.predict(probe), loaded.predict(probe))
        assert loaded.kind == handle.kind


class TestHandleContract:
    def test_output_range_enforced(self):
        bad = PredictorHandle(lambda X: np.full(X.shape[0], 1.5), "bad", 1, 2)
        with pytest.raises(InvalidInputError):
            bad.predict(np.zeros((3, 2)))

    def test_batch_length_enforced(self):
        bad = PredictorHandle(lambda X: np.zeros(X.shape[0] + 1), "bad", 1, 2)
        with pytest.raises(InvalidInputError):
            bad.predict(np.zeros((3, 2)))

    def test_width_and_finiteness(self):
        ok = PredictorHandle(lambda X: np.full(X.shape[0], 0.5), "ok", 1, 2)
        with pytest.raises(InvalidInputError):
            ok.predict(np.zeros((3, 5)))
        with pytest.raises(InvalidInputError):
            ok.predict(np.array([[np.nan, 0.0]]))

    def test_repeated_calls_identical(self):
        handle = PredictorHandle(lambda X: X[:, 0] * 0.5, "half", 1, 3)
        X = np.random.default_rng(0).uniform(0, 1, (10, 3))
        assert np.array_equal(handle.predict(X), handle.predict(X))

    def test_instance_batches(self):
        handle = PredictorHandle(lambda X: X[:, 0], "id0", 1, 2)
        insts = [Instance(np.array([0.3, 0.9]), 1, ("a", "b"))]
        assert handle.predict(insts)[0] == pytest.approx(0.3)


class TestInstance:
    def test_length_validation(self):
        with pytest.raises(InvalidInputError):
            Instance(np.zeros(5), 2, ("a", "b"))

    def test_finite_validation(self):
        with pytest.raises(InvalidInputError):
            Instance(np.array([np.inf, 0.0]), 1, ("a", "b"))


class TestStratifiedSplit:
    def test_rounding_ties_toward_test(self):
        # class 0 has 10 members: 10*0.25 = 2.5 rounds up to 3 test rows
        labels = np.array([0] * 10 + [1] * 16)
        train, test = stratified_split(labels, 0.25, seed=0)
        assert np.sum(labels[test] == 0) == 3
        assert np.sum(labels[test] == 1) == 4
        assert np.intersect1d(train, test).size == 0
        assert train.size + test.size == labels.size

    def test_deterministic(self):
        labels = np.random.default_rng(1).integers(0, 2, 40)
        a = stratified_split(labels, 0.2, seed=5)
        b = stratified_split(labels, 0.2, seed=5)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
