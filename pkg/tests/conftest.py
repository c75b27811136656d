import numpy as np
import pytest

from xpbench.featgen import extract_features, normalize
from xpbench.predictor import (
    Instance,
    LabeledDataset,
    PredictorHandle,
    stratified_split,
    train_sequence_net,
)
from xpbench.simgen import SimConfig, dsp1_skill_dag, generate_course


def make_random_net(seed, d, hidden=16, weight_scale=0.7):
    """Frozen random MLP wrapped as a PredictorHandle; smooth and in [0, 1]."""
    rng = np.random.default_rng(seed)
    W1 = rng.normal(0, weight_scale, (d, hidden))
    b1 = rng.normal(0, 0.3, hidden)
    W2 = rng.normal(0, weight_scale, (hidden, 1))
    b2 = rng.normal(0, 0.3, 1)

    def fn(X):
        h = np.maximum(X @ W1 + b1, 0.0)
        return 1.0 / (1.0 + np.exp(-(h @ W2 + b2)[:, 0]))

    return PredictorHandle(fn, f"randnet{seed}", 1, d)


def make_instance(values, instance_id="t0"):
    values = np.asarray(values, dtype=float)
    return Instance(values, 1, tuple(f"f{i}" for i in range(values.size)),
                    instance_id=instance_id)


@pytest.fixture(scope="session")
def course7():
    """The reference synthetic course: dsp1 DAG, 300 students, seed 7."""
    dag = dsp1_skill_dag()
    event_log, schedule, book, labels = generate_course(
        dag, SimConfig(student_count=300, seed=7))
    tensor = normalize(extract_features(event_log, schedule, book,
                                        schedule.week_count))
    return dict(dag=dag, log=event_log, schedule=schedule, book=book,
                labels=labels, tensor=tensor)


@pytest.fixture(scope="session")
def course7_model(course7):
    """Success model trained on the reference course's train split."""
    labels = course7["labels"]
    tensor = course7["tensor"]
    train_idx, test_idx = stratified_split(labels, 0.2, seed=7)
    dataset = LabeledDataset(tensor.subset(train_idx), labels[train_idx],
                             [tensor.student_ids[i] for i in train_idx])
    handle = train_sequence_net(dataset, hidden_sizes=(32, 16), epochs=15, seed=7)
    return dict(handle=handle, train_idx=train_idx, test_idx=test_idx,
                background=tensor.flat_matrix()[train_idx])
