"""Early-dropout filtering and representative sampling of explanation targets.

Students whose failure is predictable from the first two weeks' grades alone
are filtered out before modeling.  From the remaining cohort, an even,
class-balanced sample spanning the model's probability range is picked for
the (expensive) explanation runs.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientClassError, InvalidInputError
from .predictor import balanced_accuracy, train_logistic

# candidate probability cutoffs for the dropout rule; endpoints fixed, the
# operating point 0.99 included
THRESHOLD_GRID = (0.96, 0.97, 0.98, 0.99, 0.995, 0.999)


@dataclass(frozen=True)
class DropoutFilter:
    """Logistic model over 2-week grade vectors plus the chosen cutoff."""

    model: object  # PredictorHandle over 2 columns
    threshold: float

    def fail_probabilities(self, grades2):
        grades2 = _check_grades2(grades2)
        return 1.0 - self.model.predict(grades2)


def _check_grades2(grades2):
    grades2 = np.asarray(grades2, dtype=float)
    if grades2.ndim != 2 or grades2.shape[1] < 2:
        raise InvalidInputError("need a (students, 2) grade matrix")
    return grades2[:, :2]


def fit_dropout_filter(grades2, labels, l2_strength=1e-6, max_iter=2000):
    """Fit the early-dropout rule: flag students with p(fail) > threshold.

    The threshold is the grid value maximizing balanced accuracy of the rule;
    ties break toward the larger threshold, which filters fewer students.
    """
    grades2 = _check_grades2(grades2)
    labels = np.asarray(labels, dtype=int)
    model = train_logistic(grades2, labels, l2_strength=l2_strength,
                           max_iter=max_iter, week_count=2,
                           feature_names=("grade",), name="dropout-filter")
    p_fail = 1.0 - model.predict(grades2)
    best_bac, best_threshold = -1.0, THRESHOLD_GRID[0]
    for threshold in THRESHOLD_GRID:
        predicted = np.where(p_fail > threshold, 0, 1)
        bac = balanced_accuracy(labels, predicted)
        if bac >= best_bac:
            best_bac, best_threshold = bac, threshold
    return DropoutFilter(model, best_threshold)


def filter_early_dropouts(dropout_filter, grades2, student_ids):
    """Return the student ids whose p(fail) does not exceed the threshold."""
    p_fail = dropout_filter.fail_probabilities(grades2)
    student_ids = list(student_ids)
    if len(student_ids) != p_fail.size:
        raise InvalidInputError("student_ids must align with grade rows")
    return [sid for sid, p in zip(student_ids, p_fail)
            if p <= dropout_filter.threshold]


@dataclass(frozen=True)
class RepresentativeSample:
    """Class-balanced sample spanning each class's probability range."""

    indices: np.ndarray         # positions into the input arrays
    labels: np.ndarray          # class of each selected member
    probabilities: np.ndarray   # p(pass) at selection time
    ranks: np.ndarray           # within-class probability rank of each member
    per_class: dict             # class -> count

    def __len__(self):
        return self.indices.size


def _rank_positions(m, k):
    """k evenly spaced rank positions over 0..m-1 (round half up)."""
    if k == 1:
        return [0]
    return [int(np.floor(i * (m - 1) / (k - 1) + 0.5)) for i in range(k)]


def representative_sample(probs, labels, n, seed=0):
    """Pick n/2 students per class at evenly spaced probability ranks.

    Members of each class are ordered by predicted pass probability and
    selected at ranks ``round(i*(m-1)/(n/2-1))``, which always includes both
    extremes.  The seed only shuffles ties before the (stable) sort.
    """
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if probs.shape != labels.shape:
        raise InvalidInputError("probs and labels must align")
    if n < 2 or n % 2 != 0:
        raise InvalidInputError("n must be a positive even integer")
    k = n // 2
    rng = np.random.default_rng(seed)
    sel_idx, sel_labels, sel_probs, sel_ranks = [], [], [], []
    per_class = {}
    for cls in (0, 1):
        members = np.flatnonzero(labels == cls)
        if members.size < k:
            raise InsufficientClassError(cls, k, members.size)
        shuffled = rng.permutation(members)
        ordered = shuffled[np.argsort(probs[shuffled], kind="stable")]
        positions = _rank_positions(members.size, k)
        for rank in positions:
            idx = ordered[rank]
            sel_idx.append(idx)
            sel_labels.append(cls)
            sel_probs.append(probs[idx])
            sel_ranks.append(rank)
        per_class[cls] = k
    return RepresentativeSample(np.array(sel_idx, dtype=int),
                                np.array(sel_labels, dtype=int),
                                np.array(sel_probs, dtype=float),
                                np.array(sel_ranks, dtype=int),
                                per_class)


def write_sample_csv(sample, student_ids, path):
    """Write the sample manifest ``student_id,class,p_hat,rank``."""
    student_ids = list(student_ids)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["student_id", "class", "p_hat", "rank"])
        for idx, cls, p, rank in zip(sample.indices, sample.labels,
                                     sample.probabilities, sample.ranks):
            writer.writerow([student_ids[idx], cls, repr(float(p)), rank])
