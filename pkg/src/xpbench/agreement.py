"""Quantitative cross-explainer comparison.

Per-student Spearman rank correlations and Jensen-Shannon distances are
averaged into pairwise method matrices; per-(method, course) mean importance
profiles are projected with PCA; and a rank-based point scheme turns each
method's importance vectors into a weeks x features heatmap that depends only
on orderings, never magnitudes.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, UndefinedMetricError

JSD_SMOOTHING = 1e-12


@dataclass(frozen=True)
class MethodRun:
    """One explainability method's importance vectors over a student sample."""

    method: str
    course: str
    student_ids: tuple
    vectors: np.ndarray  # (students, weeks*features)
    week_count: int

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=float)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.student_ids):
            raise InvalidInputError("vectors must be (students, d)")
        if vectors.shape[1] % self.week_count != 0:
            raise InvalidInputError("vector length must be a multiple of week_count")
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "student_ids", tuple(self.student_ids))

    @property
    def feature_count(self):
        return self.vectors.shape[1] // self.week_count

    def mean_vector(self):
        return self.vectors.mean(axis=0)

    def feature_profile(self):
        """Mean importance pooled over students and weeks: one value per feature."""
        return self.mean_vector().reshape(self.week_count, -1).mean(axis=0)


def average_ranks(values):
    """1-based ranks with ties averaged (the Spearman convention)."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_pair(e1, e2):
    """Rank correlation: Pearson on average ranks.  Undefined for constants."""
    e1 = np.asarray(e1, dtype=float)
    e2 = np.asarray(e2, dtype=float)
    if e1.shape != e2.shape or e1.ndim != 1 or e1.size < 2:
        raise InvalidInputError("need two equal-length vectors of size >= 2")
    if np.all(e1 == e1[0]) or np.all(e2 == e2[0]):
        raise UndefinedMetricError("rank correlation undefined for constant vector")
    r1 = average_ranks(e1)
    r2 = average_ranks(e2)
    r1 = r1 - r1.mean()
    r2 = r2 - r2.mean()
    return float((r1 @ r2) / np.sqrt((r1 @ r1) * (r2 @ r2)))


def jsd_pair(e1, e2, smoothing=JSD_SMOOTHING):
    """Jensen-Shannon distance (base-2, so in [0, 1]) between score vectors.

    Vectors are smoothed by ``smoothing`` and normalized to sum 1 first;
    all-zero vectors therefore become uniform instead of erroring.
    """
    e1 = np.asarray(e1, dtype=float)
    e2 = np.asarray(e2, dtype=float)
    if e1.shape != e2.shape or e1.ndim != 1 or e1.size < 1:
        raise InvalidInputError("need two equal-length vectors")
    if e1.min() < 0 or e2.min() < 0:
        raise InvalidInputError("score vectors must be non-negative")
    p = e1 + smoothing
    q = e2 + smoothing
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)
    divergence = 0.5 * float((p * np.log2(p / m)).sum()) \
        + 0.5 * float((q * np.log2(q / m)).sum())
    return float(np.sqrt(min(max(divergence, 0.0), 1.0)))


def _pairwise_means(runs, pair_fn):
    n = len(runs)
    ids = runs[0].student_ids
    for run in runs:
        if run.student_ids != ids:
            raise InvalidInputError("runs must share the same student set")
    matrix = np.zeros((n, n))
    coverage = np.zeros((n, n), dtype=int)
    for a in range(n):
        for b in range(a, n):
            values = []
            for s in range(len(ids)):
                try:
                    values.append(pair_fn(runs[a].vectors[s], runs[b].vectors[s]))
                except UndefinedMetricError:
                    continue
            if not values:
                raise UndefinedMetricError(
                    f"no student defines the ({runs[a].method}, {runs[b].method}) pair")
            matrix[a, b] = matrix[b, a] = float(np.mean(values))
            coverage[a, b] = coverage[b, a] = len(values)
    return matrix, coverage


def spearman_matrix(runs):
    """Pairwise mean-over-students Spearman matrix plus a coverage count.

    Students for whom a pair is undefined (constant vector) are skipped and
    the coverage entry records how many remained.
    """
    return _pairwise_means(runs, spearman_pair)


def jsd_matrix(runs):
    """Pairwise mean-over-students Jensen-Shannon distance matrix."""
    return _pairwise_means(runs, jsd_pair)


def pca_project(vectors, dims=2):
    """Project row vectors on the top principal directions.

    Columns are centered; the sign of each component is fixed so its
    largest-magnitude loading is positive, making the output deterministic.
    """
    X = np.asarray(vectors, dtype=float)
    if X.ndim != 2 or X.shape[0] < 3:
        raise InvalidInputError("PCA needs at least 3 vectors")
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:dims]
    coords = np.zeros((X.shape[0], dims))
    for k in range(min(dims, comps.shape[0])):
        v = comps[k]
        lead = int(np.argmax(np.abs(v)))
        if v[lead] < 0:
            v = -v
        coords[:, k] = Xc @ v
    return coords


def rank_score_heatmap(run, top_k=10):
    """Average rank-based points per (week, feature) cell, scaled to [0, 1].

    Per student the cells are ranked by importance descending (ties broken by
    stable flat index order); the top cell earns ``top_k`` points down to 1
    point for rank ``top_k``.  Points are averaged over students and divided
    by ``top_k``.
    """
    d = run.vectors.shape[1]
    if d < top_k:
        raise InvalidInputError(f"vectors must have at least top_k={top_k} entries")
    totals = np.zeros(d)
    for s in range(run.vectors.shape[0]):
        order = np.argsort(-run.vectors[s], kind="stable")
        totals[order[:top_k]] += np.arange(top_k, 0, -1)
    mean_points = totals / run.vectors.shape[0]
    return (mean_points / top_k).reshape(run.week_count, run.feature_count)


def filter_heatmap_features(heatmap, threshold=0.33):
    """Display rule: keep features whose best weekly score reaches the cut."""
    return np.flatnonzero(heatmap.max(axis=0) >= threshold)


@dataclass(frozen=True)
class AgreementReport:
    """Bundle of the pairwise matrices, PCA coordinates and heatmaps."""

    methods: tuple                 # method names, matrix order
    course: str
    spearman: np.ndarray
    spearman_coverage: np.ndarray
    jsd: np.ndarray
    jsd_coverage: np.ndarray
    pca_coords: np.ndarray         # one row per method
    heatmaps: dict = field(default_factory=dict)


def build_agreement_report(runs, top_k=10):
    """Full single-course comparison across the given method runs."""
    if not runs:
        raise InvalidInputError("no runs to compare")
    courses = {run.course for run in runs}
    if len(courses) != 1:
        raise InvalidInputError("runs must come from one course")
    methods = tuple(run.method for run in runs)
    spearman, s_cov = spearman_matrix(runs)
    jsd, j_cov = jsd_matrix(runs)
    coords = pca_project(np.stack([run.feature_profile() for run in runs]))
    heatmaps = {run.method: rank_score_heatmap(run, top_k=top_k) for run in runs}
    return AgreementReport(methods, courses.pop(), spearman, s_cov,
                           jsd, j_cov, coords, heatmaps)


def pca_points(runs, dims=2):
    """Cross-course PCA over week-pooled feature profiles.

    Pooling over weeks reconciles courses with different week counts, so
    (method, course) points from several courses can share one projection.
    """
    labels = [(run.method, run.course) for run in runs]
    coords = pca_project(np.stack([run.feature_profile() for run in runs]), dims=dims)
    return labels, coords


def write_matrix_csv(path, matrix, labels):
    """Square matrix with a method-name header row and column."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["", *labels])
        for label, row in zip(labels, matrix):
            writer.writerow([label, *[repr(float(v)) for v in row]])


def read_matrix_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    labels = rows[0][1:]
    matrix = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    return labels, matrix


def write_pca_csv(path, labels, coords):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "course", "pc1", "pc2"])
        for (method, course), row in zip(labels, coords):
            writer.writerow([method, course, repr(float(row[0])), repr(float(row[1]))])


def write_heatmap_csv(path, heatmap, feature_names):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["week", "feature", "score"])
        for w in range(heatmap.shape[0]):
            for f, name in enumerate(feature_names):
                writer.writerow([w + 1, name, repr(float(heatmap[w, f]))])


def read_heatmap_csv(path):
    cells = {}
    names = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for week, name, score in reader:
            if name not in names:
                names.append(name)
            cells[(int(week), name)] = float(score)
    weeks = max(w for w, _ in cells)
    heatmap = np.zeros((weeks, len(names)))
    for (w, name), score in cells.items():
        heatmap[w - 1, names.index(name)] = score
    return heatmap, names
