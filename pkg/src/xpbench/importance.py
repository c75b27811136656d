"""Per-(week, feature) importance scores, the common output format of all explainers."""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, ParseError

METHODS = ("lime", "kshap", "pshap", "cem", "dice")


@dataclass(frozen=True)
class ImportanceVector:
    """Non-negative scores in [0, 1] over the flattened (week-major) feature grid.

    Vectors built through :meth:`from_raw` are rescaled so the largest score is
    exactly 1 unless every score is zero.  Counting-based scores (DiCE) are
    already in [0, 1] and are stored unrescaled.
    """

    scores: np.ndarray
    method: str
    instance_id: str
    flags: tuple = ()

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=float)
        if scores.ndim != 1 or scores.size == 0:
            raise InvalidInputError("scores must be a non-empty 1-D vector")
        if not np.all(np.isfinite(scores)):
            raise InvalidInputError("scores must be finite")
        if scores.min() < 0 or scores.max() > 1 + 1e-9:
            raise InvalidInputError("scores must lie in [0, 1]")
        object.__setattr__(self, "scores", scores)

    @classmethod
    def from_raw(cls, raw, method, instance_id, flags=()):
        """Build a max-normalized vector from raw (possibly signed) attributions.

        Absolute values are rescaled so max == 1; an all-zero input (raw
        magnitudes below 1e-12) stays all-zero.
        """
        mags = np.abs(np.asarray(raw, dtype=float))
        if not np.all(np.isfinite(mags)):
            raise InvalidInputError("raw attributions must be finite")
        top = mags.max() if mags.size else 0.0
        if top < 1e-12:
            return cls(np.zeros_like(mags), method, instance_id, tuple(flags))
        return cls(mags / top, method, instance_id, tuple(flags))

    def __len__(self):
        return self.scores.size


def flat_index(week, feature, feature_count):
    """Week-major flat position of 1-based ``week`` and 0-based ``feature``."""
    return (week - 1) * feature_count + feature


def write_importance_csv(path, vectors, week_count, feature_names):
    """Write vectors as rows ``instance_id,method,week,feature,score``."""
    feature_names = list(feature_names)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance_id", "method", "week", "feature", "score"])
        for vec in vectors:
            if len(vec) != week_count * len(feature_names):
                raise InvalidInputError(
                    f"vector length {len(vec)} != {week_count}x{len(feature_names)}"
                )
            for w in range(1, week_count + 1):
                for f, name in enumerate(feature_names):
                    score = vec.scores[flat_index(w, f, len(feature_names))]
                    writer.writerow(
                        [vec.instance_id, vec.method, w, name, repr(float(score))]
                    )


def read_importance_csv(path):
    """Read an importance CSV back into vectors.

    Returns ``(vectors, week_count, feature_names)``; instance order and the
    week/feature grid are reconstructed from the rows.
    """
    per_instance = {}
    weeks = set()
    feature_names = []
    seen_features = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["instance_id", "method", "week", "feature", "score"]:
            raise ParseError(f"unexpected importance header {header}", row=1)
        for n, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise ParseError("expected 5 columns", row=n)
            iid, method, week, feature, score = row
            try:
                week = int(week)
                score = float(score)
            except ValueError as exc:
                raise ParseError(str(exc), row=n) from None
            weeks.add(week)
            if feature not in seen_features:
                seen_features.add(feature)
                feature_names.append(feature)
            per_instance.setdefault((iid, method), []).append((week, feature, score))
    if not per_instance:
        return [], 0, []
    week_count = max(weeks)
    fcount = len(feature_names)
    fpos = {name: i for i, name in enumerate(feature_names)}
    vectors = []
    for (iid, method), cells in per_instance.items():
        scores = np.zeros(week_count * fcount)
        for week, feature, score in cells:
            scores[flat_index(week, fpos[feature], fcount)] = score
        vectors.append(ImportanceVector(scores, method, iid))
    return vectors, week_count, feature_names
