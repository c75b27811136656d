"""Built-in predictors behind one opaque probability-function contract.

Every explainer in this package sees a model only through
:class:`PredictorHandle`: a frozen, deterministic function from batches of
flattened (week-major) instances to probabilities in [0, 1].  The handle
re-checks that contract on every batch it forwards.
"""

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateLabelsError,
    InvalidInputError,
    ParseError,
    UndefinedMetricError,
)

log = logging.getLogger(__name__)

MODEL_HEADER = "XPB-MODEL v1"
_PREDICT_CHUNK = 65536


@dataclass(frozen=True)
class Instance:
    """One flattened student-week feature vector with its grid metadata."""

    values: np.ndarray
    week_count: int
    feature_names: tuple
    instance_id: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        names = tuple(self.feature_names)
        if self.week_count < 1 or len(names) < 1:
            raise InvalidInputError("need at least one week and one feature")
        if values.ndim != 1 or values.size != self.week_count * len(names):
            raise InvalidInputError(
                f"expected {self.week_count * len(names)} values, got {values.size}"
            )
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("instance values must be finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "feature_names", names)


@dataclass(frozen=True)
class LabeledDataset:
    """A feature tensor with binary labels, aligned by student."""

    features: object  # featgen.FeatureTensor (duck-typed: flat_matrix(), student order)
    labels: np.ndarray
    student_ids: tuple

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int)
        ids = tuple(self.student_ids)
        if labels.ndim != 1 or len(ids) != labels.size:
            raise InvalidInputError("labels and student_ids must align")
        if not np.isin(labels, (0, 1)).all():
            raise InvalidInputError("labels must be 0 or 1")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "student_ids", ids)

    def __len__(self):
        return self.labels.size


class PredictorHandle:
    """Frozen probability function plus the metadata explainers rely on.

    ``fn`` maps a float matrix (n, week_count*feature_count) to n
    probabilities.  ``predict`` validates inputs and outputs on every call, so
    a contract violation surfaces at the boundary instead of as a silently
    wrong explanation.
    """

    def __init__(self, fn, name, week_count, feature_count, kind=None, params=None):
        self._fn = fn
        self.name = name
        self.week_count = int(week_count)
        self.feature_count = int(feature_count)
        self.kind = kind
        self.params = params  # list of (name, ndarray) blocks, for serialization

    @property
    def dim(self):
        return self.week_count * self.feature_count

    def _coerce(self, batch):
        if isinstance(batch, Instance):
            batch = batch.values[None, :]
        elif isinstance(batch, (list, tuple)) and batch and isinstance(batch[0], Instance):
            batch = np.stack([inst.values for inst in batch])
        X = np.asarray(batch, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise InvalidInputError(
                f"predictor {self.name} expects width {self.dim}, got {X.shape}"
            )
        if not np.all(np.isfinite(X)):
            raise InvalidInputError("predictor inputs must be finite")
        return X

    def predict(self, batch):
        """Return one probability per row of ``batch`` (matrix or Instances)."""
        X = self._coerce(batch)
        out = np.empty(X.shape[0])
        for start in range(0, X.shape[0], _PREDICT_CHUNK):
            chunk = X[start : start + _PREDICT_CHUNK]
            p = np.asarray(self._fn(chunk), dtype=float).reshape(-1)
            if p.size != chunk.shape[0]:
                raise InvalidInputError(
                    f"predictor {self.name} returned {p.size} values for "
                    f"{chunk.shape[0]} rows"
                )
            if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
                raise InvalidInputError(
                    f"predictor {self.name} emitted probabilities outside [0, 1]"
                )
            out[start : start + _PREDICT_CHUNK] = p
        return out

    def __call__(self, batch):
        return self.predict(batch)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60.0, 60.0)))


def _bce(p, y):
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def _check_binary(labels):
    labels = np.asarray(labels, dtype=int)
    classes = np.unique(labels)
    if not np.isin(classes, (0, 1)).all():
        raise InvalidInputError("labels must be 0 or 1")
    if classes.size < 2:
        raise DegenerateLabelsError("both classes required, got only "
                                    f"{classes.tolist()}")
    return labels


def train_logistic(features, labels, l2_strength=1e-3, max_iter=500,
                   week_count=None, feature_names=None, name="logistic"):
    """Fit sigmoid(w.x + b) by full-batch gradient descent with backtracking.

    The regularized binary cross-entropy decreases monotonically across
    accepted steps; training stops at ``max_iter`` or when the gradient
    vanishes.  Deterministic: no randomness is involved.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidInputError("features must be a non-empty 2-D matrix")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("features must be finite")
    y = _check_binary(labels)
    if y.size != X.shape[0]:
        raise InvalidInputError("labels must align with feature rows")
    if l2_strength < 0:
        raise InvalidInputError("l2_strength must be >= 0")

    n, d = X.shape
    w = np.zeros(d)
    b = 0.0

    def loss(w, b):
        return _bce(_sigmoid(X @ w + b), y) + 0.5 * l2_strength * float(w @ w)

    current = loss(w, b)
    losses = [current]
    step = 1.0
    for _ in range(max_iter):
        p = _sigmoid(X @ w + b)
        gw = X.T @ (p - y) / n + l2_strength * w
        gb = float(np.mean(p - y))
        gnorm2 = float(gw @ gw) + gb * gb
        if gnorm2 < 1e-18:
            break
        step = min(step * 2.0, 1e6)
        accepted = False
        while step > 1e-14:
            cand = loss(w - step * gw, b - step * gb)
            if cand <= current - 1e-4 * step * gnorm2:
                w = w - step * gw
                b = b - step * gb
                current = cand
                losses.append(current)
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break

    if week_count is None:
        week_count, fcount = 1, d
    else:
        fcount = d // week_count
    if feature_names is None:
        feature_names = tuple(f"f{i}" for i in range(fcount))

    wf, bf = w.copy(), b
    handle = PredictorHandle(
        lambda Z: _sigmoid(Z @ wf + bf),
        name=name,
        week_count=week_count,
        feature_count=fcount,
        kind="logistic",
        params=[("weights", wf), ("bias", np.array([bf]))],
    )
    handle.training_losses = losses
    return handle


def _glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _mlp_forward(params, X, week_count, feature_count, week_shared):
    """Forward pass; ``params`` alternates weight/bias blocks per layer."""
    h = X
    start = 0
    if week_shared:
        W0, b0 = params[0][1], params[1][1]
        n = X.shape[0]
        per_week = X.reshape(n, week_count, feature_count) @ W0 + b0
        h = np.maximum(per_week, 0.0).reshape(n, -1)
        start = 2
    blocks = params[start:]
    for i in range(0, len(blocks), 2):
        W, b = blocks[i][1], blocks[i + 1][1]
        h = h @ W + b
        if i + 2 < len(blocks):
            h = np.maximum(h, 0.0)
    return _sigmoid(h[:, 0])


def train_sequence_net(dataset, hidden_sizes=(32, 16), epochs=15,
                       learning_rate=1e-3, batch_size=32, seed=0,
                       week_shared=False, name=None):
    """Train the built-in feed-forward success model on a labelled tensor.

    Minibatch Adam on binary cross-entropy; the parameters of the best epoch
    (lowest full-data loss) are kept, so a longer budget never ends worse.
    With ``week_shared`` the first layer is applied to each week's feature
    block with shared weights before the flattened stack continues.
    Deterministic for a fixed seed.
    """
    if len(dataset) == 0:
        raise InvalidInputError("dataset is empty")
    hidden_sizes = tuple(int(h) for h in hidden_sizes)
    if not hidden_sizes:
        raise InvalidInputError("hidden_sizes must be non-empty")
    if learning_rate <= 0:
        raise InvalidInputError("learning_rate must be positive")
    y = _check_binary(dataset.labels).astype(float)
    X = np.asarray(dataset.features.flat_matrix(), dtype=float)
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("features must be finite (normalize first)")
    n, d = X.shape
    week_count = dataset.features.week_count
    feature_count = dataset.features.feature_count

    rng = np.random.default_rng(seed)
    params = []
    if week_shared:
        params.append(("shared0.weight", _glorot(rng, feature_count, hidden_sizes[0])))
        params.append(("shared0.bias", np.zeros(hidden_sizes[0])))
        widths = [week_count * hidden_sizes[0], *hidden_sizes[1:], 1]
    else:
        widths = [d, *hidden_sizes, 1]
    for i in range(len(widths) - 1):
        params.append((f"dense{i}.weight", _glorot(rng, widths[i], widths[i + 1])))
        params.append((f"dense{i}.bias", np.zeros(widths[i + 1])))

    kind = "mlp-weekshared" if week_shared else "mlp"

    def full_loss(ps):
        return _bce(_mlp_forward(ps, X, week_count, feature_count, week_shared), y)

    initial_loss = full_loss(params)
    best_loss = initial_loss
    best_params = [(k, v.copy()) for k, v in params]

    m = [np.zeros_like(v) for _, v in params]
    v2 = [np.zeros_like(v) for _, v in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    t = 0
    for _ in range(int(epochs)):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            grads = _mlp_gradients(params, X[idx], y[idx], week_count,
                                   feature_count, week_shared)
            t += 1
            for j, g in enumerate(grads):
                m[j] = beta1 * m[j] + (1 - beta1) * g
                v2[j] = beta2 * v2[j] + (1 - beta2) * g * g
                mhat = m[j] / (1 - beta1**t)
                vhat = v2[j] / (1 - beta2**t)
                name_j, val = params[j]
                params[j] = (name_j, val - learning_rate * mhat / (np.sqrt(vhat) + eps))
        epoch_loss = full_loss(params)
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_params = [(k, v.copy()) for k, v in params]

    handle = _handle_from_params(kind, best_params, week_count, feature_count,
                                 name or f"{kind}({'-'.join(map(str, hidden_sizes))})")
    handle.initial_loss = initial_loss
    handle.final_loss = best_loss
    return handle


def _mlp_gradients(params, X, y, week_count, feature_count, week_shared):
    """Backprop of mean BCE through the relu stack (sigmoid output)."""
    n = X.shape[0]
    acts = []  # pre-activation inputs per dense block
    h = X
    start = 0
    shared_cache = None
    if week_shared:
        W0, b0 = params[0][1], params[1][1]
        xw = X.reshape(n, week_count, feature_count)
        pre = xw @ W0 + b0
        post = np.maximum(pre, 0.0)
        shared_cache = (xw, pre)
        h = post.reshape(n, -1)
        start = 2
    blocks = params[start:]
    layer_inputs = []
    for i in range(0, len(blocks), 2):
        W, b = blocks[i][1], blocks[i + 1][1]
        layer_inputs.append(h)
        z = h @ W + b
        acts.append(z)
        h = np.maximum(z, 0.0) if i + 2 < len(blocks) else z
    p = _sigmoid(acts[-1][:, 0])
    # d(meanBCE)/dz for sigmoid output collapses to (p - y)/n
    delta = ((p - y) / n)[:, None]
    grads = [None] * len(params)
    n_dense = len(blocks) // 2
    for li in range(n_dense - 1, -1, -1):
        W = blocks[2 * li][1]
        grads[start + 2 * li] = layer_inputs[li].T @ delta
        grads[start + 2 * li + 1] = delta.sum(axis=0)
        if li > 0:
            delta = (delta @ W.T) * (acts[li - 1] > 0)
        elif week_shared:
            delta = delta @ W.T  # into the shared layer's post-relu output
    if week_shared:
        xw, pre = shared_cache
        dshared = delta.reshape(n, week_count, -1) * (pre > 0)
        grads[0] = np.einsum("nwf,nwh->fh", xw, dshared)
        grads[1] = dshared.sum(axis=(0, 1))
    return grads


def _handle_from_params(kind, params, week_count, feature_count, name):
    params = [(k, np.array(v, dtype=float)) for k, v in params]
    if kind == "logistic":
        w = params[0][1].reshape(-1)
        b = float(params[1][1].reshape(-1)[0])
        fn = lambda Z: _sigmoid(Z @ w + b)
    elif kind in ("mlp", "mlp-weekshared"):
        shared = kind == "mlp-weekshared"
        fn = lambda Z: _mlp_forward(params, Z, week_count, feature_count, shared)
    else:
        raise InvalidInputError(f"unknown model kind {kind!r}")
    return PredictorHandle(fn, name=name, week_count=week_count,
                           feature_count=feature_count, kind=kind, params=params)


def save_model(handle, path):
    """Serialize a built-in handle to the versioned key-value text format."""
    if handle.kind is None or handle.params is None:
        raise InvalidInputError("handle does not carry serializable parameters")
    lines = [MODEL_HEADER, f"kind={handle.kind}",
             f"w={handle.week_count}", f"f={handle.feature_count}"]
    for pname, block in handle.params:
        flat = ",".join(repr(float(v)) for v in np.asarray(block, dtype=float).ravel())
        lines.append(f"param {pname} {flat}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path):
    """Load a model file back into a frozen handle (exact float round-trip)."""
    with open(path) as fh:
        lines = [line.rstrip("\n") for line in fh]
    if not lines or lines[0] != MODEL_HEADER:
        raise ParseError(f"expected header {MODEL_HEADER!r}", row=1)
    meta = {}
    raw_params = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("param "):
            try:
                _, pname, values = line.split(" ", 2)
            except ValueError:
                raise ParseError("malformed param line", row=n) from None
            raw_params.append((pname, np.array([float(v) for v in values.split(",")])))
        elif "=" in line:
            key, value = line.split("=", 1)
            meta[key] = value
        else:
            raise ParseError(f"unrecognized line {line!r}", row=n)
    for key in ("kind", "w", "f"):
        if key not in meta:
            raise ParseError(f"missing {key}= line")
    kind = meta["kind"]
    week_count, feature_count = int(meta["w"]), int(meta["f"])
    params = _reshape_params(kind, raw_params, week_count, feature_count)
    return _handle_from_params(kind, params, week_count, feature_count,
                               name=f"{kind}@{path}")


def _reshape_params(kind, raw_params, week_count, feature_count):
    """Recover matrix shapes from flat blocks; bias lengths fix the widths."""
    if kind == "logistic":
        return raw_params
    shaped = []
    if kind == "mlp-weekshared":
        in_dim = feature_count
    else:
        in_dim = week_count * feature_count
    i = 0
    first = True
    while i + 1 < len(raw_params):
        wname, wflat = raw_params[i]
        bname, bias = raw_params[i + 1]
        out_dim = bias.size
        shaped.append((wname, wflat.reshape(in_dim, out_dim)))
        shaped.append((bname, bias))
        if kind == "mlp-weekshared" and first:
            in_dim = week_count * out_dim
            first = False
        else:
            in_dim = out_dim
        i += 2
    if i != len(raw_params):
        raise ParseError("dangling param block without bias")
    return shaped


def balanced_accuracy(y_true, y_pred):
    """Mean of per-class recalls; requires both classes in ``y_true``."""
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.shape != y_pred.shape:
        raise InvalidInputError("y_true and y_pred must have the same length")
    if np.unique(y_true).size < 2:
        raise UndefinedMetricError("balanced accuracy needs both classes in y_true")
    recalls = []
    for cls in (0, 1):
        mask = y_true == cls
        recalls.append(float(np.mean(y_pred[mask] == cls)))
    return float(np.mean(recalls))


def stratified_split(labels, test_fraction=0.2, seed=0):
    """Class-stratified index split; per-class test counts round half up.

    Returns ``(train_idx, test_idx)`` as sorted integer arrays.
    """
    labels = np.asarray(labels, dtype=int)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = rng.permutation(idx)
        n_test = int(np.floor(idx.size * test_fraction + 0.5))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(test, dtype=int))


def export_instances_csv(path, instances):
    """Write instances in the feature-tensor CSV layout (one row per week)."""
    if not instances:
        raise InvalidInputError("no instances to write")
    names = instances[0].feature_names
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["student_id", "week", *names])
        for inst in instances:
            grid = inst.values.reshape(inst.week_count, len(names))
            for w in range(inst.week_count):
                writer.writerow([inst.instance_id, w + 1,
                                 *[repr(float(v)) for v in grid[w]]])


def load_instances_csv(path):
    """Read instances back from the feature-tensor CSV layout."""
    rows = {}
    names = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["student_id", "week"]:
            raise ParseError("expected header student_id,week,<features>", row=1)
        names = tuple(header[2:])
        for n, row in enumerate(reader, start=2):
            if len(row) != 2 + len(names):
                raise ParseError("wrong column count", row=n)
            try:
                week = int(row[1])
                vals = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ParseError(str(exc), row=n) from None
            rows.setdefault(row[0], {})[week] = vals
    instances = []
    for sid, weeks in rows.items():
        wmax = max(weeks)
        if sorted(weeks) != list(range(1, wmax + 1)):
            raise ParseError(f"student {sid} has non-contiguous weeks")
        flat = np.concatenate([np.asarray(weeks[w]) for w in range(1, wmax + 1)])
        instances.append(Instance(flat, wmax, names, instance_id=sid))
    return instances
