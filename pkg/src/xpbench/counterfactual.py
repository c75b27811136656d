"""Counterfactual explainers: CEM pertinent negatives and DiCE-style sets.

Both searches are gradient-free (random-restart coordinate descent with a
shrinking line-search step) because the predictor contract exposes only
probabilities; this keeps them usable on external subprocess predictors.
All candidate points stay inside the [0, 1] feature box.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NoExplanationError
from .importance import ImportanceVector
from .lime import instance_vector

log = logging.getLogger(__name__)

_MIN_STEP = 1e-3
_INITIAL_STEP = 0.25


@dataclass(frozen=True)
class CemConfig:
    l1_weight: float = 0.1        # beta: sparsity pressure on the perturbation
    l2_weight: float = 1.0
    attack_weight: float = 10.0   # c: pressure toward the opposite class
    margin: float = 0.05          # kappa, in probability
    max_steps: int = 2000         # coordinate updates per restart
    restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if min(self.l1_weight, self.l2_weight, self.attack_weight) < 0:
            raise InvalidInputError("weights must be >= 0")
        if self.max_steps < 1:
            raise InvalidInputError("max_steps must be >= 1")


@dataclass(frozen=True)
class DiceConfig:
    k: int = 4
    lambda1: float = 0.5          # proximity weight
    lambda2: float = 1.0          # diversity weight
    max_steps: int = 5000         # coordinate updates per counterfactual
    change_tolerance: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise InvalidInputError("k must be >= 1")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidInputError("lambda weights must be >= 0")


@dataclass(frozen=True)
class CemResult:
    pn: np.ndarray                # the pertinent negative point
    importance: ImportanceVector
    converged: bool
    original: np.ndarray
    probability: float            # model probability at the pertinent negative
    sd: np.ndarray                # per-feature spread used by the score


@dataclass(frozen=True)
class CounterfactualSet:
    instance_id: str
    original: np.ndarray
    original_probability: float
    counterfactuals: np.ndarray   # (k, d)
    probabilities: np.ndarray     # (k,)
    converged: np.ndarray         # (k,) bool, True iff the class flipped
    diversity: float              # det of the distance-derived kernel matrix


def _stats_vector(stats, d, reducer):
    """Accept a ready (d,) vector or a (rows, d) matrix reduced columnwise."""
    arr = np.asarray(stats.flat_matrix() if hasattr(stats, "flat_matrix") else stats,
                     dtype=float)
    if arr.ndim == 1:
        vec = arr
    elif arr.ndim == 2:
        vec = reducer(arr)
    else:
        raise InvalidInputError("stats must be a vector or matrix")
    if vec.size != d:
        raise InvalidInputError(f"stats width {vec.size} != instance width {d}")
    return vec


def cem_scores(original, pn, sd):
    """Pre-scaling pertinent-negative scores: |change| times feature spread."""
    return np.abs(np.asarray(original, float) - np.asarray(pn, float)) * np.asarray(sd, float)


def cem_pertinent_negative(predictor, instance, background_stats, cfg=None):
    """Find a pertinent negative and score features by |change| * SD.

    Minimizes ``attack_weight*hinge + l1_weight*|delta|_1 + l2_weight*|delta|_2^2``
    where the hinge pushes the perturbed point past the decision boundary by
    ``margin``.  If no restart flips the class the best attempt is returned
    with ``converged=False`` (the importance vector still carries scores and
    a ``non_converged`` flag).
    """
    cfg = cfg or CemConfig()
    x = instance_vector(instance)
    if x.min() < 0 or x.max() > 1:
        raise InvalidInputError("instance must lie in [0, 1]^d")
    d = x.size
    sd = _stats_vector(background_stats, d, lambda m: m.std(axis=0))
    orig_pass = float(predictor.predict(x[None, :])[0]) >= 0.5

    def losses(Z):
        p = predictor.predict(Z)
        gap = (2 * p - 1) if orig_pass else (1 - 2 * p)
        attack = cfg.attack_weight * np.maximum(0.0, gap + cfg.margin)
        delta = Z - x
        return (attack + cfg.l1_weight * np.abs(delta).sum(axis=1)
                + cfg.l2_weight * (delta * delta).sum(axis=1)), p

    best = None  # (not flipped, loss, z, p) tuples compare lexicographically
    for restart in range(cfg.restarts):
        rng = np.random.default_rng([cfg.seed, restart])
        if restart == 0:
            z = x.copy()
        else:
            z = np.clip(x + rng.uniform(-0.4, 0.4, size=d), 0.0, 1.0)
        loss_vec, p_vec = losses(z[None, :])
        current, p_now = float(loss_vec[0]), float(p_vec[0])
        z, current, p_now = _coordinate_descent(
            z, current, p_now, losses, x, rng, cfg.max_steps)
        flipped = (p_now >= 0.5) != orig_pass
        key = (not flipped, current)
        if best is None or key < best[0]:
            best = (key, z, p_now)

    _, z, p_final = best
    flipped = (p_final >= 0.5) != orig_pass
    raw = cem_scores(x, z, sd)
    importance = ImportanceVector.from_raw(
        raw, "cem", getattr(instance, "instance_id", "") or "",
        flags=() if flipped else ("non_converged",))
    return CemResult(pn=z, importance=importance, converged=flipped,
                     original=x.copy(), probability=p_final, sd=sd.copy())


def _coordinate_descent(z, current, p_now, losses, x, rng, max_steps):
    """Cycle coordinates with a shrinking step; snap-to-original candidates
    keep the perturbation sparse.  Returns the improved point."""
    d = z.size
    step = _INITIAL_STEP
    steps = 0
    while steps < max_steps and step >= _MIN_STEP:
        improved = False
        for j in rng.permutation(d):
            if steps >= max_steps:
                break
            steps += 1
            cands = np.unique(np.clip(
                np.array([z[j] - step, z[j] + step, x[j]]), 0.0, 1.0))
            cands = cands[cands != z[j]]
            if cands.size == 0:
                continue
            trial = np.repeat(z[None, :], cands.size, axis=0)
            trial[:, j] = cands
            loss_vec, p_vec = losses(trial)
            b = int(np.argmin(loss_vec))
            if loss_vec[b] < current - 1e-12:
                z = trial[b]
                current = float(loss_vec[b])
                p_now = float(p_vec[b])
                improved = True
        if not improved:
            step *= 0.5
    return z, current, p_now


def cem_pertinent_positive(predictor, instance, feature_floor, cfg=None):
    """Flag-gated secondary mode: minimal feature subset preserving the class.

    Starting from the all-floor point, features are greedily restored to the
    instance's values until the original class holds, then pruned.  Returns
    ``(point, kept_mask, converged)``.  Excluded from agreement analyses.
    """
    x = instance_vector(instance)
    d = x.size
    floor = _stats_vector(feature_floor, d, lambda m: m.min(axis=0))
    orig_pass = float(predictor.predict(x[None, :])[0]) >= 0.5

    def class_of(Z):
        return predictor.predict(Z) >= 0.5

    kept = np.zeros(d, dtype=bool)
    z = floor.copy()
    while bool(class_of(z[None, :])[0]) != orig_pass and not kept.all():
        candidates = np.flatnonzero(~kept)
        trial = np.repeat(z[None, :], candidates.size, axis=0)
        trial[np.arange(candidates.size), candidates] = x[candidates]
        p = predictor.predict(trial)
        score = p if orig_pass else 1 - p
        pick = candidates[int(np.argmax(score))]
        kept[pick] = True
        z[pick] = x[pick]
    converged = bool(class_of(z[None, :])[0]) == orig_pass
    if converged:
        for j in np.flatnonzero(kept):
            trial = z.copy()
            trial[j] = floor[j]
            if bool(class_of(trial[None, :])[0]) == orig_pass:
                kept[j] = False
                z[j] = floor[j]
    return z, kept, converged


def _mad_scales(matrix):
    """Per-feature MAD with SD fallback where MAD is zero (unit floor last)."""
    med = np.median(matrix, axis=0)
    mad = np.median(np.abs(matrix - med), axis=0)
    sd = matrix.std(axis=0)
    scales = np.where(mad > 0, mad, sd)
    return np.where(scales > 0, scales, 1.0)


def dice_generate(predictor, instance, training_stats, cfg=None):
    """Generate k diverse nearest counterfactuals by joint coordinate descent.

    The joint loss is mean hinge toward the opposite class, plus
    MAD-weighted L1 proximity, minus the determinant-based diversity of the
    set; the k searches interleave round-robin so the shared diversity term
    sees the current set.  Each counterfactual is capped at ``max_steps``
    coordinate updates; non-flipped members are returned flagged.
    """
    cfg = cfg or DiceConfig()
    x = instance_vector(instance)
    if x.min() < 0 or x.max() > 1:
        raise InvalidInputError("instance must lie in [0, 1]^d")
    d = x.size
    stats = np.asarray(training_stats.flat_matrix()
                       if hasattr(training_stats, "flat_matrix") else training_stats,
                       dtype=float)
    scales = stats if stats.ndim == 1 else _mad_scales(stats)
    if scales.size != d:
        raise InvalidInputError("training_stats width must match the instance")

    p0 = float(predictor.predict(x[None, :])[0])
    target_pass = not (p0 >= 0.5)

    def y_loss(p):
        p_target = p if target_pass else 1.0 - p
        return np.maximum(0.0, 0.55 - p_target)  # margin 0.05 past the boundary

    k = cfg.k
    rngs = [np.random.default_rng([cfg.seed, i]) for i in range(k)]
    C = np.stack([np.clip(x + rngs[i].uniform(-0.05 * (i + 1), 0.05 * (i + 1), d),
                          0.0, 1.0)
                  for i in range(k)])

    # incremental state in scaled space: the MAD-weighted L1 between two
    # points is the plain L1 of their scaled images divided by d
    S = C / scales
    xs_ = x / scales
    pair_l1 = np.zeros((k, k))
    for i in range(k):
        for m in range(i + 1, k):
            pair_l1[i, m] = pair_l1[m, i] = float(np.abs(S[i] - S[m]).sum())
    prox_l1 = np.abs(S - xs_).sum(axis=1)
    probs = predictor.predict(C)
    y_losses = y_loss(probs)

    def kernel_from_l1(l1):
        return 1.0 / (1.0 + l1 / d)

    def joint(yl_sum, prox_sum, det):
        return (yl_sum / k + cfg.lambda1 * prox_sum / (k * d)
                - cfg.lambda2 * det)

    div = float(np.linalg.det(kernel_from_l1(pair_l1)))
    current = joint(y_losses.sum(), prox_l1.sum(), div)
    steps = np.zeros(k, dtype=int)
    step_size = np.full(k, _INITIAL_STEP)
    active = np.ones(k, dtype=bool)
    accept_tol = 1e-7
    K_base = kernel_from_l1(pair_l1)
    while active.any():
        for i in range(k):
            if not active[i]:
                continue
            improved_i = False
            for j in rngs[i].permutation(d):
                if steps[i] >= cfg.max_steps:
                    active[i] = False
                    break
                steps[i] += 1
                s = step_size[i]
                # box edges let the search cross sharp decision boundaries
                # that a small step cannot climb through the hinge plateau
                cands = np.unique(np.clip(
                    np.array([C[i, j] - s, C[i, j] + s, x[j], 0.0, 1.0]), 0.0, 1.0))
                cands = cands[cands != C[i, j]]
                if cands.size == 0:
                    continue
                trial = np.repeat(C[i][None, :], cands.size, axis=0)
                trial[:, j] = cands
                p_tr = predictor.predict(trial)
                yl_tr = y_loss(p_tr)
                svals = cands / scales[j]
                scur = S[i, j]
                dl1 = (np.abs(svals[:, None] - S[None, :, j])
                       - abs(scur - S[:, j])[None, :])        # (c, k)
                l1_rows = pair_l1[i][None, :] + dl1
                l1_rows[:, i] = 0.0
                prox_new = prox_l1[i] + np.abs(svals - xs_[j]) - abs(scur - xs_[j])
                Kc = np.repeat(K_base[None, :, :], cands.size, axis=0)
                rowvals = kernel_from_l1(l1_rows)
                Kc[:, i, :] = rowvals
                Kc[:, :, i] = rowvals
                Kc[:, i, i] = 1.0
                dets = np.linalg.det(Kc)
                vals = joint(y_losses.sum() - y_losses[i] + yl_tr,
                             prox_l1.sum() - prox_l1[i] + prox_new, dets)
                b = int(np.argmin(vals))
                if vals[b] < current - accept_tol:
                    C[i, j] = cands[b]
                    S[i, j] = svals[b]
                    pair_l1[i, :] = l1_rows[b]
                    pair_l1[:, i] = l1_rows[b]
                    prox_l1[i] = prox_new[b]
                    y_losses[i] = yl_tr[b]
                    probs[i] = p_tr[b]
                    K_base = kernel_from_l1(pair_l1)
                    div = dets[b]
                    current = vals[b]
                    improved_i = True
            if not improved_i and active[i]:
                step_size[i] *= 0.5
                if step_size[i] < _MIN_STEP:
                    active[i] = False

    probs = predictor.predict(C)
    flipped = (probs >= 0.5) == target_pass
    if not flipped.all():
        log.info("dice: %d of %d counterfactuals did not flip", int((~flipped).sum()), k)
    return CounterfactualSet(
        instance_id=getattr(instance, "instance_id", "") or "",
        original=x.copy(),
        original_probability=p0,
        counterfactuals=C,
        probabilities=probs,
        converged=flipped,
        diversity=div,
    )


def dice_importance(cfset, change_tolerance=0.01):
    """Fraction of converged counterfactuals that changed each feature.

    Scores are counts over converged members and live in [0, 1] already; no
    further rescaling is applied.  Zero converged members is an error; if all
    changes fall below the tolerance the all-zero vector is returned with a
    ``below_tolerance`` warning flag.
    """
    conv = cfset.converged
    if not conv.any():
        raise NoExplanationError("no converged counterfactuals to score")
    diffs = np.abs(cfset.counterfactuals[conv] - cfset.original)
    scores = (diffs > change_tolerance).mean(axis=0)
    flags = ()
    if scores.max() == 0.0 and diffs.max() > 0.0:
        flags = ("below_tolerance",)
        log.warning("dice importance: all changes below tolerance %g", change_tolerance)
    return ImportanceVector(scores, "dice", cfset.instance_id, flags)
