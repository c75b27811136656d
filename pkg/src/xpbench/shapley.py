"""Shapley-value attribution: KernelSHAP, PermSHAP and an exact oracle.

All three estimators share one value function: v(S) is the background-averaged
prediction of the hybrid instance keeping the explained point's values on the
coalition S and background values elsewhere.  KernelSHAP solves the
coalition-weighted regression under the efficiency constraint; PermSHAP walks
feature permutations in both directions (antithetic pairs); the exact oracle
enumerates every subset and is the validation yardstick for both.
"""

import logging
from dataclasses import dataclass
from math import comb, factorial

import numpy as np

from .errors import IllConditionedError, InvalidInputError
from .importance import ImportanceVector
from .lime import as_background_matrix, instance_vector

log = logging.getLogger(__name__)

_EXACT_LIMIT = 14


@dataclass(frozen=True)
class ShapConfig:
    num_coalitions: int = 2048
    background_size: int = 100
    num_permutations: int = 10  # antithetic pairs: each walked forward and reverse
    seed: int = 0


def shap_kernel_weight(d, z):
    """Coalition kernel weight (d-1) / (C(d,z) * z * (d-z)).

    Defined for coalition sizes 1..d-1 only; the empty and full coalitions
    carry infinite weight and enter the regression as constraints instead.
    """
    if not 1 <= z <= d - 1:
        raise InvalidInputError(
            f"coalition size {z} of {d} has infinite kernel weight")
    return (d - 1) / (comb(d, z) * z * (d - z))


def _select_background(background, cfg):
    B = as_background_matrix(background)
    if B.shape[0] < 1:
        raise InvalidInputError("background must contain at least one row")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(B.shape[0])
    return B[order[: min(cfg.background_size, B.shape[0])]]


def _mean_values_full_background(predictor, x, B, masks):
    """v(S) for every mask, averaged over the whole background set."""
    m, d = masks.shape
    nb = B.shape[0]
    values = np.empty(m)
    # chunk masks so the hybrid matrix stays small
    chunk = max(1, int(2.0e6 // max(nb * d, 1)))
    for start in range(0, m, chunk):
        sub = masks[start : start + chunk]
        hybrids = np.where(sub[:, None, :], x[None, None, :], B[None, :, :])
        preds = predictor.predict(hybrids.reshape(-1, d))
        values[start : start + chunk] = preds.reshape(len(sub), nb).mean(axis=1)
    return values


def _solve_constrained_wls(masks, values, weights, fx, base):
    """Kernel-weighted least squares with the efficiency constraint.

    The constraint sum(phi) = fx - base is enforced exactly by eliminating
    the last unknown, never by a soft penalty.
    """
    m, d = masks.shape
    delta = fx - base
    Z = masks.astype(float)
    A = Z[:, : d - 1] - Z[:, d - 1 : d]
    t = values - base - Z[:, d - 1] * delta
    wA = A * weights[:, None]
    gram = A.T @ wA
    rhs = wA.T @ t
    lam = 0.0
    for attempt in range(3):
        try:
            phi_rest = np.linalg.solve(gram + lam * np.eye(d - 1), rhs)
        except np.linalg.LinAlgError:
            phi_rest = None
        if phi_rest is not None and np.all(np.isfinite(phi_rest)):
            phi = np.empty(d)
            phi[: d - 1] = phi_rest
            phi[d - 1] = delta - phi_rest.sum()
            return phi
        lam = max(lam * 10.0, 1e-10 * max(np.trace(gram), 1.0))
        log.warning("coalition regression singular, ridge fallback lambda=%g", lam)
    raise IllConditionedError("coalition regression rank-deficient")


def _enumerate_masks(d):
    masks = np.zeros((2**d - 2, d), dtype=bool)
    weights = np.empty(2**d - 2)
    i = 0
    for code in range(1, 2**d - 1):
        bits = [(code >> j) & 1 for j in range(d)]
        masks[i] = np.array(bits, dtype=bool)
        weights[i] = shap_kernel_weight(d, sum(bits))
        i += 1
    return masks, weights


def kernel_shap(predictor, instance, background, cfg=None):
    """KernelSHAP attributions and max-normalized importance.

    When the coalition budget covers the full 2^d - 2 space the masks are
    enumerated with exact kernel weights.  Otherwise masks are sampled with
    size probability proportional to the kernel mass, each paired with its
    complement, and the regression uses uniform weights since the sampling
    already encodes the kernel.  Either way the value of a mask is the
    prediction averaged over whole background rows (row-wise replacement
    keeps feature correlations intact), the same value function the exact
    oracle uses.
    """
    cfg = cfg or ShapConfig()
    x = instance_vector(instance)
    d = x.size
    if d < 2:
        raise InvalidInputError("need at least two features")
    if cfg.num_coalitions < 2 * d:
        raise InvalidInputError("num_coalitions must be >= 2d")
    B = _select_background(background, cfg)
    fx = float(predictor.predict(x[None, :])[0])
    base = float(predictor.predict(B).mean())

    if 2**d - 2 <= cfg.num_coalitions:
        masks, weights = _enumerate_masks(d)
    else:
        rng = np.random.default_rng(cfg.seed)
        sizes = np.arange(1, d)
        size_mass = (d - 1) / (sizes * (d - sizes))
        size_mass = size_mass / size_mass.sum()
        draws = cfg.num_coalitions // 2
        drawn_sizes = rng.choice(sizes, size=draws, p=size_mass)
        masks = np.zeros((2 * draws, d), dtype=bool)
        for i, s in enumerate(drawn_sizes):
            keep = rng.choice(d, size=s, replace=False)
            masks[2 * i, keep] = True
            masks[2 * i + 1] = ~masks[2 * i]
        weights = np.ones(2 * draws)
    values = _mean_values_full_background(predictor, x, B, masks)

    phi = _solve_constrained_wls(masks, values, weights, fx, base)
    importance = ImportanceVector.from_raw(
        phi, "kshap", getattr(instance, "instance_id", "") or "")
    return phi, importance


def permutation_shap(predictor, instance, background, cfg=None):
    """Antithetic permutation estimate of the Shapley values.

    Each sampled permutation is walked feature by feature in the forward and
    the reversed order, accumulating marginal contributions of the
    background-averaged value function; the telescoping sum makes the
    efficiency property exact per ordering.
    """
    cfg = cfg or ShapConfig()
    if cfg.num_permutations < 1:
        raise InvalidInputError("num_permutations must be >= 1")
    x = instance_vector(instance)
    d = x.size
    B = _select_background(background, cfg)
    nb = B.shape[0]
    rng = np.random.default_rng(cfg.seed)

    phi = np.zeros(d)
    n_orderings = 0
    for _ in range(cfg.num_permutations):
        perm = rng.permutation(d)
        for order in (perm, perm[::-1]):
            # prefix masks: row t keeps the first t features of the ordering
            masks = np.zeros((d + 1, d), dtype=bool)
            for t, j in enumerate(order):
                masks[t + 1] = masks[t]
                masks[t + 1, j] = True
            hybrids = np.where(masks[:, None, :], x[None, None, :], B[None, :, :])
            preds = predictor.predict(hybrids.reshape(-1, d))
            values = preds.reshape(d + 1, nb).mean(axis=1)
            phi[order] += np.diff(values)
            n_orderings += 1
    phi /= n_orderings
    importance = ImportanceVector.from_raw(
        phi, "pshap", getattr(instance, "instance_id", "") or "")
    return phi, importance


def exact_shapley(predictor, instance, background, cfg=None):
    """Exact Shapley values by full subset enumeration (d <= 14).

    The value function is v(S) = mean over background rows of the prediction
    with S taken from the instance and the rest from the row.
    """
    cfg = cfg or ShapConfig()
    x = instance_vector(instance)
    d = x.size
    if d > _EXACT_LIMIT:
        raise InvalidInputError(
            f"exact enumeration needs d <= {_EXACT_LIMIT}, got {d}")
    B = _select_background(background, cfg)

    codes = np.arange(2**d, dtype=np.int64)
    masks = ((codes[:, None] >> np.arange(d)) & 1).astype(bool)
    values = _mean_values_full_background(predictor, x, B, masks)
    sizes = masks.sum(axis=1)

    # weight of adding player i to a subset of size s
    coeff = np.array([factorial(s) * factorial(d - s - 1) / factorial(d)
                      for s in range(d)])

    phi = np.empty(d)
    for i in range(d):
        bit = 1 << i
        without = (codes & bit) == 0
        base_codes = codes[without]
        gains = values[base_codes | bit] - values[base_codes]
        phi[i] = float((coeff[sizes[base_codes]] * gains).sum())
    return phi
