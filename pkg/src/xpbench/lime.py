"""LIME: proximity-weighted local linear surrogate around one instance.

Perturbations are Gaussian around the explained point (per-feature spread
taken from the background data), the black box is queried on them, and a
ridge regression weighted by an RBF proximity kernel is fit.  Importance is
the absolute coefficients rescaled so the top feature scores 1.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import IllConditionedError, InvalidInputError
from .importance import ImportanceVector

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LimeConfig:
    num_samples: int = 1000
    kernel_width: float = None      # default 0.75 * sqrt(d)
    perturbation_scale: float = 1.0
    ridge_strength: float = 1.0
    num_features: int = 10          # top coefficients kept; <=0 keeps all
    seed: int = 0


def as_background_matrix(background):
    """Accept a FeatureTensor or a plain (rows, d) matrix."""
    if hasattr(background, "flat_matrix"):
        return np.asarray(background.flat_matrix(), dtype=float)
    X = np.asarray(background, dtype=float)
    if X.ndim != 2:
        raise InvalidInputError("background must be a 2-D matrix")
    return X


def instance_vector(instance):
    return instance.values if hasattr(instance, "values") else np.asarray(instance, dtype=float)


def weighted_ridge(X, y, weights, ridge_strength, escalations=3):
    """Ridge fit with intercept under sample weights.

    Centering is weight-aware, so the coefficient vector is exactly zero for
    constant targets.  A singular system escalates the ridge strength x10 up
    to ``escalations`` times before giving up.
    """
    weights = np.asarray(weights, dtype=float)
    total = weights.sum()
    if total <= 0:
        raise InvalidInputError("proximity weights sum to zero")
    x_mean = (weights[:, None] * X).sum(axis=0) / total
    y_mean = float((weights * y).sum() / total)
    Xc = X - x_mean
    yc = y - y_mean
    lam = ridge_strength
    gram = Xc.T @ (Xc * weights[:, None])
    rhs = Xc.T @ (weights * yc)
    for attempt in range(escalations + 1):
        try:
            coef = np.linalg.solve(gram + lam * np.eye(X.shape[1]), rhs)
        except np.linalg.LinAlgError:
            coef = None
        if coef is not None and np.all(np.isfinite(coef)):
            intercept = y_mean - float(coef @ x_mean)
            return coef, intercept
        lam *= 10.0
        log.warning("ridge system singular, escalating to lambda=%g", lam)
    raise IllConditionedError("weighted ridge system stayed singular")


def lime_explain(predictor, instance, background, cfg=None):
    """Explain one prediction with a local weighted-ridge surrogate.

    A first ridge fit over all features picks the ``num_features`` largest
    coefficients (the usual LIME selection step, and the reason its
    explanations are sparse); a second fit on the kept features produces the
    reported coefficients.  Features outside the selection score zero.
    """
    cfg = cfg or LimeConfig()
    x = instance_vector(instance)
    d = x.size
    if cfg.num_samples < d + 1:
        raise InvalidInputError(f"num_samples must be >= d+1 = {d + 1}")
    width = cfg.kernel_width if cfg.kernel_width is not None else 0.75 * np.sqrt(d)
    if width <= 0:
        raise InvalidInputError("kernel_width must be positive")
    B = as_background_matrix(background)
    if B.shape[1] != d:
        raise InvalidInputError("background width must match the instance")
    sds = B.std(axis=0) * cfg.perturbation_scale

    rng = np.random.default_rng(cfg.seed)
    Z = np.clip(rng.normal(loc=x, scale=np.maximum(sds, 0.0),
                           size=(cfg.num_samples, d)), 0.0, 1.0)
    y = predictor.predict(Z)
    dist = np.linalg.norm(Z - x, axis=1)
    weights = np.exp(-(dist ** 2) / width ** 2)
    coef, _ = weighted_ridge(Z, y, weights, cfg.ridge_strength)
    scores = np.abs(coef)
    if 0 < cfg.num_features < d:
        keep = np.argsort(-scores, kind="stable")[: cfg.num_features]
        sub_coef, _ = weighted_ridge(Z[:, keep], y, weights, cfg.ridge_strength)
        scores = np.zeros(d)
        scores[keep] = np.abs(sub_coef)
    return ImportanceVector.from_raw(
        scores, "lime", getattr(instance, "instance_id", "") or "")
