"""Shapley additive explanations for linear decision functions.

Explanations decompose one prediction into a baseline (the expected decision
value over a background set) plus one contribution per feature, summing back
to the prediction.  Two estimators are provided: a closed form that treats
features as independent (exact for linear models), and an empirical
conditional estimator that reweights background rows by their similarity to
the explained point, evaluated by exact enumeration over all feature
coalitions.

Explanations live in the model's feature space: for a mapped model, pass the
mapped vector and a mapped background, and the contributions attach to the
monomial features (ONE, R, RG, ...).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, NoDataError, ShapeError
from .linear_model import LinearModel, feature_space_form

DEFAULT_NEIGHBORS = 100
MAX_EXACT_FEATURES = 15


@dataclass
class Background:
    """Reference rows in explanation space, plus optional feature names."""

    rows: np.ndarray
    feature_names: list[str] | None = None

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=float)
        if self.rows.ndim != 2:
            raise ShapeError(f"background rows must be 2-D, got ndim {self.rows.ndim}")
        if self.rows.shape[0] < 1:
            raise NoDataError("background needs at least one row")
        if self.feature_names is not None and len(self.feature_names) != self.rows.shape[1]:
            raise ShapeError(
                f"{len(self.feature_names)} names for {self.rows.shape[1]} features"
            )

    def names(self) -> list[str]:
        if self.feature_names is not None:
            return list(self.feature_names)
        return [f"x{j + 1}" for j in range(self.rows.shape[1])]


@dataclass
class ShapleyExplanation:
    feature_names: list[str]
    a0: float
    contributions: np.ndarray
    prediction: float

    def to_json(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "a0": self.a0,
            "contributions": [float(v) for v in self.contributions],
            "prediction": self.prediction,
            "efficiency": float(np.sum(self.contributions)),
        }


def efficiency(explanation: ShapleyExplanation) -> float:
    """Sum of the per-feature contributions (= prediction minus baseline)."""
    return float(np.sum(explanation.contributions))


def average_contributions(explanations) -> np.ndarray:
    """Per-feature arithmetic mean of contributions across explanations."""
    if not explanations:
        raise NoDataError("need at least one explanation to average")
    widths = {e.contributions.shape[0] for e in explanations}
    if len(widths) != 1:
        raise ShapeError(f"explanations have mixed widths: {sorted(widths)}")
    return np.mean([e.contributions for e in explanations], axis=0)


def _prepare(model: LinearModel, x, background: Background):
    weights, bias = feature_space_form(model)
    vec = np.asarray(x, dtype=float).reshape(-1)
    if vec.shape[0] != background.rows.shape[1]:
        raise ShapeError(
            f"point has {vec.shape[0]} features, background {background.rows.shape[1]}"
        )
    if vec.shape[0] != weights.shape[0]:
        raise ShapeError(
            f"point has {vec.shape[0]} features, model expects {weights.shape[0]}"
        )
    return weights, bias, vec


def shapley_linear_marginal(
    model: LinearModel, x, background: Background
) -> ShapleyExplanation:
    """Closed-form Shapley values under feature independence.

    Baseline is the mean decision over the background; each contribution is
    ``w_j * (x_j - mean_j)``, which is exact for a linear model when features
    are treated as independent.
    """
    weights, bias, vec = _prepare(model, x, background)
    mu = background.rows.mean(axis=0)
    a0 = float(np.mean(background.rows @ weights) + bias)
    contributions = weights * (vec - mu)
    prediction = float(weights @ vec + bias)
    return ShapleyExplanation(
        feature_names=background.names(), a0=a0, contributions=contributions, prediction=prediction
    )


def _per_feature_bandwidths(standardized: np.ndarray) -> np.ndarray:
    # squared median pairwise distance per coordinate; composable across coalitions
    m = standardized.shape[0]
    if m > 512:
        standardized = standardized[:: max(1, m // 512)][:512]
        m = standardized.shape[0]
    diffs = standardized[:, None, :] - standardized[None, :, :]
    iu = np.triu_indices(m, k=1)
    if iu[0].size == 0:
        return np.ones(standardized.shape[1])
    med = np.median(np.abs(diffs[iu]), axis=0)
    # zero-spread columns add no bandwidth; their uniform distance shift then
    # cancels in the normalized kernel weights
    return med * med


def _conditional_coalition_values(
    model: LinearModel, x, background: Background, neighbors: int = DEFAULT_NEIGHBORS
) -> np.ndarray:
    """Estimated value v(S) for every coalition bitmask S.

    v(S) is a kernel-weighted mean of the decision over background rows whose
    coalition features are replaced by the explained point's values; weights
    favor rows close to the point on the coalition coordinates.  v(0) is the
    plain background mean and v(full) is the model's prediction.
    """
    weights, bias, vec = _prepare(model, x, background)
    bg = background.rows
    m, dim = bg.shape
    neighbors = min(neighbors, m)

    base = bg @ weights + bias
    delta = (vec - bg) * weights  # adding column j switches feature j to x's value

    mu = bg.mean(axis=0)
    sd = bg.std(axis=0)
    # ptp catches constant columns whose two-pass std is nonzero noise
    sd[(bg.max(axis=0) - bg.min(axis=0)) == 0.0] = 1.0
    sd[sd == 0.0] = 1.0
    bg_std = (bg - mu) / sd
    x_std = (vec - mu) / sd
    sq_dist = (bg_std - x_std) ** 2
    bandwidth2 = _per_feature_bandwidths(bg_std)

    n_masks = 1 << dim
    values = np.empty(n_masks)
    values[0] = float(np.mean(base))

    block_size = 4096
    for start in range(1, n_masks, block_size):
        masks = np.arange(start, min(start + block_size, n_masks))
        members = (masks[:, None] >> np.arange(dim)[None, :]) & 1  # (block, dim)
        members = members.astype(float)
        f_block = base[:, None] + delta @ members.T  # (m, block)
        d2_block = sq_dist @ members.T
        h2_block = bandwidth2 @ members.T

        if neighbors >= m:
            # whole-background weighting vectorizes across the mask block
            safe_h2 = np.where(h2_block > 0.0, h2_block, 1.0)
            kernel = np.exp(-d2_block / (2.0 * safe_h2))
            kernel[:, h2_block <= 0.0] = 1.0
            totals = kernel.sum(axis=0)
            with np.errstate(invalid="ignore", divide="ignore"):
                block_vals = np.einsum("mb,mb->b", kernel, f_block) / totals
            plain = (
                (d2_block.max(axis=0) - d2_block.min(axis=0) == 0.0)
                | (totals <= 0.0)
                | ~np.isfinite(totals)
            )
            if np.any(plain):
                block_vals[plain] = f_block[:, plain].mean(axis=0)
            values[masks] = block_vals
            continue

        for col, mask in enumerate(masks):
            d2 = d2_block[:, col]
            f_vals = f_block[:, col]
            if d2.max() - d2.min() == 0.0:
                # no informative distances: condition on nothing, plain mean
                values[mask] = float(np.mean(f_vals))
                continue
            sel = np.argsort(d2, kind="stable")[:neighbors]
            d2, f_vals = d2[sel], f_vals[sel]
            h2 = h2_block[col]
            kernel = np.exp(-d2 / (2.0 * h2)) if h2 > 0.0 else np.ones_like(d2)
            total = kernel.sum()
            if total <= 0.0 or not np.isfinite(total):
                values[mask] = float(np.mean(f_vals))
            else:
                values[mask] = float(kernel @ f_vals / total)
    return values


def _shapley_from_coalitions(values: np.ndarray, dim: int) -> np.ndarray:
    masks = np.arange(values.shape[0])
    popcount = np.array([int(m).bit_count() for m in range(values.shape[0])])
    fact = [math.factorial(s) * math.factorial(dim - s - 1) / math.factorial(dim) for s in range(dim)]
    fact = np.array(fact)
    contributions = np.empty(dim)
    for j in range(dim):
        without = masks[(masks >> j) & 1 == 0]
        gain = values[without | (1 << j)] - values[without]
        contributions[j] = float(fact[popcount[without]] @ gain)
    return contributions


def shapley_empirical_conditional(
    model: LinearModel,
    x,
    background: Background,
    neighbors: int = DEFAULT_NEIGHBORS,
    max_exact_features: int = MAX_EXACT_FEATURES,
) -> ShapleyExplanation:
    """Shapley values from the empirical conditional estimator, computed by
    exact enumeration over all 2^D coalitions.

    Refuses when the explanation space is wider than ``max_exact_features``;
    use :func:`shapley_linear_marginal` there instead.
    """
    dim = np.asarray(x).reshape(-1).shape[0]
    if dim > max_exact_features:
        raise CapacityError(
            f"{dim} features would need 2^{dim} coalition evaluations; "
            f"the exact cap is {max_exact_features} - use shapley_linear_marginal"
        )
    values = _conditional_coalition_values(model, x, background, neighbors=neighbors)
    contributions = _shapley_from_coalitions(values, dim)
    return ShapleyExplanation(
        feature_names=background.names(),
        a0=float(values[0]),
        contributions=contributions,
        prediction=float(values[-1]),
    )
