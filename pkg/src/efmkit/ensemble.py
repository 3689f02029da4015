"""Majority-vote ensembles with per-subset hyperparameter selection.

One classifier is trained per training subset (one image per subset in the
segmentation pipeline).  For each subset, every candidate feature-map spec in
a grid is trained and scored by balanced accuracy on that same subset; the
winner joins the ensemble.  Final predictions are majority votes.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSubsetWarning, NoDataError, ParameterError, ShapeError
from .feature_map import GAUSSIAN, POLYNOMIAL, VARIANT_HALF, FeatureMapSpec
from .linear_model import (
    LOGISTIC,
    LinearModel,
    StreamSource,
    TrainConfig,
    _restartable,
    decision_batch,
    model_from_json,
    model_to_json,
    train_streaming,
)
from .metrics import ConfusionCounts, accumulate, metrics

TIE_POSITIVE = "positive"
TIE_NEGATIVE = "negative"

#: offsets b tried for polynomial maps during member selection
DEFAULT_POLY_OFFSETS = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0)
#: widths sigma tried for Gaussian maps during member selection
DEFAULT_GAUSSIAN_SIGMAS = (
    4.0,
    2.0 * math.sqrt(2.0),
    2.0,
    math.sqrt(2.0),
    1.0,
    1.0 / math.sqrt(2.0),
    0.5,
    math.sqrt(2.0) / 4.0,
)


@dataclass
class HyperGrid:
    """Candidate feature-map specs; ``None`` means the raw input space."""

    specs: list[FeatureMapSpec | None]

    def __post_init__(self):
        if not self.specs:
            raise ParameterError("hyperparameter grid must be nonempty")

    @classmethod
    def poly_offsets(cls, m: int, d: int = 3, offsets=DEFAULT_POLY_OFFSETS) -> "HyperGrid":
        return cls([FeatureMapSpec(kind=POLYNOMIAL, d=d, m=m, b=b) for b in offsets])

    @classmethod
    def gaussian_sigmas(
        cls, m: int, d: int = 3, sigmas=DEFAULT_GAUSSIAN_SIGMAS, variant: str = VARIANT_HALF
    ) -> "HyperGrid":
        return cls(
            [FeatureMapSpec(kind=GAUSSIAN, d=d, m=m, sigma=s, variant=variant) for s in sigmas]
        )


@dataclass
class Ensemble:
    members: list[LinearModel]
    member_specs: list[FeatureMapSpec | None] = field(default_factory=list)
    tie_rule: str = TIE_POSITIVE

    def __post_init__(self):
        if not self.members:
            raise NoDataError("ensemble needs at least one member")
        if self.tie_rule not in (TIE_POSITIVE, TIE_NEGATIVE):
            raise ParameterError(f"unknown tie rule: {self.tie_rule!r}")
        dims = {m.input_dim for m in self.members}
        if len(dims) != 1:
            raise ShapeError(f"members disagree on input dimension: {sorted(dims)}")
        if not self.member_specs:
            self.member_specs = [m.map_spec for m in self.members]

    @property
    def input_dim(self) -> int:
        return self.members[0].input_dim


def subset_bacc(model: LinearModel, subset: StreamSource, warn: bool = True) -> float:
    """Balanced accuracy of a model over a batch stream, micro-pooled."""
    counts = ConfusionCounts()
    for batch in _restartable(subset)():
        if len(batch) == 0:
            continue
        labels = (decision_batch(model, batch.rows) > 0.0).astype(np.int8)
        counts = accumulate(counts, labels, batch.labels)
    if counts.total == 0:
        raise NoDataError("subset yielded no rows to score")
    if warn and (counts.tp + counts.fn == 0 or counts.tn + counts.fp == 0):
        warnings.warn(
            "subset contains a single class; the absent-class rate counts as 0",
            DegenerateSubsetWarning,
            stacklevel=2,
        )
    return metrics(counts).bacc


def select_member(
    subset: StreamSource,
    grid: HyperGrid,
    config: TrainConfig,
    loss: str = LOGISTIC,
) -> tuple[LinearModel, FeatureMapSpec | None]:
    """Train one model per grid candidate and keep the balanced-accuracy maximizer.

    Scores are computed on the training subset itself; ties go to the earlier
    grid entry.
    """
    best: tuple[LinearModel, FeatureMapSpec | None] | None = None
    best_score = -1.0
    for spec in grid.specs:
        model = train_streaming(subset, spec, config, loss=loss)
        score = subset_bacc(model, subset)
        if score > best_score:
            best = (model, spec)
            best_score = score
    assert best is not None
    return best


def train_ensemble(
    subsets: list[StreamSource],
    grid: HyperGrid,
    config: TrainConfig,
    loss: str = LOGISTIC,
    tie_rule: str = TIE_POSITIVE,
    max_workers: int | None = None,
) -> Ensemble:
    """One member per subset via :func:`select_member`; members are independent.

    Subsets may train concurrently (``max_workers`` defaults to the
    EFMKIT_THREADS budget); results keep the subset order either way.
    """
    if not subsets:
        raise NoDataError("train_ensemble needs at least one subset")
    if max_workers is None:
        from .data import thread_budget

        max_workers = thread_budget()
    max_workers = max(1, min(max_workers, len(subsets)))
    if max_workers == 1:
        picked = [select_member(s, grid, config, loss) for s in subsets]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            picked = list(pool.map(lambda s: select_member(s, grid, config, loss), subsets))
    members = [m for m, _ in picked]
    specs = [s for _, s in picked]
    return Ensemble(members=members, member_specs=specs, tie_rule=tie_rule)


def vote_batch(ensemble: Ensemble, rows) -> np.ndarray:
    """Majority-vote labels for a batch of raw input rows."""
    arr = np.asarray(rows, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != ensemble.input_dim:
        raise ShapeError(f"expected rows of width {ensemble.input_dim}, got shape {arr.shape}")
    positives = np.zeros(arr.shape[0], dtype=np.int64)
    for member in ensemble.members:
        positives += (decision_batch(member, arr) > 0.0).astype(np.int64)
    negatives = len(ensemble.members) - positives
    out = np.where(positives > negatives, 1, 0).astype(np.int8)
    ties = positives == negatives
    if np.any(ties):
        out[ties] = 1 if ensemble.tie_rule == TIE_POSITIVE else 0
    return out


def vote(ensemble: Ensemble, x) -> int:
    """Majority-vote label for one input vector."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {arr.shape}")
    return int(vote_batch(ensemble, arr[None, :])[0])


def ensemble_to_json(ensemble: Ensemble) -> dict:
    return {
        "tie_rule": ensemble.tie_rule,
        "members": [model_to_json(m) for m in ensemble.members],
    }


def ensemble_from_json(obj: dict) -> Ensemble:
    members = [model_from_json(m) for m in obj["members"]]
    return Ensemble(members=members, tie_rule=obj.get("tie_rule", TIE_POSITIVE))
