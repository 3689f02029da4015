"""Incremental linear classifiers trained on streamed mini-batches.

Models carry an optional feature-map spec: training and prediction then run
in the map-induced space while the caller keeps handing over raw input rows.
Two losses (logistic, hinge) and two solvers are provided.  The
``scale_invariant`` solver keeps per-coordinate squared-gradient accumulators
and divides each step by their square root, so together with standardization
the predicted-label sequence does not change when features are rescaled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import LabelError, NoDataError, ParameterError, ShapeError
from .feature_map import FeatureMapSpec, expansion_dim, transform_batch

LOGISTIC = "logistic"
HINGE = "hinge"

SCALE_INVARIANT = "scale_invariant"
PLAIN_SGD = "plain_sgd"

# additive guard inside sqrt: exact no-op for any reachable accumulator value,
# turns 0/0 into 0 for never-touched coordinates
_ACC_GUARD = 1e-300


@dataclass
class TrainConfig:
    """Knobs for one training run.

    ``batch_rows`` documents the intended batch granularity (10000 rows is one
    100x100 patch) and is used by ingestion helpers that need to re-chunk flat
    tables.  ``shuffle`` controls the deterministic within-batch permutation;
    turn it off to make the update order equal to the stream order.
    """

    epochs: int = 1
    batch_rows: int = 10_000
    base_rate: float = 0.5
    l2: float = 0.0
    seed: int = 42
    solver: str = SCALE_INVARIANT
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_rows < 1:
            raise ParameterError(f"batch_rows must be >= 1, got {self.batch_rows}")
        if self.base_rate <= 0:
            raise ParameterError(f"base_rate must be > 0, got {self.base_rate}")
        if self.l2 < 0:
            raise ParameterError(f"l2 must be >= 0, got {self.l2}")
        if self.solver not in (SCALE_INVARIANT, PLAIN_SGD):
            raise ParameterError(f"unknown solver: {self.solver!r}")


class LabeledBatch:
    """A block of rows with binary labels (1 = positive class)."""

    __slots__ = ("rows", "labels")

    def __init__(self, rows, labels):
        self.rows = np.ascontiguousarray(rows, dtype=float)
        if self.rows.ndim != 2:
            raise ShapeError(f"batch rows must be 2-D, got ndim {self.rows.ndim}")
        self.labels = np.asarray(labels)
        if self.labels.ndim != 1 or self.labels.shape[0] != self.rows.shape[0]:
            raise ShapeError(
                f"got {self.labels.size} labels for {self.rows.shape[0]} rows"
            )
        if self.labels.size and not np.isin(np.unique(self.labels), (0, 1)).all():
            raise LabelError("labels must be binary 0/1")
        self.labels = self.labels.astype(np.int8)

    def __len__(self):
        return self.rows.shape[0]


@dataclass
class Standardizer:
    """Frozen per-feature affine normalization: (x - mean) / scale."""

    means: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float)
        self.scales = np.asarray(self.scales, dtype=float)
        if self.means.shape != self.scales.shape or self.means.ndim != 1:
            raise ShapeError("means and scales must be 1-D and equally long")
        if np.any(self.scales <= 0):
            raise ParameterError("standardizer scales must be strictly positive")

    def transform(self, rows: np.ndarray) -> np.ndarray:
        return (rows - self.means) / self.scales

    def inverse(self, rows: np.ndarray) -> np.ndarray:
        return rows * self.scales + self.means


def fit_standardizer(stream: Iterable) -> Standardizer:
    """Per-feature mean and population standard deviation over a batch stream.

    Accepts an iterable of :class:`LabeledBatch` or plain row matrices.
    Features with zero variance get scale 1.
    """
    count = 0
    total = None
    total_sq = None
    for batch in stream:
        rows = batch.rows if isinstance(batch, LabeledBatch) else np.asarray(batch, dtype=float)
        if rows.size == 0:
            continue
        if total is None:
            total = rows.sum(axis=0)
            total_sq = (rows * rows).sum(axis=0)
        else:
            total = total + rows.sum(axis=0)
            total_sq = total_sq + (rows * rows).sum(axis=0)
        count += rows.shape[0]
    if count == 0:
        raise NoDataError("standardizer needs at least one row")
    means = total / count
    var = np.maximum(total_sq / count - means * means, 0.0)
    scales = np.sqrt(var)
    scales[scales == 0.0] = 1.0
    return Standardizer(means=means, scales=scales)


@dataclass
class LinearModel:
    """Linear decision function, optionally in a feature-map-induced space."""

    weights: np.ndarray
    bias: float
    loss: str
    map_spec: FeatureMapSpec | None = None
    standardizer: Standardizer | None = None
    train_meta: dict = field(default_factory=dict)
    # solver state, not serialized
    grad_sq: np.ndarray | None = None
    bias_grad_sq: float = 0.0
    update_calls: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.loss not in (LOGISTIC, HINGE):
            raise ParameterError(f"unknown loss: {self.loss!r}")
        if self.map_spec is not None and self.weights.size != expansion_dim(self.map_spec):
            raise ShapeError(
                f"{self.weights.size} weights for a map of dimension "
                f"{expansion_dim(self.map_spec)}"
            )
        if self.standardizer is not None and self.standardizer.means.size != self.weights.size:
            raise ShapeError("standardizer width differs from weight width")

    @property
    def width(self) -> int:
        """Feature-space width (number of weights, bias excluded)."""
        return int(self.weights.size)

    @property
    def input_dim(self) -> int:
        """Raw input dimension the model accepts."""
        return self.map_spec.d if self.map_spec is not None else self.width

    def copy(self) -> "LinearModel":
        return LinearModel(
            weights=self.weights.copy(),
            bias=self.bias,
            loss=self.loss,
            map_spec=self.map_spec,
            standardizer=self.standardizer,
            train_meta=dict(self.train_meta),
            grad_sq=None if self.grad_sq is None else self.grad_sq.copy(),
            bias_grad_sq=self.bias_grad_sq,
            update_calls=self.update_calls,
        )


def new_model(
    loss: str,
    width: int | None = None,
    map_spec: FeatureMapSpec | None = None,
    standardizer: Standardizer | None = None,
) -> LinearModel:
    """Zero-initialized model; width is taken from the map spec when given."""
    if map_spec is not None:
        width = expansion_dim(map_spec)
    if width is None or width < 1:
        raise ParameterError("model width must be >= 1 (or provide map_spec)")
    return LinearModel(
        weights=np.zeros(width), bias=0.0, loss=loss, map_spec=map_spec, standardizer=standardizer
    )


def loss_value(scores, labels, loss: str) -> np.ndarray:
    """Per-row loss at decision values ``scores`` for binary ``labels``."""
    t = 2.0 * np.asarray(labels, dtype=float) - 1.0
    margin = t * np.asarray(scores, dtype=float)
    if loss == LOGISTIC:
        return np.logaddexp(0.0, -margin)
    if loss == HINGE:
        return np.maximum(0.0, 1.0 - margin)
    raise ParameterError(f"unknown loss: {loss!r}")


def loss_slope(scores, labels, loss: str) -> np.ndarray:
    """d(loss)/d(score): the scalar factor each row contributes to the gradient."""
    t = 2.0 * np.asarray(labels, dtype=float) - 1.0
    margin = t * np.asarray(scores, dtype=float)
    if loss == LOGISTIC:
        return -t / (1.0 + np.exp(margin))
    if loss == HINGE:
        return np.where(margin < 1.0, -t, 0.0)
    raise ParameterError(f"unknown loss: {loss!r}")


def _slope_one(z: float, label: int, loss: str) -> float:
    t = 1.0 if label else -1.0
    if loss == HINGE:
        return -t if t * z < 1.0 else 0.0
    m = t * z
    if m >= 0.0:
        e = math.exp(-m)
        return -t * e / (1.0 + e)
    return -t / (1.0 + math.exp(m))


def partial_fit(model: LinearModel, batch: LabeledBatch, config: TrainConfig) -> LinearModel:
    """One stochastic pass over the batch; mutates and returns ``model``.

    Row order is a deterministic permutation keyed on (seed, number of prior
    partial_fit calls), or the given order when ``config.shuffle`` is off.
    """
    rows, labels = batch.rows, batch.labels
    if rows.shape[1] != model.width:
        raise ShapeError(f"batch width {rows.shape[1]} != model width {model.width}")
    n = rows.shape[0]
    call_index = model.update_calls
    model.update_calls += 1
    if n == 0:
        return model
    if config.shuffle:
        order = np.random.default_rng((config.seed, call_index)).permutation(n)
    else:
        order = range(n)

    w = model.weights
    bias = model.bias
    rate = config.base_rate
    l2 = config.l2
    adaptive = config.solver == SCALE_INVARIANT
    if adaptive and model.grad_sq is None:
        model.grad_sq = np.zeros(model.width)
    gsq = model.grad_sq
    bias_gsq = model.bias_grad_sq

    for i in order:
        x = rows[i]
        z = float(w @ x) + bias
        slope = _slope_one(z, labels[i], model.loss)
        if slope == 0.0 and l2 == 0.0:
            continue
        g = slope * x
        if l2 > 0.0:
            g = g + l2 * w
        if adaptive:
            gsq += g * g
            bias_gsq += slope * slope
            w -= rate * g / np.sqrt(gsq + _ACC_GUARD)
            if slope != 0.0:
                bias -= rate * slope / math.sqrt(bias_gsq + _ACC_GUARD)
        else:
            w -= rate * g
            bias -= rate * slope

    model.bias = bias
    model.bias_grad_sq = bias_gsq
    return model


def _map_rows(model_or_spec, rows: np.ndarray) -> np.ndarray:
    spec = model_or_spec.map_spec if isinstance(model_or_spec, LinearModel) else model_or_spec
    return transform_batch(rows, spec) if spec is not None else rows


def decision_batch(model: LinearModel, rows) -> np.ndarray:
    """Decision values for raw input rows (mapping and standardization applied)."""
    arr = np.asarray(rows, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != model.input_dim:
        raise ShapeError(f"expected rows of width {model.input_dim}, got shape {arr.shape}")
    feats = _map_rows(model, arr)
    if model.standardizer is not None:
        feats = model.standardizer.transform(feats)
    return feats @ model.weights + model.bias


def decision(model: LinearModel, x) -> float:
    """Decision value for one raw input vector."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1 or arr.shape[0] != model.input_dim:
        raise ShapeError(f"expected a vector of length {model.input_dim}, got shape {arr.shape}")
    return float(decision_batch(model, arr[None, :])[0])


def predict(model: LinearModel, x) -> tuple[int, float]:
    """(label, score): label is 1 iff the decision value is strictly positive."""
    score = decision(model, x)
    return (1 if score > 0.0 else 0), score


def predict_batch(model: LinearModel, rows) -> tuple[np.ndarray, np.ndarray]:
    scores = decision_batch(model, rows)
    return (scores > 0.0).astype(np.int8), scores


def logistic_probability(score: float) -> float:
    """Positive-class probability under the sigmoid link; 0.5 at score 0."""
    if score >= 0:
        return 1.0 / (1.0 + math.exp(-score))
    e = math.exp(score)
    return e / (1.0 + e)


StreamSource = Sequence[LabeledBatch] | Callable[[], Iterable[LabeledBatch]] | Iterator


def _restartable(source: StreamSource) -> Callable[[], Iterable[LabeledBatch]]:
    if callable(source):
        return source
    if isinstance(source, Sequence):
        return lambda: iter(source)
    # one-shot iterator: materialize the raw batches so multiple passes work
    batches = list(source)
    return lambda: iter(batches)


def train_streaming(
    source: StreamSource,
    map_spec: FeatureMapSpec | None,
    config: TrainConfig,
    loss: str = LOGISTIC,
    standardizer: Standardizer | str | None = "fit",
) -> LinearModel:
    """Fit a model over a stream of labeled batches without materializing the map.

    When ``standardizer`` is ``"fit"`` the stream is consumed once to estimate
    per-feature statistics of the mapped data, then ``config.epochs`` training
    passes follow.  Pass a prefit :class:`Standardizer` (or ``None``) to skip
    the extra pass.  ``source`` may be a sequence of batches or a zero-argument
    callable returning a fresh iterator per pass.
    """
    restart = _restartable(source)

    std: Standardizer | None
    if standardizer == "fit":
        mapped_stream = (_map_rows(map_spec, b.rows) for b in restart())
        std = fit_standardizer(mapped_stream)
    else:
        std = standardizer  # prefit instance or None

    model = new_model(loss, map_spec=map_spec, standardizer=std) if map_spec is not None else None
    seen = 0
    for _ in range(config.epochs):
        for batch in restart():
            feats = _map_rows(map_spec, batch.rows)
            if model is None:
                model = new_model(loss, width=feats.shape[1], standardizer=std)
            if std is not None:
                feats = std.transform(feats)
            partial_fit(model, LabeledBatch(feats, batch.labels), config)
            seen += len(batch)
    if model is None or seen == 0:
        raise NoDataError("training stream yielded no batches")
    model.train_meta = {"seed": config.seed, "epochs": config.epochs}
    return model


def feature_space_form(model: LinearModel) -> tuple[np.ndarray, float]:
    """Equivalent (weights, bias) acting on raw mapped features.

    Folds the standardizer into the coefficients so that
    ``weights @ phi(x) + bias`` equals the model's decision value.
    """
    if model.standardizer is None:
        return model.weights.copy(), model.bias
    w = model.weights / model.standardizer.scales
    b = model.bias - float(w @ model.standardizer.means)
    return w, b


def model_to_json(model: LinearModel) -> dict:
    """JSON-ready dict; float round-trip is exact (shortest-repr serialization)."""
    return {
        "loss": model.loss,
        "map_spec": None if model.map_spec is None else model.map_spec.to_json(),
        "weights": [float(v) for v in model.weights],
        "bias": float(model.bias),
        "standardizer": None
        if model.standardizer is None
        else {
            "means": [float(v) for v in model.standardizer.means],
            "scales": [float(v) for v in model.standardizer.scales],
        },
        "train_meta": dict(model.train_meta),
    }


def model_from_json(obj: dict) -> LinearModel:
    std = obj.get("standardizer")
    return LinearModel(
        weights=np.array(obj["weights"], dtype=float),
        bias=float(obj["bias"]),
        loss=obj["loss"],
        map_spec=None if obj.get("map_spec") is None else FeatureMapSpec.from_json(obj["map_spec"]),
        standardizer=None if std is None else Standardizer(np.array(std["means"]), np.array(std["scales"])),
        train_meta=dict(obj.get("train_meta", {})),
    )
