"""Explicit feature maps for polynomial and Gaussian kernels.

A feature map of order ``m`` sends a vector ``x`` in ``R^d`` to one coordinate
per monomial ``x^alpha``, where ``alpha`` ranges over multi-indices of degree
at most ``m`` (or exactly ``m`` for the offset-free polynomial map).  The
coefficients are chosen so that the Euclidean inner product of two mapped
vectors reproduces the kernel: exactly for the polynomial kernel, and as a
truncated series converging from below for the Gaussian kernel.

Feature ordering is graded lexicographic (ascending total degree, then
ascending lexicographic on the exponent tuples) and is fixed: serialized
models and explanation reports rely on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import CapacityError, ParameterError, ShapeError

POLYNOMIAL = "polynomial"
GAUSSIAN = "gaussian"

#: Gaussian kernel exp(-||x-y||^2 / (2 sigma^2))
VARIANT_HALF = "half"
#: Gaussian kernel exp(-||x-y||^2 / sigma^2)
VARIANT_FULL = "full"

# largest feature count we are willing to materialize per vector
MAX_EXPANSION_DIM = 2**31 - 1

# exact integer factorials up to here, log-gamma beyond
_EXACT_ORDER_LIMIT = 20


@dataclass(frozen=True)
class FeatureMapSpec:
    """Which map to apply and the parameters that pin down its dimension.

    Parameters
    ----------
    kind : str
        ``"polynomial"`` or ``"gaussian"``.
    d : int
        Input dimension, at least 1.
    m : int
        Map order (polynomial degree / truncation order), at least 0.
    b : float
        Polynomial offset, nonnegative.  Ignored for Gaussian maps.
    sigma : float
        Gaussian width, positive.  Ignored for polynomial maps.
    variant : str
        Gaussian denominator convention, ``"half"`` (2*sigma^2) or
        ``"full"`` (sigma^2).
    """

    kind: str
    d: int
    m: int
    b: float = 0.0
    sigma: float = 1.0
    variant: str = VARIANT_HALF

    def __post_init__(self):
        if self.kind not in (POLYNOMIAL, GAUSSIAN):
            raise ParameterError(f"unknown feature map kind: {self.kind!r}")
        if self.d < 1:
            raise ParameterError(f"input dimension must be >= 1, got {self.d}")
        if self.m < 0:
            raise ParameterError(f"order must be >= 0, got {self.m}")
        if self.kind == POLYNOMIAL and self.b < 0:
            raise ParameterError(f"polynomial offset must be >= 0, got {self.b}")
        if self.kind == GAUSSIAN:
            if self.sigma <= 0:
                raise ParameterError(f"sigma must be > 0, got {self.sigma}")
            if self.variant not in (VARIANT_HALF, VARIANT_FULL):
                raise ParameterError(f"unknown gaussian variant: {self.variant!r}")

    @property
    def exact_degree(self) -> bool:
        """True when only monomials of total degree exactly ``m`` are kept."""
        return self.kind == POLYNOMIAL and self.b == 0

    def to_json(self) -> dict:
        out = {"kind": self.kind, "d": self.d, "m": self.m}
        if self.kind == POLYNOMIAL:
            out["b"] = self.b
        else:
            out["sigma"] = self.sigma
            out["variant"] = self.variant
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureMapSpec":
        return cls(
            kind=obj["kind"],
            d=int(obj["d"]),
            m=int(obj["m"]),
            b=float(obj.get("b", 0.0)),
            sigma=float(obj.get("sigma", 1.0)),
            variant=obj.get("variant", VARIANT_HALF),
        )


def _compositions(d: int, total: int) -> Iterator[tuple[int, ...]]:
    # all exponent tuples of length d summing to `total`, lexicographically ascending
    if d == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(d - 1, total - first):
            yield (first,) + rest


def enumerate_multi_indices(d: int, m: int, exact_degree: bool = False) -> list[tuple[int, ...]]:
    """All exponent tuples alpha with |alpha| <= m (or == m), graded-lex ordered.

    The ordering is ascending total degree, then ascending lexicographic on
    the tuples, and is deterministic across runs.
    """
    if d < 1:
        raise ParameterError(f"input dimension must be >= 1, got {d}")
    if m < 0:
        raise ParameterError(f"order must be >= 0, got {m}")
    degrees = [m] if exact_degree else range(m + 1)
    return [alpha for k in degrees for alpha in _compositions(d, k)]


def expansion_dim(spec: FeatureMapSpec) -> int:
    """Number of features the map produces.

    ``C(d+m, d)`` for Gaussian and offset polynomial maps; the count of
    degree-``m`` multi-indices ``C(d+m-1, m)`` for the polynomial map with
    ``b = 0``.
    """
    if spec.exact_degree:
        dim = math.comb(spec.d + spec.m - 1, spec.m)
    else:
        dim = math.comb(spec.d + spec.m, spec.d)
    if dim > MAX_EXPANSION_DIM:
        raise CapacityError(
            f"expansion dimension {dim} exceeds the supported maximum {MAX_EXPANSION_DIM}"
        )
    return dim


def degree(alpha: Sequence[int]) -> int:
    """Total degree |alpha| of a multi-index."""
    return int(sum(alpha))


def _log_factorial(n: int) -> float:
    if n <= _EXACT_ORDER_LIMIT:
        return math.log(math.factorial(n))
    return math.lgamma(n + 1)


def _poly_weight(alpha: tuple[int, ...], m: int, b: float) -> float:
    # sqrt of the multinomial expansion coefficient of (<x,y> + b)^m for x^alpha*y^alpha
    k = degree(alpha)
    if m <= _EXACT_ORDER_LIMIT:
        coef = math.factorial(m)
        for a in alpha:
            coef //= math.factorial(a)
        if b == 0:
            return math.sqrt(coef)
        coef //= math.factorial(m - k)
        return math.sqrt(coef * b ** (m - k))
    log_coef = _log_factorial(m) - sum(_log_factorial(a) for a in alpha)
    if b == 0:
        return math.exp(0.5 * log_coef)
    log_coef -= _log_factorial(m - k)
    return math.exp(0.5 * (log_coef + (m - k) * math.log(b)))


def _gaussian_weight(alpha: tuple[int, ...], sigma: float, variant: str) -> float:
    k = degree(alpha)
    log_afact = sum(_log_factorial(a) for a in alpha)
    log_w = -k * math.log(sigma) - 0.5 * log_afact
    if variant == VARIANT_FULL:
        log_w += 0.5 * k * math.log(2.0)
    return math.exp(log_w)


def _column_weights(spec: FeatureMapSpec, indices: list[tuple[int, ...]]) -> np.ndarray:
    if spec.kind == POLYNOMIAL:
        return np.array([_poly_weight(a, spec.m, spec.b) for a in indices])
    return np.array([_gaussian_weight(a, spec.sigma, spec.variant) for a in indices])


def _monomials(rows: np.ndarray, indices: list[tuple[int, ...]]) -> np.ndarray:
    # rows: (n, d) -> (n, D) matrix of x^alpha, one column per multi-index
    n = rows.shape[0]
    out = np.empty((n, len(indices)))
    for col, alpha in enumerate(indices):
        acc = np.ones(n)
        for j, a in enumerate(alpha):
            if a == 1:
                acc = acc * rows[:, j]
            elif a > 1:
                acc = acc * rows[:, j] ** a
        out[:, col] = acc
    return out


def _as_matrix(rows, d: int) -> np.ndarray:
    try:
        arr = np.asarray(rows, dtype=float)
    except ValueError as exc:
        raise ShapeError(f"batch rows are ragged or non-numeric: {exc}") from None
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D batch, got array of ndim {arr.ndim}")
    if arr.shape[1] != d:
        raise ShapeError(f"batch has {arr.shape[1]} columns, map expects {d}")
    return arr


def _as_vector(x, d: int) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got array of ndim {arr.ndim}")
    if arr.shape[0] != d:
        raise ShapeError(f"vector has length {arr.shape[0]}, map expects {d}")
    return arr


def transform_batch(rows, spec: FeatureMapSpec) -> np.ndarray:
    """Map a batch of input rows to feature space, one mapped row per input row."""
    arr = _as_matrix(rows, spec.d)
    expansion_dim(spec)  # capacity check before enumerating
    indices = enumerate_multi_indices(spec.d, spec.m, spec.exact_degree)
    out = _monomials(arr, indices) * _column_weights(spec, indices)
    if spec.kind == GAUSSIAN:
        denom = 2.0 * spec.sigma**2 if spec.variant == VARIANT_HALF else spec.sigma**2
        envelope = np.exp(-np.sum(arr * arr, axis=1) / denom)
        out *= envelope[:, None]
    return out


def expand(x, spec: FeatureMapSpec) -> np.ndarray:
    """Map a single vector; equal to the matching row of :func:`transform_batch`."""
    return transform_batch(_as_vector(x, spec.d)[None, :], spec)[0]


def polynomial_efm(x, spec: FeatureMapSpec) -> np.ndarray:
    """Exact polynomial feature map of ``x`` under a polynomial spec.

    Satisfies ``<phi(x), phi(y)> == (<x, y> + b)^m`` up to floating round-off.
    """
    if spec.kind != POLYNOMIAL:
        raise ParameterError(f"polynomial_efm requires a polynomial spec, got {spec.kind!r}")
    return expand(x, spec)


def gaussian_aefm(x, spec: FeatureMapSpec) -> np.ndarray:
    """Truncated Gaussian feature map of ``x`` (approximate below order m+1).

    ``<phi_m(x), phi_m(y)>`` converges to the Gaussian kernel monotonically
    from below as ``m`` grows when ``x`` and ``y`` have nonnegative entries.
    """
    if spec.kind != GAUSSIAN:
        raise ParameterError(f"gaussian_aefm requires a gaussian spec, got {spec.kind!r}")
    return expand(x, spec)


def kernel_eval(spec: FeatureMapSpec, x, y) -> float:
    """Evaluate the kernel the spec's feature map factorizes."""
    xv = np.asarray(x, dtype=float)
    yv = np.asarray(y, dtype=float)
    if xv.shape != yv.shape:
        raise ShapeError(f"x and y differ in shape: {xv.shape} vs {yv.shape}")
    if spec.kind == POLYNOMIAL:
        return float((xv @ yv + spec.b) ** spec.m)
    diff = xv - yv
    denom = 2.0 * spec.sigma**2 if spec.variant == VARIANT_HALF else spec.sigma**2
    return float(np.exp(-(diff @ diff) / denom))


def approximation_error(spec: FeatureMapSpec, x, y) -> float:
    """|kernel(x, y) - <phi_m(x), phi_m(y)>| for a Gaussian spec."""
    if spec.kind != GAUSSIAN:
        raise ParameterError("approximation error is defined for gaussian maps only")
    return abs(kernel_eval(spec, x, y) - float(expand(x, spec) @ expand(y, spec)))


def monomial_names(
    indices: Sequence[Sequence[int]], feature_names: Sequence[str] | None = None
) -> list[str]:
    """Human-readable names for monomial features, e.g. ONE, R, RG, B^2.

    ``feature_names`` defaults to x1..xd.  The zero multi-index is named
    ``"ONE"``; exponents above 1 are written with a caret.
    """
    if not indices:
        return []
    d = len(indices[0])
    if feature_names is None:
        feature_names = [f"x{j + 1}" for j in range(d)]
    if len(feature_names) != d:
        raise ShapeError(f"got {len(feature_names)} feature names for {d} coordinates")
    names = []
    for alpha in indices:
        parts = []
        for name, a in zip(feature_names, alpha):
            if a == 1:
                parts.append(name)
            elif a > 1:
                parts.append(f"{name}^{a}")
        names.append("".join(parts) if parts else "ONE")
    return names


def feature_names_for(spec: FeatureMapSpec, feature_names: Sequence[str] | None = None) -> list[str]:
    """Names of the mapped features in output order."""
    return monomial_names(enumerate_multi_indices(spec.d, spec.m, spec.exact_degree), feature_names)
