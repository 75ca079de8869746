"""
Gaussian linear regression under Zellner's prior.

Closed-form marginal likelihoods p(y | gamma), the least-squares machinery they
are built from, the incremental Cholesky factor used by Gibbs sweeps, and
Bayesian-model-averaged coefficient estimates.

Prior on coefficients: theta_gamma ~ N(0, g * phi * (X_gamma' X_gamma / n)^-1).
Unknown variance: phi ~ InverseGamma(shape=a0/2, rate=b0/2). The defaults
a0 = b0 = 0.01 therefore give shape = rate = 0.005.
"""

import logging
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Mapping, Optional, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.special import gammaln

from selection.exceptions import (
    ConstantColumn,
    DimensionMismatch,
    InvalidHyper,
    NonPositiveVariance,
    RankDeficient,
    WeightsNotNormalized,
)

logger = logging.getLogger(__name__)

# Smallest factor diagonal must exceed this fraction of the largest one
RANK_TOL = 1e-10
DEFAULT_CACHE_CAPACITY = 2 ** 20
LOG_2PI = math.log(2.0 * math.pi)


def mask_key(mask: np.ndarray) -> bytes:
    """Canonical bit-string of an inclusion mask, used as cache key."""
    return np.packbits(np.asarray(mask, dtype=bool)).tobytes()


@dataclass(frozen=True, eq=False)
class Dataset:
    y: np.ndarray
    X: np.ndarray
    standardized: bool = False
    names: Tuple[str, ...] = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise DimensionMismatch(f"X must be a non-empty n x p matrix, got shape {X.shape}")
        if y.shape[0] != X.shape[0]:
            raise DimensionMismatch(f"y has {y.shape[0]} entries but X has {X.shape[0]} rows")
        names = tuple(self.names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DimensionMismatch(f"{len(names)} names given for {X.shape[1]} columns")
        if self.standardized and X.shape[0] > 1:
            sd = X.std(axis=0, ddof=1)
            varying = sd > 0
            if np.any(np.abs(sd[varying] ** 2 - 1.0) > 1e-10):
                raise DimensionMismatch("standardized flag set but column variances are not 1")
        object.__setattr__(self, 'y', y)
        object.__setattr__(self, 'X', X)
        object.__setattr__(self, 'names', names)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @cached_property
    def gram(self) -> np.ndarray:
        return self.X.T @ self.X

    @cached_property
    def xty(self) -> np.ndarray:
        return self.X.T @ self.y

    @cached_property
    def yty(self) -> float:
        return float(self.y @ self.y)

    def drop_row(self, i: int) -> 'Dataset':
        keep = np.arange(self.n) != i
        return Dataset(self.y[keep], self.X[keep], standardized=False, names=self.names)


@dataclass(frozen=True)
class ModelIndicator:
    """Set of included covariates, stored as sorted 0-based column positions."""

    included: Tuple[int, ...]
    p: int

    def __post_init__(self):
        included = tuple(int(j) for j in self.included)
        if any(b <= a for a, b in zip(included, included[1:])):
            raise DimensionMismatch(f"Model indices must be strictly increasing: {included}")
        if included and (included[0] < 0 or included[-1] >= self.p):
            raise DimensionMismatch(f"Model indices {included} out of range for p = {self.p}")
        object.__setattr__(self, 'included', included)

    @classmethod
    def empty(cls, p: int) -> 'ModelIndicator':
        return cls((), p)

    @classmethod
    def from_mask(cls, mask) -> 'ModelIndicator':
        mask = np.asarray(mask, dtype=bool)
        return cls(tuple(np.flatnonzero(mask)), mask.shape[0])

    @classmethod
    def from_bits(cls, bits: str) -> 'ModelIndicator':
        return cls(tuple(j for j, b in enumerate(bits) if b == '1'), len(bits))

    @property
    def size(self) -> int:
        return len(self.included)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.p, dtype=bool)
        m[list(self.included)] = True
        return m

    @property
    def key(self) -> bytes:
        return mask_key(self.mask())

    @property
    def bits(self) -> str:
        return ''.join('1' if b else '0' for b in self.mask())

    def __contains__(self, j) -> bool:
        return j in self.included


@dataclass(frozen=True)
class Known:
    phi: float

    def __post_init__(self):
        if not self.phi > 0:
            raise NonPositiveVariance(f"Error variance must be positive, got {self.phi}")


@dataclass(frozen=True)
class InverseGamma:
    """phi ~ InverseGamma(shape=a0/2, rate=b0/2)."""

    a0: float = 0.01
    b0: float = 0.01

    def __post_init__(self):
        if not (self.a0 > 0 and self.b0 > 0):
            raise InvalidHyper(f"Inverse gamma hyperparameters must be positive, got ({self.a0}, {self.b0})")

    @property
    def shape(self) -> float:
        return 0.5 * self.a0

    @property
    def rate(self) -> float:
        return 0.5 * self.b0


VarianceMode = Union[Known, InverseGamma]


@dataclass(frozen=True)
class ZellnerConfig:
    g_theta: float = 1.0
    variance: VarianceMode = field(default_factory=InverseGamma)

    def __post_init__(self):
        if not self.g_theta > 0:
            raise InvalidHyper(f"g_theta must be positive, got {self.g_theta}")

    def shrinkage(self, n: int) -> float:
        gn = self.g_theta * n
        return gn / (1.0 + gn)


@dataclass(frozen=True, eq=False)
class FitResult:
    included: Tuple[int, ...]
    theta_hat: np.ndarray
    fitted_sumsq: float
    residual_sumsq: float
    n: int
    # Upper-triangular R with X_gamma = Q R, kept for posterior draws
    r_factor: np.ndarray = field(repr=False, default=None)


class LogMarginalCache:
    """
    Thread-safe least-recently-used store of log p(y | gamma).

    Values are deterministic functions of the model, so concurrent inserts of
    the same key are harmless and the last writer wins.
    """

    def __init__(self, capacity: int = DEFAULT_CACHE_CAPACITY):
        if capacity < 1:
            raise InvalidHyper(f"Cache capacity must be at least 1, got {capacity}")
        self.capacity = capacity
        self._entries: 'OrderedDict[bytes, float]' = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self._entries)

    def get(self, key: bytes) -> Optional[float]:
        with self._lock:
            value = self._entries.get(key)
            if value is None:
                self.misses += 1
                return None
            self._entries.move_to_end(key)
            self.hits += 1
            return value

    def put(self, key: bytes, value: float) -> None:
        with self._lock:
            self._entries[key] = value
            self._entries.move_to_end(key)
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)

    def get_or_compute(self, key: bytes, compute: Callable[[], float]) -> float:
        value = self.get(key)
        if value is None:
            value = compute()
            self.put(key, value)
        return value


def least_squares_fit(dataset: Dataset, gamma: ModelIndicator) -> FitResult:
    """
    Least-squares fit of y on the columns in gamma via a QR factorization.

    Raises:
        DimensionMismatch: gamma was built for a different p.
        RankDeficient: |gamma| > n or the smallest |R_kk| is below
            RANK_TOL times the largest.
    """
    if gamma.p != dataset.p:
        raise DimensionMismatch(f"Model built for p = {gamma.p}, dataset has p = {dataset.p}")
    k = gamma.size
    if k == 0:
        return FitResult((), np.zeros(0), 0.0, dataset.yty, dataset.n, np.zeros((0, 0)))
    if k > dataset.n:
        raise RankDeficient(gamma.included)

    Xg = dataset.X[:, list(gamma.included)]
    q, r = linalg.qr(Xg, mode='economic')
    diag = np.abs(np.diag(r))
    if diag.min() <= RANK_TOL * diag.max():
        raise RankDeficient(gamma.included)

    qty = q.T @ dataset.y
    theta_hat = linalg.solve_triangular(r, qty)
    resid = dataset.y - Xg @ theta_hat
    residual_sumsq = float(resid @ resid)
    fitted_sumsq = max(dataset.yty - residual_sumsq, 0.0)
    return FitResult(gamma.included, theta_hat, fitted_sumsq, residual_sumsq, dataset.n, r)


def log_marginal_from_fit(size: int, fitted_sumsq: float, yty: float, n: int,
                          cfg: ZellnerConfig) -> float:
    """
    log p(y | gamma) from the sufficient quantities of a fit.

    Marginally y ~ N(0, phi (I + c P_gamma)) with c = g n, so the quadratic form
    is y'y - c/(1+c) * fitted_sumsq and the determinant is (1+c)^|gamma|.
    """
    c = cfg.g_theta * n
    log1pc = math.log1p(c)
    quad = max(yty - c / (1.0 + c) * fitted_sumsq, 0.0)
    variance = cfg.variance
    if isinstance(variance, Known):
        phi = variance.phi
        return -0.5 * n * (LOG_2PI + math.log(phi)) - 0.5 * size * log1pc - 0.5 * quad / phi

    shape, rate = variance.shape, variance.rate
    post_shape = shape + 0.5 * n
    return (
        -0.5 * n * LOG_2PI
        - 0.5 * size * log1pc
        + shape * math.log(rate)
        - gammaln(shape)
        + gammaln(post_shape)
        - post_shape * math.log(rate + 0.5 * quad)
    )


def log_marginal_known_var(dataset: Dataset, gamma: ModelIndicator, cfg: ZellnerConfig) -> float:
    if not isinstance(cfg.variance, Known):
        raise InvalidHyper("log_marginal_known_var needs a Known(phi) variance mode")
    fit = least_squares_fit(dataset, gamma)
    return log_marginal_from_fit(gamma.size, fit.fitted_sumsq, dataset.yty, dataset.n, cfg)


def log_marginal_unknown_var(dataset: Dataset, gamma: ModelIndicator, cfg: ZellnerConfig) -> float:
    if not isinstance(cfg.variance, InverseGamma):
        raise InvalidHyper("log_marginal_unknown_var needs an InverseGamma(a0, b0) variance mode")
    fit = least_squares_fit(dataset, gamma)
    return log_marginal_from_fit(gamma.size, fit.fitted_sumsq, dataset.yty, dataset.n, cfg)


def log_marginal(dataset: Dataset, gamma: ModelIndicator, cfg: ZellnerConfig,
                 cache: Optional[LogMarginalCache] = None) -> float:
    """log p(y | gamma) for either variance mode, optionally memoised."""
    def compute():
        fit = least_squares_fit(dataset, gamma)
        return log_marginal_from_fit(gamma.size, fit.fitted_sumsq, dataset.yty, dataset.n, cfg)

    if cache is None:
        return compute()
    return cache.get_or_compute(gamma.key, compute)


def posterior_shrinkage_mean(fit: FitResult, cfg: ZellnerConfig) -> np.ndarray:
    """E[theta_gamma | y, gamma] = g n / (1 + g n) * theta_hat."""
    return cfg.shrinkage(fit.n) * fit.theta_hat


def _check_weights(weights: Mapping[ModelIndicator, float]) -> None:
    values = np.fromiter(weights.values(), dtype=float, count=len(weights))
    if values.size == 0 or np.any(values < 0) or abs(values.sum() - 1.0) > 1e-8:
        raise WeightsNotNormalized(
            f"Model weights must be nonnegative and sum to 1 (sum = {values.sum() if values.size else 0})"
        )


def bma_point_estimate(weights: Mapping[ModelIndicator, float], dataset: Dataset,
                       cfg: ZellnerConfig) -> np.ndarray:
    """Model-averaged posterior mean of theta, zeros for excluded covariates."""
    _check_weights(weights)
    estimate = np.zeros(dataset.p)
    for gamma, weight in weights.items():
        if weight == 0 or gamma.size == 0:
            continue
        fit = least_squares_fit(dataset, gamma)
        estimate[list(gamma.included)] += weight * posterior_shrinkage_mean(fit, cfg)
    return estimate


def bma_intervals(weights: Mapping[ModelIndicator, float], dataset: Dataset, cfg: ZellnerConfig,
                  rng: np.random.Generator, n_draws: int = 4000,
                  level: float = 0.95) -> Tuple[np.ndarray, np.ndarray]:
    """
    Equal-tailed credible intervals for each coefficient under the model average.

    Draws a model from the weights, then theta_gamma from its Zellner posterior
    (phi drawn from its inverse gamma posterior when the variance is unknown).
    """
    _check_weights(weights)
    models = [gamma for gamma, w in weights.items() if w > 0]
    probs = np.array([weights[gamma] for gamma in models])
    probs /= probs.sum()
    counts = rng.multinomial(n_draws, probs)

    draws = np.zeros((n_draws, dataset.p))
    shrink = cfg.shrinkage(dataset.n)
    row = 0
    for gamma, count in zip(models, counts):
        if count == 0:
            continue
        if gamma.size:
            fit = least_squares_fit(dataset, gamma)
            if isinstance(cfg.variance, Known):
                phi = np.full(count, cfg.variance.phi)
            else:
                quad = dataset.yty - shrink * fit.fitted_sumsq
                post_shape = cfg.variance.shape + 0.5 * dataset.n
                post_rate = cfg.variance.rate + 0.5 * quad
                phi = 1.0 / rng.gamma(post_shape, 1.0 / post_rate, size=count)
            z = rng.standard_normal((gamma.size, count))
            noise = linalg.solve_triangular(fit.r_factor, z) * np.sqrt(phi * shrink)
            draws[row:row + count, list(gamma.included)] = shrink * fit.theta_hat + noise.T
        row += count

    tail = 0.5 * (1.0 - level)
    lo, hi = np.quantile(draws, [tail, 1.0 - tail], axis=0)
    return lo, hi


def _cholesky_rank_one_update(L: np.ndarray, x: np.ndarray) -> None:
    """In place: L L' + x x' = L_new L_new' for lower-triangular L."""
    x = x.copy()
    for k in range(L.shape[0]):
        r = math.hypot(L[k, k], x[k])
        c = r / L[k, k]
        s = x[k] / L[k, k]
        L[k, k] = r
        L[k + 1:, k] = (L[k + 1:, k] + s * x[k + 1:]) / c
        x[k + 1:] = c * x[k + 1:] - s * L[k + 1:, k]


class IncrementalGram:
    """
    Cholesky factor of X_gamma' X_gamma maintained across single-covariate flips.

    Additions border the factor; removals delete a row and restore triangularity
    with a rank-one update of the trailing block. The factor is rebuilt from
    scratch after every p applied flips to bound accumulated rounding.
    """

    def __init__(self, dataset: Dataset, included: Iterable[int] = (), rank_tol: float = RANK_TOL):
        self._gram = dataset.gram
        self._xty = dataset.xty
        self._tol = rank_tol
        self.p = dataset.p
        self.active = []
        self._chol = np.zeros((0, 0))
        self._z = np.zeros(0)
        self._pending = None
        self.flips_since_refactor = 0
        self.refactor_count = 0
        for j in included:
            self.add(j)
        self.refactor()

    @property
    def fitted_sumsq(self) -> float:
        return float(self._z @ self._z)

    def _border(self, j: int):
        k = len(self.active)
        col = self._gram[self.active, j]
        v = linalg.solve_triangular(self._chol, col, lower=True) if k else np.zeros(0)
        d2 = self._gram[j, j] - v @ v
        largest = max(np.diag(self._chol).max() if k else 0.0, math.sqrt(max(self._gram[j, j], 0.0)))
        if d2 <= 0 or math.sqrt(d2) <= self._tol * largest:
            return None
        d = math.sqrt(d2)
        zj = (self._xty[j] - v @ self._z) / d
        return v, d, zj

    def _without(self, j: int):
        pos = self.active.index(j)
        L = np.delete(np.delete(self._chol, pos, axis=0), pos, axis=1)
        tail = self._chol[pos + 1:, pos]
        if tail.size:
            _cholesky_rank_one_update(L[pos:, pos:], tail)
        active = self.active[:pos] + self.active[pos + 1:]
        z = linalg.solve_triangular(L, self._xty[active], lower=True) if active else np.zeros(0)
        return active, L, z

    def fitted_if_added(self, j: int) -> Optional[float]:
        """fitted_sumsq after adding j, or None when the enlarged design is rank deficient."""
        bordered = self._border(j)
        self._pending = ('add', j, bordered)
        if bordered is None:
            return None
        return self.fitted_sumsq + bordered[2] ** 2

    def fitted_if_removed(self, j: int) -> float:
        reduced = self._without(j)
        self._pending = ('remove', j, reduced)
        return float(reduced[2] @ reduced[2])

    def add(self, j: int) -> None:
        pending = self._pending
        bordered = pending[2] if pending and pending[:2] == ('add', j) else self._border(j)
        self._pending = None
        if bordered is None:
            raise RankDeficient(tuple(sorted(self.active + [j])))
        previous = (list(self.active), self._chol, self._z)
        v, d, zj = bordered
        k = len(self.active)
        L = np.zeros((k + 1, k + 1))
        L[:k, :k] = self._chol
        L[k, :k] = v
        L[k, k] = d
        self._chol = L
        self._z = np.append(self._z, zj)
        self.active.append(j)
        self._count_flip(previous)

    def remove(self, j: int) -> None:
        pending = self._pending
        reduced = pending[2] if pending and pending[:2] == ('remove', j) else self._without(j)
        self._pending = None
        previous = (list(self.active), self._chol, self._z)
        self.active, self._chol, self._z = reduced
        self._count_flip(previous)

    def _count_flip(self, previous):
        """Refactor every p flips; a failed refactor undoes the flip and re-raises."""
        self.flips_since_refactor += 1
        if self.flips_since_refactor < self.p:
            return
        try:
            self.refactor()
        except RankDeficient:
            self.active, self._chol, self._z = previous
            raise

    def refactor(self) -> None:
        self._pending = None
        self.flips_since_refactor = 0
        self.refactor_count += 1
        if not self.active:
            self._chol = np.zeros((0, 0))
            self._z = np.zeros(0)
            return
        sub = self._gram[np.ix_(self.active, self.active)]
        try:
            L = linalg.cholesky(sub, lower=True)
        except linalg.LinAlgError:
            raise RankDeficient(tuple(sorted(self.active)))
        diag = np.diag(L)
        if diag.min() <= self._tol * diag.max():
            raise RankDeficient(tuple(sorted(self.active)))
        self._chol = L
        self._z = linalg.solve_triangular(L, self._xty[self.active], lower=True)


@dataclass(frozen=True, eq=False)
class Standardizer:
    """
    Column centring and scaling learnt on one dataset, reusable on new rows.

    The response is centred but keeps its units, so a known error variance
    stays on the scale the user gave it.
    """

    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float

    def transform_X(self, X: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(X) - self.x_mean) / self.x_scale

    def transform_y(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=float) - self.y_mean

    def coefficients_to_raw(self, theta: np.ndarray) -> np.ndarray:
        return np.asarray(theta) / self.x_scale

    def predict(self, X_raw: np.ndarray, theta_std: np.ndarray) -> np.ndarray:
        """Predictions in raw response units from coefficients on the standardized scale."""
        return self.y_mean + self.transform_X(X_raw) @ theta_std


def standardize(dataset: Dataset) -> Tuple[Dataset, Standardizer]:
    """
    Center y, and center the columns of X and scale them to unit sample variance (divisor n-1).

    Raises:
        ConstantColumn: a covariate has zero sample variance.
    """
    if dataset.n < 2:
        raise DimensionMismatch("Standardization needs at least two rows")
    x_mean = dataset.X.mean(axis=0)
    x_scale = dataset.X.std(axis=0, ddof=1)
    constant = [name for name, sd in zip(dataset.names, x_scale) if not sd > 0]
    if constant:
        raise ConstantColumn(f"Constant covariate columns cannot be standardized: {', '.join(constant)}")
    scaler = Standardizer(x_mean, x_scale, float(dataset.y.mean()))
    scaled = Dataset(scaler.transform_y(dataset.y), scaler.transform_X(dataset.X),
                     standardized=True, names=dataset.names)
    return scaled, scaler
