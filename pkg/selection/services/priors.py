"""
Model-space priors and the hyperprior on the meta-covariate coefficients.

Three model priors are supported:
    - LogisticMetaPrior: gamma_j ~ Bern(m_j(omega)), m_j = 1 / (1 + exp(-z_j' omega))
    - BetaBinomialPrior: common inclusion probability integrated against Beta(alpha, beta)
    - FixedBernoulliPrior: gamma_j ~ Bern(probs_j)

The hyperprior is omega ~ N(0, g_omega V) with V = (Z'Z / p)^-1 by default.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats
from scipy.special import betaln, expit, logit

from selection.exceptions import (
    DimensionMismatch,
    DomainError,
    InvalidHyper,
    NotFactorizable,
    RankDeficientZ,
)
from selection.services.linmodel import ModelIndicator

logger = logging.getLogger(__name__)

# |z_j' omega| beyond this gives m_j within double precision of 0 or 1
PREDICTOR_CLAMP = 35.0


@dataclass(frozen=True, eq=False)
class MetaCovariates:
    """p x q meta-covariate matrix, one row z_j per covariate."""

    Z: np.ndarray
    names: Tuple[str, ...] = ()
    has_intercept: bool = True
    intercept_column: int = 0

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=float)
        if Z.ndim == 1:
            Z = Z.reshape(-1, 1)
        if Z.ndim != 2 or Z.shape[0] < 1 or Z.shape[1] < 1:
            raise DimensionMismatch(f"Z must be a non-empty p x q matrix, got shape {Z.shape}")
        names = tuple(self.names) or tuple(f"z{k}" for k in range(Z.shape[1]))
        if len(names) != Z.shape[1]:
            raise DimensionMismatch(f"{len(names)} names given for {Z.shape[1]} meta-covariates")
        if self.has_intercept and not np.all(Z[:, self.intercept_column] == 1.0):
            raise DimensionMismatch("Designated intercept column of Z is not all ones")
        object.__setattr__(self, 'Z', Z)
        object.__setattr__(self, 'names', names)

    @classmethod
    def from_columns(cls, values, names: Sequence[str] = (), add_intercept: bool = True,
                     center: bool = False) -> 'MetaCovariates':
        """
        Build Z from raw meta-covariate columns.

        Args:
            values: p x q0 array (q0 may be 0 for an intercept-only prior)
            names: names of the q0 columns
            add_intercept: prepend a column of ones named 'intercept'
            center: remove column means first (sum-to-zero coding), making
                every meta-covariate orthogonal to the intercept
        """
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        if center and values.shape[1]:
            values = values - values.mean(axis=0)
        names = tuple(names) or tuple(f"z{k + 1}" for k in range(values.shape[1]))
        if not add_intercept:
            return cls(values, names, has_intercept=False)
        Z = np.column_stack([np.ones(values.shape[0]), values])
        return cls(Z, ('intercept',) + names, has_intercept=True, intercept_column=0)

    @classmethod
    def intercept_only(cls, p: int) -> 'MetaCovariates':
        return cls(np.ones((p, 1)), ('intercept',), has_intercept=True)

    @property
    def p(self) -> int:
        return self.Z.shape[0]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    @cached_property
    def rank(self) -> int:
        return int(np.linalg.matrix_rank(self.Z))

    def require_full_rank(self) -> None:
        if self.rank < self.q:
            raise RankDeficientZ(self.q, self.rank)

    @cached_property
    def V_inv(self) -> np.ndarray:
        """Z'Z / p, the precision shape of the default hyperprior."""
        self.require_full_rank()
        return self.Z.T @ self.Z / self.p

    @cached_property
    def V(self) -> np.ndarray:
        V = np.linalg.inv(self.V_inv)
        return 0.5 * (V + V.T)

    def leverages(self) -> np.ndarray:
        """v_j = z_j' V z_j for every covariate."""
        return np.einsum('ij,jk,ik->i', self.Z, self.V, self.Z)


@dataclass(frozen=True, eq=False)
class LogisticMetaPrior:
    meta: MetaCovariates
    omega: np.ndarray

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float).ravel()
        if omega.shape[0] != self.meta.q:
            raise DimensionMismatch(f"omega has length {omega.shape[0]}, Z has q = {self.meta.q}")
        object.__setattr__(self, 'omega', omega)

    @property
    def p(self) -> int:
        return self.meta.p


@dataclass(frozen=True)
class BetaBinomialPrior:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise InvalidHyper(f"Beta-Binomial parameters must be positive, got ({self.alpha}, {self.beta})")


@dataclass(frozen=True, eq=False)
class FixedBernoulliPrior:
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float).ravel()
        if np.any(probs <= 0) or np.any(probs >= 1):
            raise DomainError("Fixed prior inclusion probabilities must lie strictly in (0, 1)")
        object.__setattr__(self, 'probs', probs)

    @classmethod
    def uniform(cls, p: int, prob: float = 0.5) -> 'FixedBernoulliPrior':
        return cls(np.full(p, prob))

    @property
    def p(self) -> int:
        return self.probs.shape[0]


ModelPrior = Union[LogisticMetaPrior, BetaBinomialPrior, FixedBernoulliPrior]


@dataclass(frozen=True, eq=False)
class HyperPrior:
    """omega ~ N(0, g_omega V); g_omega may be infinite (flat prior)."""

    g_omega: float
    V: np.ndarray
    V_inv: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not self.g_omega > 0:
            raise InvalidHyper(f"g_omega must be positive, got {self.g_omega}")
        V = np.atleast_2d(np.asarray(self.V, dtype=float))
        if V.shape[0] != V.shape[1] or not np.allclose(V, V.T, rtol=0, atol=1e-12):
            raise InvalidHyper("V must be a symmetric matrix")
        if np.linalg.eigvalsh(V).min() <= 0:
            raise InvalidHyper("V must be positive definite")
        V_inv = np.linalg.inv(V) if self.V_inv is None else np.asarray(self.V_inv, dtype=float)
        object.__setattr__(self, 'V', V)
        object.__setattr__(self, 'V_inv', V_inv)

    @classmethod
    def from_meta(cls, meta: MetaCovariates, g_omega: Optional[float] = None) -> 'HyperPrior':
        """Default hyperprior V = (Z'Z/p)^-1, with g_omega calibrated when not given."""
        if g_omega is None:
            g_omega = calibrate_g_omega(meta)
        return cls(g_omega, meta.V, meta.V_inv)

    @property
    def q(self) -> int:
        return self.V.shape[0]

    @property
    def penalty_matrix(self) -> np.ndarray:
        """V^-1 / g_omega (zero for an infinite g_omega)."""
        if math.isinf(self.g_omega):
            return np.zeros_like(self.V_inv)
        return self.V_inv / self.g_omega


def inclusion_probs_from_predictor(eta: np.ndarray) -> np.ndarray:
    return expit(np.clip(eta, -PREDICTOR_CLAMP, PREDICTOR_CLAMP))


def logistic_inclusion_probs(meta: MetaCovariates, omega: np.ndarray) -> np.ndarray:
    """m_j(omega) with the linear predictor clamped to +-35."""
    probs = inclusion_probs_from_predictor(meta.Z @ np.asarray(omega, dtype=float))
    assert np.all((probs > 0) & (probs < 1))
    return probs


def prior_inclusion_probs(prior: ModelPrior) -> np.ndarray:
    if isinstance(prior, LogisticMetaPrior):
        return logistic_inclusion_probs(prior.meta, prior.omega)
    if isinstance(prior, FixedBernoulliPrior):
        return prior.probs.copy()
    raise NotFactorizable("The Beta-Binomial prior is not a product of independent Bernoullis")


def prior_log_odds(prior: ModelPrior) -> Optional[np.ndarray]:
    """log(pi_j / (1 - pi_j)) per covariate, or None for the Beta-Binomial prior."""
    if isinstance(prior, LogisticMetaPrior):
        return np.clip(prior.meta.Z @ prior.omega, -PREDICTOR_CLAMP, PREDICTOR_CLAMP)
    if isinstance(prior, FixedBernoulliPrior):
        return logit(prior.probs)
    return None


def beta_binomial_log_odds(prior: BetaBinomialPrior, p: int, k_others: int) -> float:
    """Conditional log prior odds of including one covariate when k_others others are in."""
    a, b = prior.alpha, prior.beta
    return float(betaln(a + k_others + 1, b + p - k_others - 1) - betaln(a + k_others, b + p - k_others))


def log_model_prior(prior: ModelPrior, gamma: ModelIndicator, p: int) -> float:
    if gamma.p != p:
        raise DimensionMismatch(f"Model built for p = {gamma.p}, expected p = {p}")
    if isinstance(prior, BetaBinomialPrior):
        k = gamma.size
        return float(betaln(prior.alpha + k, prior.beta + p - k) - betaln(prior.alpha, prior.beta))
    probs = prior_inclusion_probs(prior)
    if probs.shape[0] != p:
        raise DimensionMismatch(f"Prior defined for {probs.shape[0]} covariates, expected p = {p}")
    mask = gamma.mask()
    return float(np.sum(np.log(probs[mask])) + np.sum(np.log1p(-probs[~mask])))


def log_model_prior_table(prior: ModelPrior, masks: np.ndarray) -> np.ndarray:
    """Vectorised log prior mass over the rows of a boolean model matrix."""
    masks = np.asarray(masks, dtype=bool)
    p = masks.shape[1]
    if isinstance(prior, BetaBinomialPrior):
        k = masks.sum(axis=1)
        return betaln(prior.alpha + k, prior.beta + p - k) - betaln(prior.alpha, prior.beta)
    probs = prior_inclusion_probs(prior)
    if probs.shape[0] != p:
        raise DimensionMismatch(f"Prior defined for {probs.shape[0]} covariates, model matrix has {p}")
    log_in, log_out = np.log(probs), np.log1p(-probs)
    return masks @ log_in + (~masks) @ log_out


def kappa(omega_b: float, g_theta: float, n: int) -> float:
    """Per-inclusion log penalty in a block: 0.5 log(1 + g n) + log(1/omega_b - 1)."""
    if not 0 < omega_b < 1:
        raise DomainError(f"Block inclusion probability must lie in (0, 1), got {omega_b}")
    return 0.5 * math.log1p(g_theta * n) + math.log(1.0 / omega_b - 1.0)


def calibrate_g_omega(meta: MetaCovariates, lo: float = 0.001, hi: float = 0.999,
                      coverage: float = 0.95) -> float:
    """
    Largest g_omega such that every m_j(omega) stays in [lo, hi] with prior probability
    at least `coverage`, using z_j' omega ~ N(0, g v_j) and the worst-case v_j.

    Asymmetric bounds use the tighter of the two log-odds magnitudes.
    """
    if not 0 < lo < hi < 1:
        raise DomainError(f"Need 0 < lo < hi < 1, got lo = {lo}, hi = {hi}")
    if not 0 < coverage < 1:
        raise DomainError(f"Coverage must lie in (0, 1), got {coverage}")
    meta.require_full_rank()
    v_max = float(meta.leverages().max())
    bound = min(abs(logit(lo)), abs(logit(hi)))
    quantile = stats.norm.ppf(0.5 * (1.0 - coverage))
    g = (bound / quantile) ** 2 / v_max
    logger.debug(f"Calibrated g_omega = {g:.6g} (max leverage {v_max:.6g})")
    return g


def log_hyperprior_and_grad(omega: np.ndarray, hp: HyperPrior) -> Tuple[float, np.ndarray]:
    """
    Gaussian log-density of omega with its normalising constant dropped, and its gradient.

    Returns (-omega' V^-1 omega / (2 g_omega), -V^-1 omega / g_omega).
    """
    omega = np.asarray(omega, dtype=float).ravel()
    if omega.shape[0] != hp.q:
        raise DimensionMismatch(f"omega has length {omega.shape[0]}, hyperprior has q = {hp.q}")
    grad = -hp.penalty_matrix @ omega
    return 0.5 * float(omega @ grad), grad


@dataclass(frozen=True, eq=False)
class BlockStructure:
    """Partition of covariates into B blocks; labels are 0-based block numbers."""

    labels: np.ndarray
    names: Tuple[str, ...] = ()

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int).ravel()
        if labels.size == 0 or labels.min() < 0:
            raise DimensionMismatch("Block labels must be a non-empty vector of nonnegative integers")
        B = int(labels.max()) + 1
        if np.any(np.bincount(labels, minlength=B) == 0):
            raise DimensionMismatch("Every block label between 0 and B - 1 must be used")
        names = tuple(self.names) or tuple(f"block_{b + 1}" for b in range(B))
        object.__setattr__(self, 'labels', labels)
        object.__setattr__(self, 'names', names)

    @classmethod
    def from_meta(cls, meta: MetaCovariates) -> 'BlockStructure':
        """Blocks given by the distinct non-intercept rows of Z, in order of first appearance."""
        columns = [k for k in range(meta.q) if not (meta.has_intercept and k == meta.intercept_column)]
        rows = meta.Z[:, columns] if columns else np.zeros((meta.p, 1))
        _, first, inverse = np.unique(rows, axis=0, return_index=True, return_inverse=True)
        order = np.argsort(np.argsort(first))
        return cls(order[np.asarray(inverse).ravel()])

    @property
    def p(self) -> int:
        return self.labels.shape[0]

    @property
    def B(self) -> int:
        return len(self.names)

    @property
    def block_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.B)

    def block_means(self, values: np.ndarray) -> np.ndarray:
        return np.bincount(self.labels, weights=np.asarray(values, dtype=float), minlength=self.B) / self.block_sizes

    def expand(self, block_values: np.ndarray) -> np.ndarray:
        return np.asarray(block_values, dtype=float)[self.labels]

    def indicator_meta(self) -> MetaCovariates:
        """Block-indicator Z (one column per block, no intercept)."""
        Z = np.zeros((self.p, self.B))
        Z[np.arange(self.p), self.labels] = 1.0
        return MetaCovariates(Z, self.names, has_intercept=False)


def log_prior_odds(prior: ModelPrior, j: int, state: np.ndarray) -> float:
    """Conditional log prior odds of gamma_j = 1 given the other coordinates of `state`."""
    state = np.asarray(state, dtype=bool)
    if isinstance(prior, BetaBinomialPrior):
        k_others = int(state.sum()) - int(state[j])
        return beta_binomial_log_odds(prior, state.shape[0], k_others)
    return float(prior_log_odds(prior)[j])
