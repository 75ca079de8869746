"""
Posterior computation over model space.

Single-site Gibbs sweeps over gamma for a fixed model prior, chains of such
sweeps, and exact enumeration of all 2^p models for small p.

Random numbers: every chain owns one numpy Generator over a Philox bit
generator seeded from an integer or a SeedSequence child, so replicates
drawn from SeedSequence(seed).spawn(k) never share state.
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, Optional, Union

import numpy as np
from django.conf import settings
from scipy.special import expit, logsumexp

from selection.exceptions import DimensionMismatch, InvalidHyper, RankDeficient, TooLarge
from selection.services.linmodel import (
    Dataset,
    IncrementalGram,
    LogMarginalCache,
    ModelIndicator,
    ZellnerConfig,
    log_marginal,
    log_marginal_from_fit,
    mask_key,
)
from selection.services.priors import (
    BetaBinomialPrior,
    ModelPrior,
    beta_binomial_log_odds,
    log_model_prior,
    log_model_prior_table,
    log_prior_odds,
    prior_log_odds,
)

logger = logging.getLogger(__name__)

Seed = Union[int, np.random.SeedSequence]


def make_rng(seed: Seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def spawn_seeds(seed: Seed, count: int):
    """Independent child seeds; child r depends only on (seed, r)."""
    parent = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return parent.spawn(count)


@dataclass(frozen=True)
class GibbsConfig:
    """
    n_sweeps full passes over all p coordinates, the first burn_in discarded.

    burn_in defaults to 10% of the sweeps.
    """

    n_sweeps: int = 1000
    burn_in: Optional[int] = None
    seed: Seed = 0
    init: Optional[ModelIndicator] = None

    def __post_init__(self):
        if self.n_sweeps < 1:
            raise InvalidHyper(f"n_sweeps must be at least 1, got {self.n_sweeps}")
        burn_in = self.n_sweeps // 10 if self.burn_in is None else int(self.burn_in)
        if not 0 <= burn_in < self.n_sweeps:
            raise InvalidHyper(f"burn_in must lie in [0, n_sweeps), got {burn_in} for {self.n_sweeps} sweeps")
        object.__setattr__(self, 'burn_in', burn_in)

    def with_seed(self, seed: Seed, init: Optional[ModelIndicator] = None) -> 'GibbsConfig':
        return GibbsConfig(self.n_sweeps, self.burn_in, seed, init if init is not None else self.init)


@dataclass(frozen=True, eq=False)
class ChainResult:
    pip: np.ndarray
    model_freq: Dict[ModelIndicator, float]
    n_kept: int
    log_post_trace: np.ndarray
    final_state: ModelIndicator
    flip_rate: float


@dataclass(frozen=True, eq=False)
class LogMarginalTable:
    """log p(y | gamma) for every row of a 2^p x p model matrix (-inf when rank deficient)."""

    masks: np.ndarray
    log_marginals: np.ndarray

    @property
    def p(self) -> int:
        return self.masks.shape[1]


@dataclass(frozen=True, eq=False)
class ExactPosterior:
    log_evidence: float
    probs: np.ndarray
    pip: np.ndarray
    masks: np.ndarray

    @cached_property
    def model_probs(self) -> Dict[ModelIndicator, float]:
        return {ModelIndicator.from_mask(m): float(w) for m, w in zip(self.masks, self.probs)}

    @cached_property
    def _row_of(self) -> Dict[bytes, int]:
        return {mask_key(m): i for i, m in enumerate(self.masks)}

    def model_prob(self, gamma: ModelIndicator) -> float:
        return float(self.probs[self._row_of[gamma.key]])

    def mode(self) -> ModelIndicator:
        return ModelIndicator.from_mask(self.masks[int(np.argmax(self.probs))])


def _check_prior_size(prior: ModelPrior, p: int) -> None:
    size = getattr(prior, 'p', p)
    if size != p:
        raise DimensionMismatch(f"Prior defined for {size} covariates, dataset has p = {p}")


class GibbsKernel:
    """
    Single-site Gibbs updates in ascending coordinate order.

    Keeps the Cholesky factor of the current design and the current
    log p(y | gamma), so each coordinate needs one bordered or downdated
    factor (or a cache hit) instead of a fresh fit.
    """

    def __init__(self, dataset: Dataset, prior: ModelPrior, cfg: ZellnerConfig,
                 state: ModelIndicator, cache: Optional[LogMarginalCache] = None):
        if state.p != dataset.p:
            raise DimensionMismatch(f"State built for p = {state.p}, dataset has p = {dataset.p}")
        self.dataset = dataset
        self.cfg = cfg
        self.cache = cache
        self.mask = state.mask()
        self.gram = IncrementalGram(dataset, state.included)
        self.current = self._log_marginal_for(self.mask, lambda: self.gram.fitted_sumsq)
        self.flips = 0
        self.updates = 0
        self.set_prior(prior)

    def set_prior(self, prior: ModelPrior) -> None:
        """Swap the model prior, e.g. after an omega update; the likelihood state is kept."""
        _check_prior_size(prior, self.dataset.p)
        p = self.dataset.p
        self.prior = prior
        self._odds = prior_log_odds(prior)
        if isinstance(prior, BetaBinomialPrior):
            self._bb_odds = np.array([beta_binomial_log_odds(prior, p, k) for k in range(p)])
        else:
            probs = expit(self._odds)
            self._log_in, self._log_out = np.log(probs), np.log1p(-probs)

    def _log_marginal_for(self, mask: np.ndarray, fitted) -> float:
        def compute():
            fitted_sumsq = fitted()
            if fitted_sumsq is None:
                return -math.inf
            return log_marginal_from_fit(int(mask.sum()), fitted_sumsq, self.dataset.yty, self.dataset.n, self.cfg)

        if self.cache is None:
            return compute()
        return self.cache.get_or_compute(mask_key(mask), compute)

    def log_odds(self, j: int) -> float:
        if self._odds is not None:
            return float(self._odds[j])
        k_others = int(self.mask.sum()) - int(self.mask[j])
        return float(self._bb_odds[k_others])

    def log_prior(self) -> float:
        if self._odds is None:
            return log_model_prior(self.prior, ModelIndicator.from_mask(self.mask), self.dataset.p)
        return float(self._log_in[self.mask].sum() + self._log_out[~self.mask].sum())

    def update(self, j: int, rng: np.random.Generator) -> None:
        flipped = self.mask.copy()
        flipped[j] = not flipped[j]
        if self.mask[j]:
            other = self._log_marginal_for(flipped, lambda: self.gram.fitted_if_removed(j))
            log_in, log_out = self.current, other
        else:
            other = self._log_marginal_for(flipped, lambda: self.gram.fitted_if_added(j))
            log_in, log_out = other, self.current

        diff = log_in - log_out
        prob = 0.0 if math.isinf(log_in) and log_in < 0 else float(expit(diff + self.log_odds(j)))
        include = bool(rng.random() < prob)
        self.updates += 1
        if include == bool(self.mask[j]):
            return
        try:
            if include:
                self.gram.add(j)
            else:
                self.gram.remove(j)
        except RankDeficient:
            return
        self.mask = flipped
        self.current = other
        self.flips += 1

    def sweep(self, rng: np.random.Generator) -> None:
        for j in range(self.dataset.p):
            self.update(j, rng)

    @property
    def state(self) -> ModelIndicator:
        return ModelIndicator.from_mask(self.mask)


def conditional_inclusion_prob(state: ModelIndicator, j: int, dataset: Dataset, prior: ModelPrior,
                               cfg: ZellnerConfig) -> float:
    """P(gamma_j = 1 | gamma_-j, y) computed from two direct fits."""
    mask_in, mask_out = state.mask(), state.mask()
    mask_in[j], mask_out[j] = True, False
    try:
        log_in = log_marginal(dataset, ModelIndicator.from_mask(mask_in), cfg)
    except RankDeficient:
        return 0.0
    log_out = log_marginal(dataset, ModelIndicator.from_mask(mask_out), cfg)
    return float(expit(log_in - log_out + log_prior_odds(prior, j, mask_in)))


def gibbs_sweep(state: ModelIndicator, dataset: Dataset, prior: ModelPrior, cfg: ZellnerConfig,
                cache: Optional[LogMarginalCache], rng: np.random.Generator) -> ModelIndicator:
    """One pass over j = 0..p-1, each gamma_j drawn from its full conditional."""
    kernel = GibbsKernel(dataset, prior, cfg, state, cache)
    kernel.sweep(rng)
    return kernel.state


def run_chain(dataset: Dataset, prior: ModelPrior, cfg_z: ZellnerConfig, cfg_g: GibbsConfig,
              cache: Optional[LogMarginalCache] = None) -> ChainResult:
    """Run cfg_g.n_sweeps sweeps and summarise the kept ones."""
    rng = make_rng(cfg_g.seed)
    init = cfg_g.init if cfg_g.init is not None else ModelIndicator.empty(dataset.p)
    kernel = GibbsKernel(dataset, prior, cfg_z, init, cache)

    trace = np.empty(cfg_g.n_sweeps)
    counts: Counter = Counter()
    inclusion = np.zeros(dataset.p)
    for sweep in range(cfg_g.n_sweeps):
        kernel.sweep(rng)
        trace[sweep] = kernel.current + kernel.log_prior()
        if sweep >= cfg_g.burn_in:
            counts[mask_key(kernel.mask)] += 1
            inclusion += kernel.mask

    n_kept = cfg_g.n_sweeps - cfg_g.burn_in
    states = {}
    for key in counts:
        bits = np.unpackbits(np.frombuffer(key, dtype=np.uint8), count=dataset.p).astype(bool)
        states[key] = ModelIndicator.from_mask(bits)
    model_freq = {states[key]: count / n_kept for key, count in counts.items()}
    flip_rate = kernel.flips / max(kernel.updates, 1)
    logger.debug(f"Chain done: {cfg_g.n_sweeps} sweeps, {len(model_freq)} distinct models, flip rate {flip_rate:.3f}")
    return ChainResult(inclusion / n_kept, model_freq, n_kept, trace, kernel.state, flip_rate)


def model_masks(p: int) -> np.ndarray:
    """All 2^p inclusion masks; bit j of the row number is covariate j."""
    rows = np.arange(2 ** p, dtype=np.int64)
    return ((rows[:, None] >> np.arange(p)) & 1).astype(bool)


def _max_p(max_p: Optional[int]) -> int:
    return settings.ENUMERATION_MAX_P if max_p is None else max_p


def enumerate_log_marginals(dataset: Dataset, cfg: ZellnerConfig, max_p: Optional[int] = None,
                            cache: Optional[LogMarginalCache] = None) -> LogMarginalTable:
    """
    log p(y | gamma) over the whole model space. The table does not depend on the
    model prior, so EM iterations enumerate once and reweight.

    Raises:
        TooLarge: p exceeds max_p.
    """
    cap = _max_p(max_p)
    if dataset.p > cap:
        raise TooLarge(f"Enumeration over 2^{dataset.p} models exceeds the cap of p = {cap}")
    masks = model_masks(dataset.p)
    values = np.empty(masks.shape[0])
    for i, mask in enumerate(masks):
        gamma = ModelIndicator.from_mask(mask)
        try:
            values[i] = log_marginal(dataset, gamma, cfg, cache)
        except RankDeficient:
            values[i] = -math.inf
    n_excluded = int(np.isinf(values).sum())
    if n_excluded:
        logger.debug(f"{n_excluded} rank-deficient models excluded from enumeration")
    return LogMarginalTable(masks, values)


def posterior_from_table(table: LogMarginalTable, prior: ModelPrior) -> ExactPosterior:
    _check_prior_size(prior, table.p)
    log_weights = table.log_marginals + log_model_prior_table(prior, table.masks)
    log_evidence = float(logsumexp(log_weights))
    probs = np.exp(log_weights - log_evidence)
    pip = probs @ table.masks
    return ExactPosterior(log_evidence, probs, pip, table.masks)


def enumerate_posterior(dataset: Dataset, prior: ModelPrior, cfg: ZellnerConfig,
                        max_p: Optional[int] = None) -> ExactPosterior:
    """Exact normalised posterior over all 2^p models and log p(y | prior)."""
    return posterior_from_table(enumerate_log_marginals(dataset, cfg, max_p), prior)

