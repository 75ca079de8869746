"""
One entry point from a method label to a fitted selection result.

Used by the management commands, the simulation harness and leave-one-out
cross-validation so every caller fits the same way.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from django.conf import settings as django_settings
from scipy.special import expit

from selection.exceptions import DimensionMismatch, InvalidHyper
from selection.services.ebayes import (
    BlockGibbsResult,
    EmConfig,
    EmTrace,
    ExactEStep,
    StochasticEStep,
    TwoStepResult,
    block_gibbs_full,
    em_fit,
    two_step,
)
from selection.services.linmodel import (
    Dataset,
    LogMarginalCache,
    ModelIndicator,
    Standardizer,
    ZellnerConfig,
    bma_intervals,
    bma_point_estimate,
    standardize,
)
from selection.services.priors import (
    PREDICTOR_CLAMP,
    BetaBinomialPrior,
    BlockStructure,
    FixedBernoulliPrior,
    HyperPrior,
    LogisticMetaPrior,
    MetaCovariates,
    logistic_inclusion_probs,
)
from selection.services.sampler import GibbsConfig, enumerate_posterior, make_rng, run_chain, spawn_seeds

logger = logging.getLogger(__name__)

METHODS = ('em-exact', 'em-gibbs', 'two-step', 'mcmc', 'beta-binomial')
HARNESS_METHODS = ('ebayes_meta', 'ebayes_intercept', 'beta_binomial')
E_STEPS = ('auto', 'exact', 'gibbs')
# Models below this posterior mass are left out of model averages
MODEL_WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True)
class FitSettings:
    zellner: ZellnerConfig = field(default_factory=ZellnerConfig)
    sweeps: int = 1000
    burn_in: Optional[int] = None
    em_iters: int = 20
    em_sweeps: Optional[int] = None
    e_step: str = 'auto'
    g_omega: Optional[float] = None
    mh_step: float = 0.5
    standardize: bool = True
    interval_draws: int = 4000

    def __post_init__(self):
        if self.e_step not in E_STEPS:
            raise InvalidHyper(f"e_step must be one of {', '.join(E_STEPS)}, got {self.e_step!r}")
        if self.em_iters < 1:
            raise InvalidHyper(f"em_iters must be at least 1, got {self.em_iters}")
        if self.interval_draws < 0:
            raise InvalidHyper("interval_draws cannot be negative")
        GibbsConfig(self.sweeps, self.burn_in)
        if self.em_sweeps is not None:
            GibbsConfig(self.em_sweeps)

    def gibbs(self, seed, sweeps: Optional[int] = None) -> GibbsConfig:
        if sweeps is None or sweeps == self.sweeps:
            return GibbsConfig(self.sweeps, self.burn_in, seed)
        return GibbsConfig(sweeps, None, seed)

    def use_exact(self, p: int) -> bool:
        if self.e_step == 'auto':
            return p <= django_settings.EXACT_E_STEP_MAX_P
        return self.e_step == 'exact'


@dataclass(eq=False)
class MethodFit:
    method: str
    pip: np.ndarray
    bma_coef: np.ndarray
    prior_probs: np.ndarray
    names: Tuple[str, ...]
    bma_fit_scale: np.ndarray
    scaler: Optional[Standardizer] = None
    ci_low: Optional[np.ndarray] = None
    ci_high: Optional[np.ndarray] = None
    omega: Optional[np.ndarray] = None
    omega_names: Tuple[str, ...] = ()
    g_omega: Optional[float] = None
    em_trace: Optional[EmTrace] = None
    two_step: Optional[TwoStepResult] = None
    block_gibbs: Optional[BlockGibbsResult] = None
    exact: bool = False
    converged: Optional[bool] = None
    n_models: int = 0

    def predict(self, X_raw: np.ndarray) -> np.ndarray:
        """Model-averaged predictions for new rows, in raw response units."""
        if self.scaler is not None:
            return self.scaler.predict(X_raw, self.bma_fit_scale)
        return np.atleast_2d(X_raw) @ self.bma_fit_scale


def _model_weights(dataset: Dataset, prior, cfg_z: ZellnerConfig, exact: bool, gibbs: GibbsConfig,
                   cache: LogMarginalCache) -> Tuple[Dict[ModelIndicator, float], np.ndarray]:
    if exact:
        posterior = enumerate_posterior(dataset, prior, cfg_z)
        keep = posterior.probs > MODEL_WEIGHT_FLOOR
        total = posterior.probs[keep].sum()
        weights = {ModelIndicator.from_mask(m): float(w / total)
                   for m, w in zip(posterior.masks[keep], posterior.probs[keep])}
        return weights, posterior.pip
    chain = run_chain(dataset, prior, cfg_z, gibbs, cache)
    return chain.model_freq, chain.pip


def _frequencies(gammas: np.ndarray) -> Dict[ModelIndicator, float]:
    rows, counts = np.unique(gammas, axis=0, return_counts=True)
    return {ModelIndicator.from_mask(r): c / gammas.shape[0] for r, c in zip(rows, counts)}


def resolve_method(method: str, meta: MetaCovariates) -> Tuple[str, MetaCovariates]:
    """Map harness labels onto fitting methods; ebayes_intercept drops every meta-covariate."""
    if method == 'ebayes_meta':
        return 'em-gibbs', meta
    if method == 'ebayes_intercept':
        return 'em-gibbs', MetaCovariates.intercept_only(meta.p)
    if method == 'beta_binomial':
        return 'beta-binomial', meta
    if method not in METHODS:
        raise InvalidHyper(f"Unknown method {method!r}; choose from {', '.join(METHODS + HARNESS_METHODS)}")
    return method, meta


def fit_method(method: str, dataset: Dataset, meta: MetaCovariates, settings: FitSettings,
               seed) -> MethodFit:
    """
    Fit one method and summarise it: pips, model-averaged coefficients (raw units),
    credible intervals, omega where the method has one, and prior inclusion probabilities.
    """
    kind, meta = resolve_method(method, meta)
    if meta.p != dataset.p:
        raise DimensionMismatch(f"Meta-covariates describe {meta.p} covariates, data has p = {dataset.p}")

    fit_data, scaler = standardize(dataset) if settings.standardize else (dataset, None)
    cfg_z = settings.zellner
    em_seed, final_seed, interval_seed = spawn_seeds(seed, 3)
    cache = LogMarginalCache(django_settings.LOG_MARGINAL_CACHE_CAPACITY)
    exact = settings.use_exact(dataset.p)
    result = dict(method=method, exact=exact, names=dataset.names)

    if kind == 'beta-binomial':
        prior = BetaBinomialPrior(1.0, 1.0)
        weights, pip = _model_weights(fit_data, prior, cfg_z, exact, settings.gibbs(final_seed), cache)
        prior_probs = np.full(dataset.p, prior.alpha / (prior.alpha + prior.beta))

    elif kind in ('em-exact', 'em-gibbs'):
        exact = kind == 'em-exact'
        hp = HyperPrior.from_meta(meta, settings.g_omega)
        e_step = ExactEStep() if exact else StochasticEStep(settings.gibbs(em_seed, settings.em_sweeps))
        trace = em_fit(fit_data, meta, cfg_z, hp, EmConfig(max_iters=settings.em_iters, e_step=e_step), cache)
        prior = LogisticMetaPrior(meta, trace.omega)
        weights, pip = _model_weights(fit_data, prior, cfg_z, exact, settings.gibbs(final_seed), cache)
        prior_probs = logistic_inclusion_probs(meta, trace.omega)
        result.update(omega=trace.omega, omega_names=meta.names, g_omega=hp.g_omega, em_trace=trace,
                      converged=trace.converged, exact=exact)

    elif kind == 'two-step':
        blocks = BlockStructure.from_meta(meta)
        e_step = ExactEStep() if exact else StochasticEStep(settings.gibbs(em_seed))
        outcome = two_step(fit_data, blocks, cfg_z, e_step, cache)
        bound = float(expit(PREDICTOR_CLAMP))
        prior_probs = np.clip(outcome.prior_probs(), 1.0 - bound, bound)
        weights, pip = _model_weights(fit_data, FixedBernoulliPrior(prior_probs), cfg_z, exact,
                                      settings.gibbs(final_seed), cache)
        result.update(omega=outcome.block_log_odds, omega_names=blocks.names, two_step=outcome)

    else:
        hp = HyperPrior.from_meta(meta, settings.g_omega)
        draws = block_gibbs_full(fit_data, meta, hp, cfg_z, settings.gibbs(final_seed),
                                 mh_step=settings.mh_step, cache=cache)
        weights, pip = _frequencies(draws.gammas), draws.pip
        prior_probs = logistic_inclusion_probs(meta, draws.omega_mean)
        result.update(omega=draws.omega_mean, omega_names=meta.names, g_omega=hp.g_omega,
                      block_gibbs=draws, exact=False)

    theta = bma_point_estimate(weights, fit_data, cfg_z)
    to_raw = scaler.coefficients_to_raw if scaler is not None else (lambda values: values)
    if settings.interval_draws:
        lo, hi = bma_intervals(weights, fit_data, cfg_z, make_rng(interval_seed), settings.interval_draws)
        result.update(ci_low=to_raw(lo), ci_high=to_raw(hi))

    logger.info(f"{method}: {len(weights)} models averaged, {int((pip >= 0.5).sum())} covariates with pip >= 0.5")
    return MethodFit(pip=pip, bma_coef=to_raw(theta), prior_probs=prior_probs, bma_fit_scale=theta,
                     scaler=scaler, n_models=len(weights), **result)
