"""
Empirical-Bayes estimation of the meta-covariate coefficients omega.

The marginal likelihood p(y | omega) sums over all models, but its gradient is
Z'(pip - m(omega)), so EM only needs posterior inclusion probabilities:
    E-step: pip at the current omega (enumeration or a Gibbs chain)
    M-step: maximise f(omega) + log pi(omega) with
            f(omega) = sum_j pip_j log m_j + (1 - pip_j) log(1 - m_j)

Also here: the two-step block estimator and a sampler over (gamma, omega)
that puts the hyperprior to work in a fully Bayesian fit.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.special import expit, logit

from selection.exceptions import (
    DimensionMismatch,
    DomainError,
    InvalidHyper,
    NoConvergence,
    NotBlockStructured,
)
from selection.services.linmodel import Dataset, LogMarginalCache, ModelIndicator, ZellnerConfig
from selection.services.priors import (
    PREDICTOR_CLAMP,
    BlockStructure,
    FixedBernoulliPrior,
    HyperPrior,
    LogisticMetaPrior,
    MetaCovariates,
    kappa,
    log_hyperprior_and_grad,
    logistic_inclusion_probs,
)
from selection.services.sampler import (
    ChainResult,
    GibbsConfig,
    GibbsKernel,
    LogMarginalTable,
    enumerate_log_marginals,
    enumerate_posterior,
    make_rng,
    posterior_from_table,
    run_chain,
    spawn_seeds,
)

logger = logging.getLogger(__name__)

MAX_STEP_HALVINGS = 30
SOLVE_H_TOL = 1e-12
SOLVE_H_MAX_ITERS = 200
# Robbins-Monro target for the omega random walk during burn-in
TARGET_ACCEPTANCE = 0.3


@dataclass(frozen=True)
class ExactEStep:
    """Posterior inclusion probabilities by enumerating every model."""

    max_p: Optional[int] = None


@dataclass(frozen=True)
class StochasticEStep:
    """Posterior inclusion probabilities estimated by a Gibbs chain at the current omega."""

    gibbs: GibbsConfig = field(default_factory=GibbsConfig)


EStep = Union[ExactEStep, StochasticEStep]


@dataclass(frozen=True, eq=False)
class EmConfig:
    max_iters: int = 50
    tol_omega: float = 1e-6
    e_step: EStep = field(default_factory=ExactEStep)
    newton_max: int = 100
    newton_tol: float = 1e-10
    omega_init: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidHyper(f"max_iters must be at least 1, got {self.max_iters}")
        if not (self.tol_omega > 0 and self.newton_tol > 0):
            raise InvalidHyper("EM tolerances must be positive")
        if self.newton_max < 1:
            raise InvalidHyper(f"newton_max must be at least 1, got {self.newton_max}")

    def initial_omega(self, q: int) -> np.ndarray:
        if self.omega_init is None:
            return np.zeros(q)
        omega = np.asarray(self.omega_init, dtype=float).ravel()
        if omega.shape[0] != q:
            raise DimensionMismatch(f"omega_init has length {omega.shape[0]}, Z has q = {q}")
        return omega.copy()


def sparse_start(meta: MetaCovariates) -> np.ndarray:
    """omega with intercept logit(1/(p+1)) and every other coefficient 0."""
    omega = np.zeros(meta.q)
    if meta.has_intercept:
        omega[meta.intercept_column] = logit(1.0 / (meta.p + 1))
    return omega


@dataclass(eq=False)
class EmTrace:
    omegas: List[np.ndarray]
    objective: Optional[List[float]]
    pips: np.ndarray
    converged: bool
    mstep_failed: bool = False

    @property
    def omega(self) -> np.ndarray:
        return self.omegas[-1]

    @property
    def iterations(self) -> int:
        return len(self.omegas) - 1


@dataclass(frozen=True, eq=False)
class TwoStepResult:
    omega0: np.ndarray
    omega1: np.ndarray
    kappa0: np.ndarray
    kappa1: np.ndarray
    pip: np.ndarray
    blocks: BlockStructure

    @property
    def block_log_odds(self) -> np.ndarray:
        with np.errstate(divide='ignore'):
            return logit(self.omega1)

    def prior_probs(self) -> np.ndarray:
        return self.blocks.expand(self.omega1)


@dataclass(frozen=True, eq=False)
class BlockGibbsResult:
    gammas: np.ndarray
    omegas: np.ndarray
    acceptance_rate: float
    mh_step: float

    @property
    def omega_mean(self) -> np.ndarray:
        return self.omegas.mean(axis=0)

    @property
    def pip(self) -> np.ndarray:
        return self.gammas.mean(axis=0)


def _check_probability_vector(values: np.ndarray, p: int, label: str) -> np.ndarray:
    values = np.asarray(values, dtype=float).ravel()
    if values.shape[0] != p:
        raise DimensionMismatch(f"{label} has length {values.shape[0]}, expected p = {p}")
    return values


def marginal_loglik_gradient(pip: np.ndarray, prior_probs: np.ndarray, Z: MetaCovariates) -> np.ndarray:
    """Z'(pip - prior_probs); with exact pips this is the gradient of log p(y | omega)."""
    pip = _check_probability_vector(pip, Z.p, 'pip')
    prior_probs = _check_probability_vector(prior_probs, Z.p, 'prior_probs')
    return Z.Z.T @ (pip - prior_probs)


def _predictor(omega: np.ndarray, Z: MetaCovariates) -> np.ndarray:
    omega = np.asarray(omega, dtype=float).ravel()
    if omega.shape[0] != Z.q:
        raise DimensionMismatch(f"omega has length {omega.shape[0]}, Z has q = {Z.q}")
    return Z.Z @ omega


def _bernoulli_loglik(weights: np.ndarray, eta: np.ndarray) -> float:
    return float(weights @ eta - np.logaddexp(0.0, eta).sum())


def em_objective(pip_hat: np.ndarray, omega: np.ndarray, Z: MetaCovariates) -> float:
    """
    f(omega) = sum_j pip_j log m_j + (1 - pip_j) log(1 - m_j).

    The predictor is not clamped; em_objective_grad_hess differentiates this exact f.
    """
    pip_hat = _check_probability_vector(pip_hat, Z.p, 'pip_hat')
    return _bernoulli_loglik(pip_hat, _predictor(omega, Z))


def em_objective_grad_hess(pip_hat: np.ndarray, omega: np.ndarray,
                           Z: MetaCovariates) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gradient Z'(pip_hat - m) and Hessian -Z' diag(m (1 - m)) Z of f.

    The curvature weights are the Bernoulli variances m_j (1 - m_j); weights of
    m_j alone do not agree with finite differences of f.
    """
    pip_hat = _check_probability_vector(pip_hat, Z.p, 'pip_hat')
    m = expit(_predictor(omega, Z))
    grad = Z.Z.T @ (pip_hat - m)
    weights = m * (1.0 - m)
    hess = -(Z.Z.T * weights) @ Z.Z
    return grad, hess


def _penalized(pip_hat, omega, Z, hp) -> float:
    return em_objective(pip_hat, omega, Z) + log_hyperprior_and_grad(omega, hp)[0]


def mstep_newton(pip_hat: np.ndarray, Z: MetaCovariates, hp: HyperPrior, cfg: EmConfig,
                 omega_start: Optional[np.ndarray] = None, tol: Optional[float] = None) -> np.ndarray:
    """
    Maximise f(omega) + log pi(omega) by damped Newton with step halving.

    Stops when ||Z'(pip_hat - m) - V^-1 omega / g_omega||_inf < tol (cfg.newton_tol by default).

    Raises:
        NoConvergence: tolerance not met within cfg.newton_max iterations.
    """
    Z.require_full_rank()
    tol = cfg.newton_tol if tol is None else tol
    omega = cfg.initial_omega(Z.q) if omega_start is None else np.asarray(omega_start, dtype=float).copy()
    penalty = hp.penalty_matrix

    grad_norm = math.inf
    for iteration in range(cfg.newton_max + 1):
        grad, hess = em_objective_grad_hess(pip_hat, omega, Z)
        grad = grad - penalty @ omega
        grad_norm = float(np.abs(grad).max())
        if grad_norm < tol:
            logger.debug(f"M-step converged in {iteration} Newton iterations")
            return omega
        if iteration == cfg.newton_max:
            break
        try:
            step = linalg.solve(penalty - hess, grad, assume_a='pos')
        except (linalg.LinAlgError, ValueError):
            step = np.linalg.lstsq(penalty - hess, grad, rcond=None)[0]

        current = _penalized(pip_hat, omega, Z, hp)
        slack = 1e-14 * max(1.0, abs(current))
        t = 1.0
        for _ in range(MAX_STEP_HALVINGS):
            if _penalized(pip_hat, omega + t * step, Z, hp) >= current - slack:
                break
            t *= 0.5
        omega = omega + t * step

    raise NoConvergence(cfg.newton_max, grad_norm)


def solve_h(a: float, c: float) -> float:
    """
    Root w of 1 / (1 + exp(-w)) + w / c = a.

    For finite c the left side increases from -inf to +inf and the root lies in
    ((a - 1) c, a c); Newton steps that leave the bracket fall back to bisection.
    For c = inf the root is logit(a), which needs 0 < a < 1.
    """
    if not c > 0:
        raise InvalidHyper(f"c must be positive, got {c}")
    if math.isinf(c):
        if not 0 < a < 1:
            raise DomainError(f"h(a, inf) needs 0 < a < 1, got a = {a}")
        return float(logit(a))

    lo, hi = (a - 1.0) * c, a * c
    w = float(np.clip(logit(a), lo, hi)) if 0 < a < 1 else 0.5 * (lo + hi)
    for _ in range(SOLVE_H_MAX_ITERS):
        s = float(expit(w))
        residual = s + w / c - a
        if abs(residual) < SOLVE_H_TOL:
            return w
        if residual > 0:
            hi = w
        else:
            lo = w
        candidate = w - residual / (s * (1.0 - s) + 1.0 / c)
        w = candidate if lo < candidate < hi else 0.5 * (lo + hi)
        if hi - lo <= 4 * np.finfo(float).eps * max(1.0, abs(w)):
            return w
    return w


def block_rows(Z: MetaCovariates) -> np.ndarray:
    """
    The q unique rows U of Z.

    Raises:
        NotBlockStructured: Z does not have exactly q unique rows forming an invertible matrix.
    """
    U = np.unique(Z.Z, axis=0)
    if U.shape[0] != Z.q:
        raise NotBlockStructured(f"Z has {U.shape[0]} unique rows, need exactly q = {Z.q}")
    if np.linalg.matrix_rank(U) < Z.q:
        raise NotBlockStructured("The unique rows of Z form a singular matrix")
    return U


def mstep_closed_form(pip_hat: np.ndarray, Z: MetaCovariates, g_omega: float) -> np.ndarray:
    """
    Exact M-step for block designs under omega ~ N(0, g_omega (Z'Z/p)^-1).

    With U the unique rows of Z, Z U^-1 is a block-indicator matrix, so the
    stationarity equations decouple into one scalar equation per block.
    """
    pip_hat = _check_probability_vector(pip_hat, Z.p, 'pip_hat')
    U = block_rows(Z)
    Z_tilde = linalg.solve(U.T, Z.Z.T).T
    totals = Z_tilde.T @ np.ones(Z.p)
    a = (Z_tilde.T @ pip_hat) / totals
    c = g_omega * Z.p
    omega_tilde = np.array([solve_h(a_k, c) for a_k in a])
    return linalg.solve(U, omega_tilde)


def log_posterior_omega(table: LogMarginalTable, meta: MetaCovariates, omega: np.ndarray,
                        hp: HyperPrior) -> float:
    """log p(y | omega) + log pi(omega), the latter without its normalising constant."""
    posterior = posterior_from_table(table, LogisticMetaPrior(meta, omega))
    return posterior.log_evidence + log_hyperprior_and_grad(omega, hp)[0]


def _closed_form_applies(meta: MetaCovariates, hp: HyperPrior) -> bool:
    try:
        block_rows(meta)
    except NotBlockStructured:
        return False
    return np.allclose(hp.V_inv, meta.V_inv, rtol=1e-10, atol=1e-12)


def _mstep(pip_hat, meta, hp, cfg, omega, closed_form: bool, tol: float) -> np.ndarray:
    if closed_form:
        try:
            return mstep_closed_form(pip_hat, meta, hp.g_omega)
        except DomainError:
            logger.debug("Closed-form M-step left its domain, using Newton")
    return mstep_newton(pip_hat, meta, hp, cfg, omega_start=omega, tol=tol)


def em_fit(dataset: Dataset, Z: MetaCovariates, cfg_z: ZellnerConfig, hp: HyperPrior, cfg: EmConfig,
           cache: Optional[LogMarginalCache] = None) -> EmTrace:
    """
    EM for the posterior mode of omega.

    Exact E-steps enumerate the marginal table once and reweight it each
    iteration; the objective log pi(omega | y) is then recorded and never
    decreases. Stochastic E-steps run one Gibbs chain per iteration, warm
    started at the previous chain's final state with a fresh child seed, all
    sharing one marginal cache. An M-step failure stops the run and is
    flagged in the trace.
    """
    if Z.p != dataset.p:
        raise DimensionMismatch(f"Z has {Z.p} rows, dataset has p = {dataset.p}")
    Z.require_full_rank()
    if hp.q != Z.q:
        raise DimensionMismatch(f"Hyperprior has dimension {hp.q}, Z has q = {Z.q}")
    closed_form = _closed_form_applies(Z, hp)
    omega = cfg.initial_omega(Z.q)
    omegas = [omega]

    if isinstance(cfg.e_step, ExactEStep):
        table = enumerate_log_marginals(dataset, cfg_z, cfg.e_step.max_p, cache)
        objective = []
        converged = failed = False
        for iteration in range(cfg.max_iters):
            posterior = posterior_from_table(table, LogisticMetaPrior(Z, omega))
            objective.append(posterior.log_evidence + log_hyperprior_and_grad(omega, hp)[0])
            try:
                new_omega = _mstep(posterior.pip, Z, hp, cfg, omega, closed_form, cfg.newton_tol)
            except NoConvergence as e:
                logger.warning(f"EM stopped at iteration {iteration + 1}: {e}")
                failed = True
                break
            step = float(np.abs(new_omega - omega).max())
            omega = new_omega
            omegas.append(omega)
            logger.debug(f"EM iteration {iteration + 1}: objective {objective[-1]:.10g}, step {step:.3e}")
            if step < cfg.tol_omega:
                converged = True
                break
        final = posterior_from_table(table, LogisticMetaPrior(Z, omega))
        if len(objective) < len(omegas):
            objective.append(final.log_evidence + log_hyperprior_and_grad(omega, hp)[0])
        trace = EmTrace(omegas, objective, final.pip, converged, failed)
    else:
        trace = _stochastic_em(dataset, Z, cfg_z, hp, cfg, omega, closed_form, cache)

    if not trace.converged and not trace.mstep_failed:
        logger.warning(f"EM reached max_iters = {cfg.max_iters} without omega settling")
    logger.info(f"EM finished after {trace.iterations} iterations, omega = {np.round(trace.omega, 4).tolist()}")
    return trace


def _stochastic_em(dataset, Z, cfg_z, hp, cfg, omega, closed_form, cache) -> EmTrace:
    gibbs = cfg.e_step.gibbs
    cache = cache if cache is not None else LogMarginalCache()
    seeds = spawn_seeds(gibbs.seed, cfg.max_iters + 1)
    omegas = [omega]
    state = gibbs.init
    converged = failed = False
    chain: Optional[ChainResult] = None
    for iteration in range(cfg.max_iters):
        chain = run_chain(dataset, LogisticMetaPrior(Z, omega), cfg_z,
                          gibbs.with_seed(seeds[iteration], state), cache)
        state = chain.final_state
        # Monte Carlo error of the pips bounds how precisely the M-step can be solved
        tol = max(cfg.newton_tol, 1.0 / math.sqrt(chain.n_kept))
        try:
            new_omega = _mstep(chain.pip, Z, hp, cfg, omega, closed_form, tol)
        except NoConvergence as e:
            logger.warning(f"Stochastic EM stopped at iteration {iteration + 1}: {e}")
            failed = True
            break
        step = float(np.abs(new_omega - omega).max())
        omega = new_omega
        omegas.append(omega)
        logger.debug(f"Stochastic EM iteration {iteration + 1}: step {step:.3e}, flip rate {chain.flip_rate:.3f}")
        if step < cfg.tol_omega:
            converged = True
            break

    final = run_chain(dataset, LogisticMetaPrior(Z, omega), cfg_z,
                      gibbs.with_seed(seeds[cfg.max_iters], state), cache)
    logger.debug(f"Marginal cache: {len(cache)} models, {cache.hits} hits, {cache.misses} misses")
    return EmTrace(omegas, None, final.pip, converged, failed)


def estimate_pips(dataset: Dataset, prior, cfg_z: ZellnerConfig, e_step: EStep,
                  cache: Optional[LogMarginalCache] = None) -> np.ndarray:
    if isinstance(e_step, ExactEStep):
        return enumerate_posterior(dataset, prior, cfg_z, e_step.max_p).pip
    return run_chain(dataset, prior, cfg_z, e_step.gibbs, cache).pip


def _kappa_or_limit(omega_b: float, g_theta: float, n: int) -> float:
    if omega_b <= 0:
        return math.inf
    if omega_b >= 1:
        return -math.inf
    return kappa(omega_b, g_theta, n)


def two_step(dataset: Dataset, blocks: BlockStructure, cfg_z: ZellnerConfig, e_step: EStep,
             cache: Optional[LogMarginalCache] = None) -> TwoStepResult:
    """
    Block prior probabilities from one round of pips under the sparse prior 1/(p+1).

    No hyperprior enters: omega1_b is the plain block mean of the pips.
    A block whose mean pip is exactly 0 or 1 gets kappa = +inf or -inf.
    """
    if blocks.p != dataset.p:
        raise DimensionMismatch(f"Block labels cover {blocks.p} covariates, dataset has p = {dataset.p}")
    p, n = dataset.p, dataset.n
    omega0 = np.full(blocks.B, 1.0 / (p + 1))
    pip = estimate_pips(dataset, FixedBernoulliPrior(blocks.expand(omega0)), cfg_z, e_step, cache)
    omega1 = blocks.block_means(pip)
    kappa0 = np.array([_kappa_or_limit(w, cfg_z.g_theta, n) for w in omega0])
    kappa1 = np.array([_kappa_or_limit(w, cfg_z.g_theta, n) for w in omega1])
    logger.info(f"Two-step block probabilities: {np.round(omega1, 4).tolist()}")
    return TwoStepResult(omega0, omega1, kappa0, kappa1, pip, blocks)


def log_conditional_omega(omega: np.ndarray, gamma_mask: np.ndarray, Z: MetaCovariates,
                          hp: HyperPrior) -> float:
    """
    log pi(omega | gamma) up to a constant: sum_j log Bern(gamma_j; m_j) + log pi(omega).

    m_j uses the same clamped predictor as the model prior the gamma sweeps run under.
    """
    gamma = _check_probability_vector(np.asarray(gamma_mask, dtype=float), Z.p, 'gamma')
    eta = np.clip(_predictor(omega, Z), -PREDICTOR_CLAMP, PREDICTOR_CLAMP)
    return _bernoulli_loglik(gamma, eta) + log_hyperprior_and_grad(omega, hp)[0]


def omega_mh_step(omega: np.ndarray, gamma_mask: np.ndarray, Z: MetaCovariates, hp: HyperPrior,
                  chol_V: np.ndarray, step: float, rng: np.random.Generator) -> Tuple[np.ndarray, bool]:
    """One random-walk Metropolis update of omega with proposal N(omega, step^2 V)."""
    proposal = omega + step * (chol_V @ rng.standard_normal(Z.q))
    log_ratio = (log_conditional_omega(proposal, gamma_mask, Z, hp)
                 - log_conditional_omega(omega, gamma_mask, Z, hp))
    if math.log(rng.random()) < log_ratio:
        return proposal, True
    return omega, False


def block_gibbs_full(dataset: Dataset, Z: MetaCovariates, hp: HyperPrior, cfg_z: ZellnerConfig,
                     cfg_g: GibbsConfig, mh_step: float = 0.5, adapt: bool = False,
                     omega_init: Optional[np.ndarray] = None,
                     cache: Optional[LogMarginalCache] = None) -> BlockGibbsResult:
    """
    Alternate a full Gibbs sweep over gamma at the current omega with a
    random-walk Metropolis update of omega given gamma.

    With adapt=True the proposal scale follows a Robbins-Monro recursion
    towards TARGET_ACCEPTANCE during burn-in and is frozen afterwards.
    """
    if not mh_step > 0:
        raise InvalidHyper(f"mh_step must be positive, got {mh_step}")
    if Z.p != dataset.p:
        raise DimensionMismatch(f"Z has {Z.p} rows, dataset has p = {dataset.p}")
    rng = make_rng(cfg_g.seed)
    omega = np.zeros(Z.q) if omega_init is None else np.asarray(omega_init, dtype=float).copy()
    init = cfg_g.init if cfg_g.init is not None else ModelIndicator.empty(dataset.p)
    kernel = GibbsKernel(dataset, LogisticMetaPrior(Z, omega), cfg_z, init, cache)
    chol_V = linalg.cholesky(hp.V, lower=True)

    n_kept = cfg_g.n_sweeps - cfg_g.burn_in
    gammas = np.zeros((n_kept, dataset.p), dtype=bool)
    omegas = np.zeros((n_kept, Z.q))
    log_step = math.log(mh_step)
    accepted_kept = 0
    for sweep in range(cfg_g.n_sweeps):
        kernel.sweep(rng)
        omega, accepted = omega_mh_step(omega, kernel.mask, Z, hp, chol_V, math.exp(log_step), rng)
        kernel.set_prior(LogisticMetaPrior(Z, omega))
        if sweep < cfg_g.burn_in:
            if adapt:
                log_step += (float(accepted) - TARGET_ACCEPTANCE) / (sweep + 1) ** 0.6
            continue
        row = sweep - cfg_g.burn_in
        gammas[row] = kernel.mask
        omegas[row] = omega
        accepted_kept += accepted

    rate = accepted_kept / n_kept
    logger.info(f"Block Gibbs: {n_kept} kept draws, omega acceptance {rate:.3f}, step {math.exp(log_step):.4g}")
    return BlockGibbsResult(gammas, omegas, rate, math.exp(log_step))
