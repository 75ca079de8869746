"""
Simulation studies, selection metrics, design diagnostics and cross-validation.
"""

import logging
import math
from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg, stats

from selection.exceptions import (
    DegenerateVariance,
    DimensionMismatch,
    InvalidHyper,
    SelectionError,
    TooLarge,
)
from selection.services.linmodel import Dataset
from selection.services.pipeline import HARNESS_METHODS, FitSettings, MethodFit, fit_method
from selection.services.priors import BlockStructure, MetaCovariates, kappa, logistic_inclusion_probs
from selection.services.sampler import make_rng, model_masks, spawn_seeds

logger = logging.getLogger(__name__)

BASELINE_OMEGA0 = math.log(0.05 / 0.95)
SCENARIO_OMEGA1 = {1: 2.0, 2: 1.0, 3: 0.0, 4: 1.5, 5: 0.75}
RHO_MAX_P = 14
METRIC_COLUMNS = ['scenario', 'method', 'rep', 'mse', 'power', 'fdr']
# Simulated columns are drawn with unit variance; replicates are fitted on them as drawn.
HARNESS_SETTINGS = FitSettings(standardize=False, interval_draws=0)


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    n: int = 100
    p: int = 60
    q: int = 2
    omega_true: Optional[np.ndarray] = None
    x_corr: float = 0.5
    meta_corr: float = 0.5
    theta_range: Tuple[float, float] = (1.0 / 3.0, 2.0 / 3.0)
    n_reps: int = 1
    seed: int = 0
    pip_threshold: float = 0.95
    label: str = 'custom'

    def __post_init__(self):
        if self.n < 1 or self.p < 1:
            raise InvalidHyper(f"n and p must be positive, got n = {self.n}, p = {self.p}")
        if self.q < 0:
            raise InvalidHyper(f"q cannot be negative, got {self.q}")
        if self.n_reps < 1:
            raise InvalidHyper(f"Need at least one replicate, got {self.n_reps}")
        lo, hi = self.theta_range
        if not lo < hi:
            raise InvalidHyper(f"theta_range needs lo < hi, got {self.theta_range}")
        for name in ('x_corr', 'meta_corr'):
            value = getattr(self, name)
            if not 0 <= value < 1:
                raise InvalidHyper(f"{name} must lie in [0, 1), got {value}")
        if not 0 < self.pip_threshold <= 1:
            raise InvalidHyper(f"pip_threshold must lie in (0, 1], got {self.pip_threshold}")
        omega = self.omega_true
        if omega is None:
            omega = np.zeros(self.q + 1)
            omega[0] = BASELINE_OMEGA0
        omega = np.asarray(omega, dtype=float).ravel()
        if omega.shape[0] != self.q + 1:
            raise InvalidHyper(f"omega_true needs q + 1 = {self.q + 1} entries, got {omega.shape[0]}")
        object.__setattr__(self, 'omega_true', omega)

    @classmethod
    def preset(cls, scenario: int, **overrides) -> 'ScenarioConfig':
        """Scenarios 1-5: omega = (logit 0.05, omega1, 0, ...) with omega1 = 2, 1, 0, 1.5, 0.75."""
        if scenario not in SCENARIO_OMEGA1:
            raise InvalidHyper(f"Unknown scenario {scenario}; choose from {sorted(SCENARIO_OMEGA1)}")
        q = overrides.pop('q', 2)
        if q < 1:
            raise InvalidHyper("Scenario presets need at least one meta-covariate")
        omega = np.zeros(q + 1)
        omega[0] = BASELINE_OMEGA0
        omega[1] = SCENARIO_OMEGA1[scenario]
        overrides.setdefault('label', f'scenario_{scenario}')
        return cls(q=q, omega_true=omega, **overrides)


@dataclass(frozen=True, eq=False)
class Truth:
    gamma_star: np.ndarray
    theta_star: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'gamma_star', np.asarray(self.gamma_star, dtype=bool))
        object.__setattr__(self, 'theta_star', np.asarray(self.theta_star, dtype=float))

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.gamma_star)


@dataclass(frozen=True)
class MetricRow:
    method: str
    mse: float
    power: float
    fdr: float
    rep: int
    scenario: str


@dataclass(frozen=True, eq=False)
class TheoryDiagnostics:
    rho: float
    kappa_per_block: np.ndarray
    theta_min_per_block: np.ndarray
    s_per_block: np.ndarray
    p_per_block: np.ndarray


@dataclass(frozen=True)
class ReplicateError:
    scenario: str
    method: str
    rep: int
    error: str


@dataclass(eq=False)
class ScenarioResult:
    rows: List[MetricRow] = field(default_factory=list)
    errors: List[ReplicateError] = field(default_factory=list)

    def metrics_frame(self) -> pd.DataFrame:
        """Per-replicate rows followed by one mean row per (scenario, method)."""
        frame = pd.DataFrame([row.__dict__ for row in self.rows], columns=METRIC_COLUMNS)
        if frame.empty:
            return frame
        means = (frame.groupby(['scenario', 'method'], sort=False)[['mse', 'power', 'fdr']]
                 .mean().reset_index())
        means['rep'] = 'mean'
        frame['rep'] = frame['rep'].astype(str)
        return pd.concat([frame, means[METRIC_COLUMNS]], ignore_index=True)

    def errors_frame(self) -> pd.DataFrame:
        return pd.DataFrame([e.__dict__ for e in self.errors], columns=['scenario', 'method', 'rep', 'error'])


def equicorrelated_normal(rng: np.random.Generator, rows: int, cols: int, rho: float) -> np.ndarray:
    """Standard normal columns with pairwise correlation rho: sqrt(rho) w + sqrt(1 - rho) e."""
    shared = rng.standard_normal((rows, 1))
    own = rng.standard_normal((rows, cols))
    return math.sqrt(rho) * shared + math.sqrt(1.0 - rho) * own


def active_coefficients(count: int, theta_range: Tuple[float, float]) -> np.ndarray:
    """Uniformly spaced values on [lo, hi]; a single active covariate gets the midpoint."""
    lo, hi = theta_range
    if count == 1:
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo, hi, count)


def simulate_dataset(cfg: ScenarioConfig, rep_seed) -> Tuple[Dataset, MetaCovariates, Truth]:
    """
    Draw one replicate: meta-covariates, true model from the logistic prior,
    coefficients, an equicorrelated design and y = X theta* + N(0, 1) noise.
    """
    rng = make_rng(rep_seed)
    values = equicorrelated_normal(rng, cfg.p, cfg.q, cfg.meta_corr) if cfg.q else np.zeros((cfg.p, 0))
    meta = MetaCovariates.from_columns(values, tuple(f"z{k + 1}" for k in range(cfg.q)))
    gamma_star = rng.random(cfg.p) < logistic_inclusion_probs(meta, cfg.omega_true)
    theta_star = np.zeros(cfg.p)
    active = np.flatnonzero(gamma_star)
    if active.size:
        theta_star[active] = active_coefficients(active.size, cfg.theta_range)
    X = equicorrelated_normal(rng, cfg.n, cfg.p, cfg.x_corr)
    y = X @ theta_star + rng.standard_normal(cfg.n)
    return Dataset(y, X), meta, Truth(gamma_star, theta_star)


def compute_metrics(theta_hat: np.ndarray, pip: np.ndarray, truth: Truth, threshold: float,
                    method: str = '', rep: int = 0, scenario: str = '') -> MetricRow:
    theta_hat = np.asarray(theta_hat, dtype=float)
    pip = np.asarray(pip, dtype=float)
    if theta_hat.shape != truth.theta_star.shape or pip.shape != truth.gamma_star.shape:
        raise DimensionMismatch("Estimates and truth must all have length p")
    selected = pip >= threshold
    true_pos = int(np.sum(selected & truth.gamma_star))
    false_pos = int(np.sum(selected & ~truth.gamma_star))
    n_active = int(truth.gamma_star.sum())
    power = true_pos / n_active if n_active else 0.0
    fdr = false_pos / max(1, int(selected.sum()))
    mse = float(np.sum((theta_hat - truth.theta_star) ** 2))
    return MetricRow(method, mse, power, fdr, rep, scenario)


def rho_X(X: np.ndarray, gamma_star: np.ndarray, max_p: int = RHO_MAX_P) -> float:
    """
    min over models gamma not containing gamma* of the smallest eigenvalue of
    X_{gamma* minus gamma}' (I - P_gamma) X_{gamma* minus gamma} / n.

    Every model contains an empty gamma*, so the minimum is then +inf.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if p > max_p:
        raise TooLarge(f"rho_X scans 2^{p} models, cap is p = {max_p}")
    truth = np.asarray(gamma_star, dtype=bool)
    best = math.inf
    for mask in model_masks(p):
        missing = truth & ~mask
        if not missing.any():
            continue
        block = X[:, missing]
        if mask.any():
            coef = linalg.lstsq(X[:, mask], block)[0]
            block = block - X[:, mask] @ coef
        smallest = float(np.linalg.eigvalsh(block.T @ block / n)[0])
        best = min(best, max(smallest, 0.0))
    return best


def theory_diagnostics(X: np.ndarray, truth: Truth, blocks: BlockStructure, omega_b: np.ndarray,
                       g_theta: float, max_p: int = RHO_MAX_P) -> TheoryDiagnostics:
    n = np.asarray(X).shape[0]
    sizes = blocks.block_sizes
    active_count = np.bincount(blocks.labels, weights=truth.gamma_star.astype(float), minlength=blocks.B)
    theta_min = np.full(blocks.B, math.inf)
    for j in truth.active:
        b = blocks.labels[j]
        theta_min[b] = min(theta_min[b], abs(truth.theta_star[j]))
    return TheoryDiagnostics(
        rho=rho_X(X, truth.gamma_star, max_p),
        kappa_per_block=np.array([kappa(w, g_theta, n) for w in omega_b]),
        theta_min_per_block=theta_min,
        s_per_block=active_count.astype(int),
        p_per_block=sizes,
    )


def _run_replicate(args) -> Tuple[List[MetricRow], List[ReplicateError]]:
    cfg, methods, settings, rep, rep_seed = args
    data_seed, *method_seeds = rep_seed.spawn(1 + len(methods))
    rows, errors = [], []
    try:
        dataset, meta, truth = simulate_dataset(cfg, data_seed)
    except SelectionError as e:
        logger.warning(f"{cfg.label} rep {rep}: simulation failed: {e}")
        return rows, [ReplicateError(cfg.label, method, rep, str(e)) for method in methods]

    for method, seed in zip(methods, method_seeds):
        try:
            fit = fit_method(method, dataset, meta, settings, seed)
        except SelectionError as e:
            logger.warning(f"{cfg.label} rep {rep} {method}: {type(e).__name__}: {e}")
            errors.append(ReplicateError(cfg.label, method, rep, f"{type(e).__name__}: {e}"))
            continue
        rows.append(compute_metrics(fit.bma_coef, fit.pip, truth, cfg.pip_threshold, method, rep, cfg.label))
    logger.info(f"{cfg.label} rep {rep} done ({int(truth.gamma_star.sum())} active)")
    return rows, errors


def run_scenario(cfg: ScenarioConfig, methods: Sequence[str] = HARNESS_METHODS,
                 settings: Optional[FitSettings] = None, n_jobs: int = 1) -> ScenarioResult:
    """
    Simulate cfg.n_reps replicates and score every method on each.

    Replicate r uses child r of SeedSequence(cfg.seed), so the table does not
    depend on n_jobs; rows come back in replicate order.
    """
    unknown = [m for m in methods if m not in HARNESS_METHODS]
    if unknown:
        raise InvalidHyper(f"Unknown harness methods {unknown}; choose from {', '.join(HARNESS_METHODS)}")
    if n_jobs < 1:
        raise InvalidHyper(f"n_jobs must be at least 1, got {n_jobs}")
    settings = settings or HARNESS_SETTINGS
    tasks = [(cfg, tuple(methods), settings, rep, seed)
             for rep, seed in enumerate(spawn_seeds(cfg.seed, cfg.n_reps))]
    if n_jobs == 1:
        outcomes = [_run_replicate(task) for task in tasks]
    else:
        with Pool(processes=n_jobs) as pool:
            outcomes = pool.map(_run_replicate, tasks)

    result = ScenarioResult()
    for rows, errors in outcomes:
        result.rows.extend(rows)
        result.errors.extend(errors)
    return result


@dataclass(frozen=True, eq=False)
class LoocvResult:
    r2: float
    observed: np.ndarray
    predicted: np.ndarray
    omega_names: Tuple[str, ...] = ()
    omega_full: Optional[np.ndarray] = None
    fold_omegas: Optional[np.ndarray] = None
    ci_low: Optional[np.ndarray] = None
    ci_high: Optional[np.ndarray] = None


def squared_correlation(observed: np.ndarray, predicted: np.ndarray) -> float:
    if np.ptp(predicted) == 0:
        raise DegenerateVariance("Leave-one-out predictions are constant; R^2 is undefined")
    if np.ptp(observed) == 0:
        raise DegenerateVariance("Observed responses are constant; R^2 is undefined")
    return float(np.corrcoef(observed, predicted)[0, 1] ** 2)


def jackknife_interval(full: np.ndarray, folds: np.ndarray, level: float = 0.95) -> Tuple[np.ndarray, np.ndarray]:
    """Normal interval around the full-data estimate with the jackknife standard error."""
    n = folds.shape[0]
    spread = folds - folds.mean(axis=0)
    sd = np.sqrt((n - 1) / n * np.sum(spread ** 2, axis=0))
    z = stats.norm.ppf(0.5 + 0.5 * level)
    return full - z * sd, full + z * sd


def loocv(dataset: Dataset, Z: MetaCovariates, method: str, cfg: FitSettings, seed) -> LoocvResult:
    """
    Leave-one-out model-averaged predictions. Each fold is standardised on its
    own training rows; omega-bearing methods also get jackknife intervals.
    """
    if dataset.n < 3:
        raise DimensionMismatch(f"Leave-one-out cross-validation needs n >= 3, got n = {dataset.n}")
    full_seed, *fold_seeds = spawn_seeds(seed, dataset.n + 1)
    predicted = np.empty(dataset.n)
    fold_omegas = []
    for i, fold_seed in enumerate(fold_seeds):
        fit = fit_method(method, dataset.drop_row(i), Z, cfg, fold_seed)
        predicted[i] = fit.predict(dataset.X[i:i + 1])[0]
        if fit.omega is not None:
            fold_omegas.append(fit.omega)
        logger.debug(f"Fold {i + 1}/{dataset.n}: predicted {predicted[i]:.6g}, observed {dataset.y[i]:.6g}")

    r2 = squared_correlation(dataset.y, predicted)
    if not fold_omegas:
        return LoocvResult(r2, dataset.y.copy(), predicted)

    full: MethodFit = fit_method(method, dataset, Z, cfg, full_seed)
    folds = np.vstack(fold_omegas)
    lo, hi = jackknife_interval(full.omega, folds)
    return LoocvResult(r2, dataset.y.copy(), predicted, full.omega_names, full.omega, folds, lo, hi)


def loocv_r2(dataset: Dataset, Z: MetaCovariates, method: str, cfg: FitSettings, seed=0) -> float:
    """Squared correlation between y and its leave-one-out prediction."""
    return loocv(dataset, Z, method, cfg, seed).r2

