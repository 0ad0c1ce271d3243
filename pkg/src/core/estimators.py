"""
CACE estimators built from the gating network, the allocation model and the outcome experts.

`fit_cace` runs the two-step pipeline for one assumption set:

1. fit the gating network on all rows and freeze it;
2. turn it into per-row mixing weights of the outcome experts and fit the experts on the cell(s)
   the assumption set calls for;
3. average `Q_c11(x) - Q_c00(x)` over all rows with weights `rho_c(x)`.

`bootstrap_estimator` wraps any registered estimator, including the IV baselines, in a
percentile bootstrap.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.special import logsumexp

from core.baselines import iv_matching_estimator, wald_estimator
from core.config import ESTIMATOR_NAMES, MatchingConfig, PipelineConfig, SolverConfig
from core.data import TrialDataset
from core.errors import (
    CacemixError,
    ComplierExpertUntrainedError,
    DomainError,
    EmptySubsetError,
    PositivityViolationError,
    TooManyFailuresError,
)
from core.experts import ExpertFit, em_fit_experts_2, em_fit_experts_3
from core.gating import ALWAYS_TAKER, COMPLIER, DEFIER, NEVER_TAKER, GatingModel, StratumSet, em_fit_gating
from core.glm_core import expit, fit_weighted_logistic
from core.logger import MainLogger, default_logger
from core.utils import child_seed


@dataclass(frozen=True)
class AssumptionSet:
    """
    Identification assumptions on top of principal ignorability.

    Attributes:
        exclusion_restriction (bool): Assignment affects outcomes of always/never-takers only through T.
        monotonicity (bool): There are no defiers.
    """

    exclusion_restriction: bool = False
    monotonicity: bool = False

    @property
    def name(self) -> str:
        return {(False, False): "pi", (True, False): "pi_er", (False, True): "pi_mo", (True, True): "pi_mo_er"}[
            (self.exclusion_restriction, self.monotonicity)
        ]

    @classmethod
    def from_name(cls, name: str) -> "AssumptionSet":
        for candidate in (cls(False, False), cls(True, False), cls(False, True), cls(True, True)):
            if candidate.name == name:
                return candidate
        raise DomainError(f"'{name}' is not a principal-ignorability estimator.")


PI_ESTIMATORS: Tuple[str, ...] = ("pi", "pi_er", "pi_mo", "pi_mo_er")


@dataclass(frozen=True)
class AllocationModel:
    """Allocation probability `eta(x) = P(Z = 1 | x)`: a constant or a logistic regression."""

    mode: Literal["constant_mle", "logistic"]
    coefficients: np.ndarray

    @property
    def is_constant(self) -> bool:
        return self.mode == "constant_mle"

    def predict(self, X: np.ndarray) -> np.ndarray:
        if self.is_constant:
            return np.full(np.asarray(X).shape[0], float(self.coefficients[0]))
        return expit(np.asarray(X, dtype=float) @ self.coefficients)

    def log_predict(self, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """`(log eta, log(1 - eta))` per row, unclamped; a constant of 0 or 1 gives `-inf` on one side."""
        rows = np.asarray(X).shape[0]
        if self.is_constant:
            value = float(self.coefficients[0])
            with np.errstate(divide="ignore"):
                return np.full(rows, np.log(value)), np.full(rows, np.log1p(-value))
        logits = np.asarray(X, dtype=float) @ self.coefficients
        return -np.logaddexp(0.0, -logits), -np.logaddexp(0.0, logits)


def estimate_eta(
    data: TrialDataset, mode: str = "constant_mle", cfg: Optional[SolverConfig] = None
) -> AllocationModel:
    """
    Estimate the allocation probability.

    Args:
        data (TrialDataset): Trial rows.
        mode (str): `constant_mle` uses the sample mean of Z; `logistic` regresses Z on the design.
        cfg (Optional[SolverConfig]): Solver settings of the logistic fit.

    Raises:
        EmptySubsetError: If the data has no rows.
    """
    if data.n == 0:
        raise EmptySubsetError("Cannot estimate the allocation probability on an empty dataset.")
    if mode == "constant_mle":
        return AllocationModel(mode="constant_mle", coefficients=np.array([data.z.mean()]))
    fit = fit_weighted_logistic(data.X, data.z, np.ones(data.n), cfg)
    return AllocationModel(mode="logistic", coefficients=fit.coefficients)


@dataclass(frozen=True)
class StratumProbabilities:
    """
    Per-row mixing weights of the outcome experts.

    `p_c11`/`p_c00` are the complier shares of the {Z=1,T=1} and {Z=0,T=0} cells. The `p_k1`
    and `p_k0` columns are the stratum shares of the {T=1} and {T=0} arms, which need the
    allocation probability `eta` and the treatment propensity `e`.
    """

    rho: np.ndarray
    eta: np.ndarray
    e: np.ndarray
    p_c11: np.ndarray
    p_c00: np.ndarray
    p_c1: np.ndarray
    p_a1: np.ndarray
    p_d1: np.ndarray
    p_c0: np.ndarray
    p_n0: np.ndarray
    p_d0: np.ndarray


def compute_stratum_probabilities(gating, eta_model: AllocationModel, X: np.ndarray) -> StratumProbabilities:
    """
    Derive the expert mixing weights from the gating network and the allocation probability.

    Every share is a ratio of stratum probabilities, so it is evaluated from the log
    probabilities: `p_c11 = expit(log rho_c - log rho_a)`, and the arm shares divide by `e` and
    `1 - e` through `logsumexp`. Shares stay accurate on rows where `rho` itself underflows (large
    covariate values) and `e` never rounds to exactly 0 or 1. A share is NaN only where it is
    undefined (every stratum of the ratio has probability exactly zero); `fit_cace` rejects NaN
    weights on the rows it fits.

    Args:
        gating: Fitted `GatingModel` or `LearnedGating`.
        eta_model (AllocationModel): Allocation probability model.
        X (np.ndarray): Design matrix.

    Returns:
        StratumProbabilities: Per-row quantities; the defier shares are exactly zero under monotonicity.

    Example:
        >>> probs = compute_stratum_probabilities(gating, estimate_eta(data), data.X)
        >>> np.allclose(probs.p_c1 + probs.p_a1 + probs.p_d1, 1.0)
        True
    """
    log_rho = gating.log_predict(X, padded=True)
    log_c, log_a, log_n, log_d = (log_rho[:, k] for k in (COMPLIER, ALWAYS_TAKER, NEVER_TAKER, DEFIER))
    log_eta, log_not_eta = eta_model.log_predict(X)

    with np.errstate(divide="ignore", invalid="ignore"):
        log_e = logsumexp(np.stack([log_c + log_eta, log_a, log_d + log_not_eta]), axis=0)
        log_not_e = logsumexp(np.stack([log_c + log_not_eta, log_n, log_d + log_eta]), axis=0)

        def ratio(log_numerator: np.ndarray, log_denominator: np.ndarray) -> np.ndarray:
            return np.clip(np.exp(log_numerator - log_denominator), 0.0, 1.0)

        return StratumProbabilities(
            rho=np.exp(log_rho),
            eta=np.exp(log_eta),
            e=np.exp(log_e),
            p_c11=ratio(log_c, np.logaddexp(log_c, log_a)),
            p_c00=ratio(log_c, np.logaddexp(log_c, log_n)),
            p_c1=ratio(log_c + log_eta, log_e),
            p_a1=ratio(log_a, log_e),
            p_d1=ratio(log_d + log_not_eta, log_e),
            p_c0=ratio(log_c + log_not_eta, log_not_e),
            p_n0=ratio(log_n, log_not_e),
            p_d0=ratio(log_d + log_eta, log_not_e),
        )


def plug_in_cace(rho_c: np.ndarray, q_c11: np.ndarray, q_c00: np.ndarray) -> float:
    """
    `sum_i (Q_c11(x_i) - Q_c00(x_i)) rho_c(x_i) / sum_i rho_c(x_i)`.

    Raises:
        PositivityViolationError: If the complier weights sum to zero.

    Example:
        >>> plug_in_cace(np.array([0.5, 0.25]), np.array([0.1, 0.4]), np.zeros(2))
        0.2
    """
    rho_c = np.asarray(rho_c, dtype=float)
    total = rho_c.sum()
    if not total > 0:
        raise PositivityViolationError("Complier probabilities sum to zero.")
    return float(np.sum((np.asarray(q_c11) - np.asarray(q_c00)) * rho_c) / total)


def extrapolation_share(X: np.ndarray, *training_sets: np.ndarray) -> float:
    """Share of rows of `X` outside the per-column range of at least one training set."""
    outside = np.zeros(X.shape[0], dtype=bool)
    for training in training_sets:
        if training.shape[0] == 0:
            continue
        outside |= np.any((X < training.min(axis=0)) | (X > training.max(axis=0)), axis=1)
    return float(outside.mean()) if X.shape[0] else 0.0


@dataclass(frozen=True)
class CaceFit:
    """
    A fitted CACE pipeline with its components.

    Attributes:
        delta_hat (float): Point estimate in outcome units.
        assumptions (AssumptionSet): Assumption set the pipeline was run under.
        gating (GatingModel): Frozen gating network.
        eta_model (AllocationModel): Allocation probability model.
        probabilities (StratumProbabilities): Mixing weights on all rows.
        treated_experts (ExpertFit): Experts of {Z=1,T=1} or {T=1}.
        control_experts (ExpertFit): Experts of {Z=0,T=0} or {T=0}.
        extrapolation_share (float): Share of rows outside the covariate range the complier experts saw.
    """

    delta_hat: float
    assumptions: AssumptionSet
    gating: GatingModel
    eta_model: AllocationModel
    probabilities: StratumProbabilities
    treated_experts: ExpertFit
    control_experts: ExpertFit
    extrapolation_share: float


def _fit_cell(
    cell: TrialDataset,
    gating: np.ndarray,
    cfg: PipelineConfig,
    seed: int,
    logger: MainLogger,
    label: str,
) -> ExpertFit:
    if cell.n == 0:
        raise EmptySubsetError(f"The {label} subset has no rows.")
    undefined = int(np.sum(~np.all(np.isfinite(gating), axis=1)))
    if undefined:
        raise PositivityViolationError(f"Mixing weights of the {label} subset are undefined on {undefined} rows.")
    fitter = em_fit_experts_2 if gating.shape[1] == 2 else em_fit_experts_3
    fit = fitter(cell, gating, cfg.outcome_kind, cfg.solver, seed, logger)
    if not fit.complier.trained:
        raise ComplierExpertUntrainedError(
            f"Complier expert of the {label} subset received posterior mass {fit.complier.posterior_mass:.3f}."
        )
    return fit


def fit_cace(
    data: TrialDataset,
    assumptions: AssumptionSet,
    cfg: Optional[PipelineConfig] = None,
    seed: int = 0,
    logger: Optional[MainLogger] = None,
) -> CaceFit:
    """
    Run the CACE pipeline for one assumption set.

    Without exclusion restriction the experts are fitted on the {Z=1,T=1} and {Z=0,T=0} cells
    with two experts (complier vs the other stratum of the cell). With it, they are fitted on the
    {T=1} and {T=0} arms with three experts (complier, always- or never-taker, defier), or two
    under monotonicity.

    Args:
        data (TrialDataset): Trial rows.
        assumptions (AssumptionSet): Which assumptions to impose.
        cfg (Optional[PipelineConfig]): Pipeline settings.
        seed (int): Root seed of the expert initialisations.
        logger (Optional[MainLogger]): Logger; the package logger by default.

    Returns:
        CaceFit: Point estimate and fitted components.

    Raises:
        EmptySubsetError: If a cell the pipeline needs has no rows.
        ComplierExpertUntrainedError: If a complier expert could not be fitted.
        PositivityViolationError: If the mixing weights are undefined.
    """
    cfg = cfg or PipelineConfig()
    logger = logger or default_logger()
    strata = StratumSet.for_assumptions(assumptions.monotonicity)

    gating = em_fit_gating(data, strata, cfg.solver, logger, seed=seed)
    eta_model = estimate_eta(data, cfg.eta_mode, cfg.solver)
    probs = compute_stratum_probabilities(gating, eta_model, data.X)

    if assumptions.exclusion_restriction:
        treated, control = data.t == 1, data.t == 0
        weights_treated = [probs.p_c1, probs.p_a1] + ([] if assumptions.monotonicity else [probs.p_d1])
        weights_control = [probs.p_c0, probs.p_n0] + ([] if assumptions.monotonicity else [probs.p_d0])
        labels = ("T=1", "T=0")
    else:
        treated, control = (data.z == 1) & (data.t == 1), (data.z == 0) & (data.t == 0)
        weights_treated = [probs.p_c11, 1 - probs.p_c11]
        weights_control = [probs.p_c00, 1 - probs.p_c00]
        labels = ("Z=1,T=1", "Z=0,T=0")

    treated_gating = np.column_stack(weights_treated)[treated]
    control_gating = np.column_stack(weights_control)[control]
    if assumptions.exclusion_restriction and not assumptions.monotonicity:
        # float rounding of the three shares
        treated_gating = treated_gating / treated_gating.sum(axis=1, keepdims=True)
        control_gating = control_gating / control_gating.sum(axis=1, keepdims=True)

    treated_fit = _fit_cell(data.subset(treated), treated_gating, cfg, child_seed(seed, 1), logger, labels[0])
    control_fit = _fit_cell(data.subset(control), control_gating, cfg, child_seed(seed, 0), logger, labels[1])

    delta_hat = plug_in_cace(
        probs.rho[:, COMPLIER], treated_fit.complier.predict(data.X), control_fit.complier.predict(data.X)
    )
    share = extrapolation_share(data.X[:, 1:], data.X[treated, 1:], data.X[control, 1:])
    logger.debug(f"{assumptions.name}: delta_hat={delta_hat:.6f}, extrapolation share={share:.4f}.")
    return CaceFit(delta_hat, assumptions, gating, eta_model, probs, treated_fit, control_fit, share)


class BootstrapSummary(BaseModel):
    """
    Percentile bootstrap of an estimator.

    Attributes:
        replicates (int): Requested number of resamples B.
        samples (List[float]): Estimates of the successful replicates, in replicate order.
        ci_low (float): Lower percentile bound.
        ci_high (float): Upper percentile bound.
        level (float): Confidence level.
        failures (int): Replicates dropped because the estimator failed.
    """

    replicates: int = Field(gt=0)
    samples: List[float]
    ci_low: float
    ci_high: float
    level: float = Field(gt=0, lt=1)
    failures: int = Field(ge=0)

    @model_validator(mode="after")
    def check_interval(self) -> "BootstrapSummary":
        if self.ci_low > self.ci_high:
            raise ValueError("ci_low must not exceed ci_high.")
        return self


class CaceEstimate(BaseModel):
    """
    Result of one estimator on one dataset.

    Attributes:
        estimator (str): Registered estimator name.
        exclusion_restriction (Optional[bool]): Assumption flag; `None` for IV baselines.
        monotonicity (Optional[bool]): Assumption flag; `None` for IV baselines.
        delta_hat (float): Point estimate.
        n (int): Rows used.
        extrapolation_share (Optional[float]): Diagnostic of the mixture-of-experts estimators.
        bootstrap (Optional[BootstrapSummary]): Bootstrap distribution and interval.
    """

    estimator: str
    exclusion_restriction: Optional[bool] = None
    monotonicity: Optional[bool] = None
    delta_hat: float
    n: int
    extrapolation_share: Optional[float] = None
    bootstrap: Optional[BootstrapSummary] = None


def _matching_config(cfg: PipelineConfig, eta_model: AllocationModel) -> MatchingConfig:
    n_groups = cfg.n_groups or (1 if eta_model.is_constant else 10)
    return MatchingConfig(n_groups=n_groups)


def estimate(
    name: str,
    data: TrialDataset,
    cfg: Optional[PipelineConfig] = None,
    seed: int = 0,
    logger: Optional[MainLogger] = None,
) -> CaceEstimate:
    """
    Point estimate of a registered estimator (`pi`, `pi_er`, `pi_mo`, `pi_mo_er`, `iv_wald`, `iv_matching`).

    Raises:
        DomainError: If the estimator name is unknown.
    """
    cfg = cfg or PipelineConfig()
    logger = logger or default_logger()
    if name in PI_ESTIMATORS:
        assumptions = AssumptionSet.from_name(name)
        fit = fit_cace(data, assumptions, cfg, seed, logger)
        return CaceEstimate(
            estimator=name,
            exclusion_restriction=assumptions.exclusion_restriction,
            monotonicity=assumptions.monotonicity,
            delta_hat=fit.delta_hat,
            n=data.n,
            extrapolation_share=fit.extrapolation_share,
        )
    if name == "iv_wald":
        return CaceEstimate(estimator=name, delta_hat=wald_estimator(data.z, data.t, data.y), n=data.n)
    if name == "iv_matching":
        eta_model = estimate_eta(data, cfg.eta_mode, cfg.solver)
        value = iv_matching_estimator(
            data.z, data.t, data.y, eta_model.predict(data.X), _matching_config(cfg, eta_model), logger
        )
        return CaceEstimate(estimator=name, delta_hat=value, n=data.n)
    raise DomainError(f"Unknown estimator '{name}'; choose from {list(ESTIMATOR_NAMES)}.")


def percentile_interval(samples: np.ndarray, level: float) -> Tuple[float, float]:
    """
    Order-statistic percentile interval.

    Uses the `floor((m+1)(1-level)/2)`-th and `ceil((m+1)(1+level)/2)`-th smallest of `m` samples,
    clamped to `[1, m]`; 999 samples at level 0.95 give the 25th and 975th.
    """
    ordered = np.sort(np.asarray(samples, dtype=float))
    m = ordered.shape[0]
    k_low = math.floor(round((m + 1) * (1 - level) / 2, 9))
    k_high = math.ceil(round((m + 1) * (1 + level) / 2, 9))
    k_low, k_high = min(max(k_low, 1), m), min(max(k_high, 1), m)
    return float(ordered[k_low - 1]), float(ordered[k_high - 1])


def bootstrap_estimator(
    name: str,
    data: TrialDataset,
    cfg: Optional[PipelineConfig] = None,
    replicates: int = 999,
    seed: int = 0,
    logger: Optional[MainLogger] = None,
) -> CaceEstimate:
    """
    Point estimate plus a nonparametric percentile bootstrap.

    Replicate `r` resamples rows with replacement using a generator seeded by `(seed, r)` and
    refits the whole estimator. Replicates run on `cfg.threads` worker threads and are merged by
    index, so the result does not depend on the thread count. Failed replicates are dropped and
    counted.

    Args:
        name (str): Registered estimator name.
        data (TrialDataset): Trial rows.
        cfg (Optional[PipelineConfig]): Pipeline settings, including `level`, `threads` and
            `max_failure_share`.
        replicates (int): Number of resamples B, at least 1.
        seed (int): Root seed.
        logger (Optional[MainLogger]): Logger; the package logger by default.

    Returns:
        CaceEstimate: Estimate with its `bootstrap` summary.

    Raises:
        TooManyFailuresError: If more than `cfg.max_failure_share` of the replicates fail.
    """
    cfg = cfg or PipelineConfig()
    logger = logger or default_logger()
    if replicates < 1:
        raise DomainError("At least one bootstrap replicate is required.")

    point = estimate(name, data, cfg, seed, logger)

    def run_replicate(r: int) -> Union[float, CacemixError]:
        rng = np.random.default_rng(np.random.SeedSequence([seed, r]))
        sample = data.take(rng.integers(0, data.n, size=data.n))
        try:
            return estimate(name, sample, cfg, child_seed(seed, r), logger).delta_hat
        except CacemixError as exc:
            return exc

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as executor:
            outcomes = list(executor.map(run_replicate, range(replicates)))
    else:
        outcomes = [run_replicate(r) for r in range(replicates)]

    samples = [value for value in outcomes if not isinstance(value, CacemixError)]
    failures: Dict[str, int] = {}
    for value in outcomes:
        if isinstance(value, CacemixError):
            failures[type(value).__name__] = failures.get(type(value).__name__, 0) + 1
    n_failed = replicates - len(samples)
    if n_failed:
        logger.warning(f"{name}: {n_failed} of {replicates} bootstrap replicates failed {failures}.")
    if not samples or n_failed > cfg.max_failure_share * replicates:
        raise TooManyFailuresError(f"{name}: {n_failed} of {replicates} bootstrap replicates failed.")

    ci_low, ci_high = percentile_interval(np.array(samples), cfg.level)
    summary = BootstrapSummary(
        replicates=replicates, samples=samples, ci_low=ci_low, ci_high=ci_high, level=cfg.level, failures=n_failed
    )
    return point.model_copy(update={"bootstrap": summary})


def bootstrap_cace(
    data: TrialDataset,
    assumptions: AssumptionSet,
    cfg: Optional[PipelineConfig] = None,
    replicates: int = 999,
    seed: int = 0,
    logger: Optional[MainLogger] = None,
) -> CaceEstimate:
    """Percentile bootstrap of the mixture-of-experts estimator selected by `assumptions`."""
    return bootstrap_estimator(assumptions.name, data, cfg, replicates, seed, logger)

