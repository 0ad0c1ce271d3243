"""
Conditional-outcome experts fitted by EM under known gating probabilities.

Inside a treatment/assignment cell the outcome is a mixture over the strata that can produce the
cell. The mixing weights are known from the gating step, so EM only has to fit the experts:
logistic experts for binary outcomes, linear-Gaussian experts for continuous ones.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from core.config import OutcomeKind, SolverConfig
from core.data import TrialDataset, check_binary
from core.errors import (
    DegenerateDataError,
    DomainError,
    EmptySubsetError,
    LearnerContractViolationError,
    NonFiniteError,
    SingularSystemError,
)
from core.glm_core import (
    PROB_FLOOR,
    clip_probabilities,
    expit,
    fit_weighted_least_squares,
    fit_weighted_logistic,
    gaussian_loglik,
)
from core.logger import MainLogger, default_logger


class WeightedLearner(Protocol):
    """Regressor/classifier with weighted fitting; binary learners predict probabilities."""

    def fit(self, X: np.ndarray, y: np.ndarray, sample_weight: np.ndarray) -> "WeightedLearner": ...

    def predict(self, X: np.ndarray) -> np.ndarray: ...


class GlmLearner:
    """
    Default `WeightedLearner`: weighted logistic regression (binary) or weighted least squares
    (continuous). Logistic fits warm-start from the current coefficients.
    """

    def __init__(self, kind: OutcomeKind, cfg: Optional[SolverConfig] = None, coef: Optional[np.ndarray] = None):
        self.kind = kind
        self.cfg = cfg or SolverConfig()
        self.coef_ = coef

    def fit(self, X: np.ndarray, y: np.ndarray, sample_weight: np.ndarray) -> "GlmLearner":
        if self.kind is OutcomeKind.BINARY:
            self.coef_ = fit_weighted_logistic(X, y, sample_weight, self.cfg, init=self.coef_).coefficients
        else:
            self.coef_ = fit_weighted_least_squares(X, y, sample_weight, self.cfg).coefficients
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        linear = np.asarray(X, dtype=float) @ self.coef_
        return expit(linear) if self.kind is OutcomeKind.BINARY else linear


@dataclass(frozen=True)
class ExpertModel:
    """
    A fitted expert `Q(x; zeta)`.

    Attributes:
        zeta (np.ndarray): Coefficients over the design columns.
        kind (OutcomeKind): Binary experts predict `expit(zeta'x)`, continuous ones `zeta'x`.
        sigma2 (float): Residual variance (continuous experts; 1.0 for binary ones).
        trained (bool): False when the expert never received enough posterior mass to be fitted.
        posterior_mass (float): Total posterior weight of the expert at the last M-step.
    """

    zeta: np.ndarray
    kind: OutcomeKind
    sigma2: float = 1.0
    trained: bool = True
    posterior_mass: float = float("nan")

    def predict(self, X: np.ndarray) -> np.ndarray:
        linear = np.asarray(X, dtype=float) @ self.zeta
        return expit(linear) if self.kind is OutcomeKind.BINARY else linear


def outcome_loglik(predictions: np.ndarray, y: np.ndarray, kind: OutcomeKind, sigma2: float = 1.0) -> np.ndarray:
    """Per-row log-likelihood of `y` under an expert with the given predictions."""
    if kind is OutcomeKind.BINARY:
        p = clip_probabilities(predictions)
        return y * np.log(p) + (1.0 - y) * np.log1p(-p)
    return gaussian_loglik(y, predictions, sigma2)


@dataclass
class ExpertState:
    """Predictions, variances and training flags of all experts at one EM iterate."""

    predictions: np.ndarray
    sigma2: np.ndarray
    trained: np.ndarray
    mass: np.ndarray = field(default_factory=lambda: np.array([]))


def expert_e_step(
    gating: np.ndarray, state: ExpertState, y: np.ndarray, kind: OutcomeKind
) -> Tuple[np.ndarray, float]:
    """
    E-step in log space: `h_s = g_s L_s / sum_j g_j L_j`.

    Returns the posterior matrix and the observed-data log-likelihood `sum_i ln sum_s g_is L_is`.
    Experts with zero prior on a row get exactly zero posterior on that row.
    """
    with np.errstate(divide="ignore"):
        log_prior = np.log(gating)
    log_lik = np.column_stack(
        [outcome_loglik(state.predictions[:, s], y, kind, state.sigma2[s]) for s in range(gating.shape[1])]
    )
    log_joint = np.where(gating > 0, log_prior + log_lik, -np.inf)
    evidence = logsumexp(log_joint, axis=1)
    return np.exp(log_joint - evidence[:, None]), float(np.sum(evidence))


def nonparametric_expert_step(
    learners: Sequence[WeightedLearner],
    posteriors: np.ndarray,
    subset: TrialDataset,
    kind: OutcomeKind,
    previous: ExpertState,
    cfg: Optional[SolverConfig] = None,
    dof: int = 0,
) -> ExpertState:
    """
    M-step of the expert EM against arbitrary weighted learners.

    Every expert with positive posterior mass is refitted with the posteriors as weights; an
    expert whose weights cannot identify its coefficients keeps its previous predictions. Experts
    with posterior mass below `cols + 1` are flagged untrained. For
    continuous outcomes the variance is `sum h r^2 / (n' - dof)` (`variance_denominator=paper`) or
    `sum h r^2 / sum h` (`posterior_mass`).

    Args:
        learners (Sequence[WeightedLearner]): One learner per expert.
        posteriors (np.ndarray): `(n', K)` posteriors from the E-step.
        subset (TrialDataset): The rows the experts are fitted on.
        kind (OutcomeKind): Outcome type.
        previous (ExpertState): The current iterate.
        cfg (Optional[SolverConfig]): Settings; only `variance_denominator` is read here.
        dof (int): Coefficients per expert subtracted from n' under the `paper` denominator.

    Returns:
        ExpertState: The next iterate.

    Raises:
        LearnerContractViolationError: If a learner returns predictions of the wrong shape, non-finite
            values, or binary predictions outside [0, 1].
        DegenerateDataError: If the `paper` variance denominator is not positive.
    """
    cfg = cfg or SolverConfig()
    X, y = subset.X, subset.y
    predictions = previous.predictions.copy()
    sigma2 = previous.sigma2.copy()
    mass = posteriors.sum(axis=0)
    trained = mass >= subset.cols + 1

    for s, learner in enumerate(learners):
        if not mass[s] > 0:
            continue
        try:
            learner.fit(X, y, posteriors[:, s])
        except (SingularSystemError, NonFiniteError):
            continue
        fitted = np.asarray(learner.predict(X), dtype=float)
        if fitted.shape != (subset.n,) or not np.all(np.isfinite(fitted)):
            raise LearnerContractViolationError(f"Expert learner {s} returned invalid predictions.")
        if kind is OutcomeKind.BINARY and np.any((fitted < 0) | (fitted > 1)):
            raise LearnerContractViolationError(f"Binary expert learner {s} returned values outside [0, 1].")
        predictions[:, s] = fitted

        if kind is OutcomeKind.CONTINUOUS:
            weighted_sse = float(np.sum(posteriors[:, s] * (y - fitted) ** 2))
            denominator = subset.n - dof if cfg.variance_denominator == "paper" else mass[s]
            if denominator <= 0:
                raise DegenerateDataError(f"Variance denominator {denominator} is not positive.")
            # perfect fits would otherwise give a zero variance
            sigma2[s] = max(weighted_sse / denominator, PROB_FLOOR)

    return ExpertState(predictions=predictions, sigma2=sigma2, trained=trained, mass=mass)


@dataclass(frozen=True)
class ExpertFit:
    """
    Result of an expert EM.

    Attributes:
        experts (Tuple[ExpertModel, ...]): Experts in gating-column order; index 0 is the complier.
        loglik_path (Tuple[float, ...]): Observed-data log-likelihood per iteration.
        converged (bool): Whether the stopping rule was met.
        iterations (int): EM iterations of the winning start.
        start (int): Index of the winning random start.
        posteriors (np.ndarray): Posteriors the final M-step was weighted with.
    """

    experts: Tuple[ExpertModel, ...]
    loglik_path: Tuple[float, ...]
    converged: bool
    iterations: int
    start: int
    posteriors: np.ndarray

    @property
    def complier(self) -> ExpertModel:
        return self.experts[0]

    @property
    def final_loglik(self) -> float:
        return self.loglik_path[-1]


@dataclass(frozen=True)
class LearnedExperts:
    """Result of a learner-driven expert EM; the learners are the fitted expert functions."""

    learners: Tuple[WeightedLearner, ...]
    kind: OutcomeKind
    sigma2: Tuple[float, ...]
    trained: Tuple[bool, ...]
    loglik_path: Tuple[float, ...]
    converged: bool
    iterations: int
    posteriors: np.ndarray

    def predict(self, X: np.ndarray, expert: int = 0) -> np.ndarray:
        return np.asarray(self.learners[expert].predict(X), dtype=float)


def _validate_inputs(subset: TrialDataset, gating: np.ndarray, n_experts: int, kind: OutcomeKind) -> np.ndarray:
    if subset.n == 0:
        raise EmptySubsetError("The expert subset has no rows.")
    if subset.n <= subset.cols:
        raise DegenerateDataError(f"{subset.n} rows cannot identify {subset.cols} coefficients per expert.")
    gating = np.asarray(gating, dtype=float)
    if gating.shape != (subset.n, n_experts):
        raise DomainError(f"Gating must have shape {(subset.n, n_experts)}, got {gating.shape}.")
    if np.any((gating < 0) | (gating > 1)) or np.max(np.abs(gating.sum(axis=1) - 1.0)) > 1e-8:
        raise DomainError("Gating rows must be probability vectors.")
    if kind is OutcomeKind.BINARY:
        check_binary(subset.y, "y")
    return gating


def _initial_state(
    subset: TrialDataset, n_experts: int, kind: OutcomeKind, cfg: SolverConfig, rng: np.random.Generator
) -> Tuple[List[np.ndarray], np.ndarray]:
    """
    Random start of the experts, in expert order.

    Binary experts draw `zeta ~ N(0, D)` with `D_jj = init_variance / var(X_j)` and unit variances.
    Continuous experts start around the pooled least-squares fit: each expert adds `N(0, D)` with
    `D_jj = init_variance * s2 / var(X_j)` and shifts its intercept by the pooled residual of a
    random row, each expert drawing from its own block of the sorted residuals (blocks assigned in
    random order). Every variance starts at the pooled residual variance `s2`. Shifting `y` by a
    constant therefore shifts every start by the same constant.
    """
    X = subset.X
    variances = X.var(axis=0)
    constant = ~(variances > 0)
    spread = cfg.init_variance / np.where(constant, 1.0, variances)
    if kind is OutcomeKind.BINARY:
        return [rng.normal(0.0, np.sqrt(spread)) for _ in range(n_experts)], np.ones(n_experts)

    pooled = fit_weighted_least_squares(X, subset.y, np.ones(subset.n), cfg).coefficients
    residuals = subset.y - X @ pooled
    s2 = max(float(np.mean(residuals**2)), PROB_FLOOR)
    order = np.argsort(residuals, kind="stable")
    blocks = np.array_split(order, n_experts)
    coefficients = []
    for block in (blocks[b] for b in rng.permutation(n_experts)):
        zeta = pooled + rng.normal(0.0, np.sqrt(spread * s2))
        if constant[0]:
            zeta[0] += residuals[rng.choice(block if block.size else order)]
        coefficients.append(zeta)
    return coefficients, np.full(n_experts, s2)


def _run_expert_em(
    subset: TrialDataset,
    gating: np.ndarray,
    kind: OutcomeKind,
    learners: Sequence[WeightedLearner],
    state: ExpertState,
    cfg: SolverConfig,
    dof: int,
    stop_on_posteriors: bool,
    logger: MainLogger,
):
    posteriors, loglik = expert_e_step(gating, state, subset.y, kind)
    path = [loglik]
    m_step_posteriors = posteriors
    monotone = kind is OutcomeKind.BINARY or cfg.variance_denominator == "posterior_mass"
    converged = False
    iterations = 0
    for iterations in range(1, cfg.em_max_iter + 1):
        m_step_posteriors = posteriors
        state = nonparametric_expert_step(learners, posteriors, subset, kind, state, cfg, dof)
        posteriors, loglik = expert_e_step(gating, state, subset.y, kind)

        gain = loglik - path[-1]
        if gain < -cfg.em_monotone_tol * max(1.0, abs(path[-1])):
            report = logger.warning if monotone else logger.debug
            report(f"Expert log-likelihood decreased by {-gain:.3e} at iteration {iterations}.")
        path.append(loglik)

        if stop_on_posteriors:
            done = np.max(np.abs(posteriors - m_step_posteriors)) < cfg.posterior_tol
        else:
            done = abs(gain) <= cfg.em_tol * max(1.0, abs(loglik))
        if done:
            converged = True
            break
    return state, m_step_posteriors, path, converged, iterations


def _fit_parametric(
    subset: TrialDataset,
    gating: np.ndarray,
    kind: OutcomeKind,
    cfg: Optional[SolverConfig],
    seed: int,
    logger: Optional[MainLogger],
) -> ExpertFit:
    cfg = cfg or SolverConfig()
    logger = logger or default_logger()
    n_experts = np.asarray(gating).shape[1] if np.ndim(gating) == 2 else 0
    gating = _validate_inputs(subset, gating, n_experts, kind)

    best: Optional[ExpertFit] = None
    for start, child in enumerate(np.random.SeedSequence(seed).spawn(cfg.n_starts)):
        coefficients, sigma2 = _initial_state(subset, n_experts, kind, cfg, np.random.default_rng(child))
        learners = [GlmLearner(kind, cfg, coef) for coef in coefficients]
        state = ExpertState(
            predictions=np.column_stack([learner.predict(subset.X) for learner in learners]),
            sigma2=sigma2,
            trained=np.ones(n_experts, dtype=bool),
        )
        state, posteriors, path, converged, iterations = _run_expert_em(
            subset, gating, kind, learners, state, cfg, subset.cols, False, logger
        )
        logger.debug(f"Expert EM start {start}: log-likelihood {path[-1]:.6f} after {iterations} iterations.")
        if best is not None and path[-1] <= best.final_loglik:
            continue

        experts = tuple(
            ExpertModel(
                zeta=learner.coef_,
                kind=kind,
                sigma2=float(state.sigma2[s]) if kind is OutcomeKind.CONTINUOUS else 1.0,
                trained=bool(state.trained[s]),
                posterior_mass=float(state.mass[s]),
            )
            for s, learner in enumerate(learners)
        )
        best = ExpertFit(experts, tuple(path), converged, iterations, start, posteriors)

    for s, expert in enumerate(best.experts):
        if not expert.trained:
            logger.warning(f"Expert {s} received posterior mass {expert.posterior_mass:.3f} and is untrained.")
    if not best.converged:
        logger.warning(f"Expert EM stopped at the iteration cap ({cfg.em_max_iter}) without converging.")
    return best


def em_fit_experts_2(
    subset: TrialDataset,
    gating: np.ndarray,
    kind: OutcomeKind = OutcomeKind.BINARY,
    cfg: Optional[SolverConfig] = None,
    seed: int = 0,
    logger: Optional[MainLogger] = None,
) -> ExpertFit:
    """
    Fit a complier and a non-complier expert on one (Z, T) cell.

    Args:
        subset (TrialDataset): Rows of the cell, e.g. {Z=1, T=1}.
        gating (np.ndarray): `(n', 2)` known priors `(P_c, 1 - P_c)`.
        kind (OutcomeKind): Outcome type.
        cfg (Optional[SolverConfig]): EM settings; `n_starts` random starts are run.
        seed (int): Root seed of the random starts.
        logger (Optional[MainLogger]): Logger; the package logger by default.

    Returns:
        ExpertFit: Best-likelihood fit; `experts[0]` is the complier expert.

    Raises:
        EmptySubsetError: If the subset has no rows.
        DegenerateDataError: If the subset has no more rows than design columns.
        SingularSystemError: Propagated from the M-step.

    Example:
        >>> fit = em_fit_experts_2(cell, np.column_stack([p_c11, 1 - p_c11]), OutcomeKind.BINARY, seed=7)
        >>> q_c11 = fit.complier.predict(data.X)
    """
    return _fit_parametric(subset, gating, kind, cfg, seed, logger)


def em_fit_experts_3(
    subset: TrialDataset,
    gating: np.ndarray,
    kind: OutcomeKind = OutcomeKind.BINARY,
    cfg: Optional[SolverConfig] = None,
    seed: int = 0,
    logger: Optional[MainLogger] = None,
) -> ExpertFit:
    """
    Fit complier, always-or-never-taker and defier experts on one treatment arm {T = m}.

    Same contract as `em_fit_experts_2` with a `(n', 3)` gating matrix. A zero gating column
    leaves its expert inert and untrained.
    """
    return _fit_parametric(subset, gating, kind, cfg, seed, logger)


def em_fit_experts_nonparametric(
    subset: TrialDataset,
    gating: np.ndarray,
    kind: OutcomeKind = OutcomeKind.BINARY,
    learners: Optional[Sequence[WeightedLearner]] = None,
    cfg: Optional[SolverConfig] = None,
    seed: int = 0,
    logger: Optional[MainLogger] = None,
) -> LearnedExperts:
    """
    Learner-driven expert EM with 2 or 3 experts.

    Starts from random predictions (uniform on [0, 1] for binary outcomes, standard normal for
    continuous ones, unit variances) and stops once the posteriors move less than
    `cfg.posterior_tol`. The variance denominator under `paper` is n'.
    """
    cfg = cfg or SolverConfig()
    logger = logger or default_logger()
    n_experts = np.asarray(gating).shape[1] if np.ndim(gating) == 2 else 0
    gating = _validate_inputs(subset, gating, n_experts, kind)
    learners = list(learners) if learners is not None else [GlmLearner(kind, cfg) for _ in range(n_experts)]
    if len(learners) != n_experts:
        raise DomainError(f"Expected {n_experts} learners, got {len(learners)}.")

    rng = np.random.default_rng(seed)
    if kind is OutcomeKind.BINARY:
        predictions = rng.uniform(0.0, 1.0, size=(subset.n, n_experts))
    else:
        predictions = rng.normal(0.0, 1.0, size=(subset.n, n_experts))
    state = ExpertState(predictions=predictions, sigma2=np.ones(n_experts), trained=np.ones(n_experts, dtype=bool))

    state, posteriors, path, converged, iterations = _run_expert_em(
        subset, gating, kind, learners, state, cfg, 0, True, logger
    )
    if not converged:
        logger.warning(f"Learner-driven expert EM stopped at the iteration cap ({cfg.em_max_iter}).")
    return LearnedExperts(
        learners=tuple(learners),
        kind=kind,
        sigma2=tuple(float(v) for v in state.sigma2),
        trained=tuple(bool(v) for v in state.trained),
        loglik_path=tuple(path),
        converged=converged,
        iterations=iterations,
        posteriors=posteriors,
    )
