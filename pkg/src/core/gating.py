"""
Stratum-probability (gating) models fitted by EM over the known treatment experts.

Each principal stratum implies a deterministic treatment given the assignment (complier: T = Z,
always-taker: T = 1, never-taker: T = 0, defier: T = 1 - Z), so the expert likelihoods of (Z, T)
are known 0/1 indicators and only the gating network has to be learned.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Protocol, Tuple

import numpy as np

from core.config import SolverConfig
from core.data import TrialDataset, check_binary
from core.errors import DegenerateDataError, EmptySubsetError, LearnerContractViolationError
from core.glm_core import PROB_FLOOR, fit_weighted_multinomial, log_softmax, softmax
from core.logger import MainLogger, default_logger

COMPLIER, ALWAYS_TAKER, NEVER_TAKER, DEFIER = range(4)
STRATUM_LABELS: Tuple[str, ...] = ("complier", "always_taker", "never_taker", "defier")


class StratumSet(str, Enum):
    """Principal strata in the model; `MONO3` drops defiers (monotonicity)."""

    FULL4 = "full4"
    MONO3 = "mono3"

    @property
    def size(self) -> int:
        return 4 if self is StratumSet.FULL4 else 3

    @property
    def labels(self) -> Tuple[str, ...]:
        return STRATUM_LABELS[: self.size]

    @classmethod
    def for_assumptions(cls, monotonicity: bool) -> "StratumSet":
        return cls.MONO3 if monotonicity else cls.FULL4


def compliance_likelihoods(z: np.ndarray, t: np.ndarray, strata: StratumSet = StratumSet.FULL4) -> np.ndarray:
    """
    Per-row likelihood of the observed treatment under each stratum.

    Args:
        z (np.ndarray): Binary assignment.
        t (np.ndarray): Binary treatment taken.
        strata (StratumSet): `FULL4` returns columns (c, a, n, d), `MONO3` returns (c, a, n).

    Returns:
        np.ndarray: `(n, K)` matrix of 0/1 values.

    Raises:
        NonBinaryError: If `z` or `t` holds values other than 0/1.

    Example:
        >>> compliance_likelihoods(np.array([1]), np.array([1]))
        array([[1., 1., 0., 0.]])
    """
    z = np.asarray(z, dtype=float)
    t = np.asarray(t, dtype=float)
    check_binary(z, "z")
    check_binary(t, "t")
    likelihoods = np.column_stack(
        [
            z * t + (1 - z) * (1 - t),
            t,
            1 - t,
            z * (1 - t) + (1 - z) * t,
        ]
    )
    return likelihoods[:, : strata.size]


def expert_posteriors(priors: np.ndarray, likelihoods: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    E-step over known 0/1 expert likelihoods.

    Returns the posterior matrix `h = g * L / sum(g * L)` and the observed-data log-likelihood
    `sum_i ln sum_s g_is L_is`. Rows whose prior mass on compatible strata underflows to zero fall
    back to the normalized likelihood row, so zero entries of `L` always stay exactly zero.
    """
    joint = priors * likelihoods
    evidence = joint.sum(axis=1)
    empty = evidence <= 0
    if np.any(empty):
        joint[empty] = likelihoods[empty]
        evidence = np.where(empty, likelihoods.sum(axis=1), evidence)
    loglik = float(np.sum(np.log(np.maximum(np.where(empty, 0.0, evidence), PROB_FLOOR))))
    return joint / evidence[:, None], loglik


def _reference_logits(X: np.ndarray, delta: np.ndarray) -> np.ndarray:
    return np.column_stack([X @ delta.T, np.zeros(X.shape[0])])


def _reference_softmax(X: np.ndarray, delta: np.ndarray) -> np.ndarray:
    return softmax(_reference_logits(X, delta), axis=1)


def _pad_defier(probabilities: np.ndarray, fill: float = 0.0) -> np.ndarray:
    return np.column_stack([probabilities, np.full(probabilities.shape[0], fill)])


@dataclass(frozen=True)
class GatingModel:
    """
    Softmax gating network `rho_k(x) = exp(delta_k'x) / sum_s exp(delta_s'x)`.

    The last stratum of `strata` is the reference category with coefficients fixed at zero.

    Attributes:
        strata (StratumSet): Strata in the model.
        delta (np.ndarray): `(K-1, cols)` coefficients of the non-reference strata.
        design_columns (Tuple[str, ...]): Names of the design columns.
        loglik_path (Tuple[float, ...]): Observed-data log-likelihood per EM iteration.
        converged (bool): Whether the EM stopping rule was met.
        iterations (int): EM iterations performed.
        posterior_mass (Tuple[float, ...]): Total posterior mass per stratum at the last E-step.
    """

    strata: StratumSet
    delta: np.ndarray
    design_columns: Tuple[str, ...] = ()
    loglik_path: Tuple[float, ...] = ()
    converged: bool = True
    iterations: int = 0
    posterior_mass: Tuple[float, ...] = field(default=())

    @classmethod
    def uniform(cls, strata: StratumSet, cols: int, design_columns: Tuple[str, ...] = ()) -> "GatingModel":
        """Gating with equal probability on every stratum."""
        return cls(strata=strata, delta=np.zeros((strata.size - 1, cols)), design_columns=design_columns)

    def predict(self, X: np.ndarray, padded: bool = False) -> np.ndarray:
        """
        Stratum probabilities per row.

        Args:
            X (np.ndarray): Design matrix with the same columns the model was fitted on.
            padded (bool): Always return four columns (c, a, n, d); under `MONO3` the defier
                column is exactly zero.
        """
        probabilities = _reference_softmax(np.asarray(X, dtype=float), self.delta)
        if padded and self.strata is StratumSet.MONO3:
            return _pad_defier(probabilities)
        return probabilities

    def log_predict(self, X: np.ndarray, padded: bool = False) -> np.ndarray:
        """
        Log stratum probabilities per row, computed from the logits.

        Stays finite where `predict` underflows to zero (large covariate values); the padded defier
        column under `MONO3` is `-inf`.
        """
        log_probabilities = log_softmax(_reference_logits(np.asarray(X, dtype=float), self.delta), axis=1)
        if padded and self.strata is StratumSet.MONO3:
            return _pad_defier(log_probabilities, fill=-np.inf)
        return log_probabilities

    @property
    def final_loglik(self) -> float:
        return self.loglik_path[-1] if self.loglik_path else float("nan")


def posterior_strata(model, z: np.ndarray, t: np.ndarray, X: np.ndarray) -> np.ndarray:
    """
    Posterior probability of each stratum given (X, Z, T).

    Args:
        model: A fitted `GatingModel` or `LearnedGating`.
        z, t (np.ndarray): Binary assignment and treatment taken.
        X (np.ndarray): Design matrix.

    Returns:
        np.ndarray: `(n, K)` rows summing to one; zero wherever the stratum cannot produce (Z, T).
    """
    likelihoods = compliance_likelihoods(z, t, model.strata)
    posteriors, _ = expert_posteriors(model.predict(X), likelihoods)
    return posteriors


def _check_stratum_mass(
    posteriors: np.ndarray, strata: StratumSet, cols: int, cfg: SolverConfig, logger: MainLogger
) -> Tuple[float, ...]:
    mass = posteriors.sum(axis=0)
    starved = [label for label, value in zip(strata.labels, mass) if value < 10 * cols]
    if starved:
        message = f"Strata {starved} received posterior mass below {10 * cols} (masses {np.round(mass, 3).tolist()})."
        if cfg.strict:
            raise DegenerateDataError(message)
        logger.warning(message)
    return tuple(float(value) for value in mass)


def _run_gating_em(
    X: np.ndarray,
    likelihoods: np.ndarray,
    priors: np.ndarray,
    cfg: SolverConfig,
    logger: MainLogger,
) -> Tuple[np.ndarray, np.ndarray, list, bool, int]:
    posteriors, loglik = expert_posteriors(priors, likelihoods)
    path = [loglik]
    delta: Optional[np.ndarray] = None
    converged = False
    iterations = 0
    for iterations in range(1, cfg.em_max_iter + 1):
        delta = fit_weighted_multinomial(X, posteriors, cfg, init=delta).coefficients
        posteriors, loglik = expert_posteriors(_reference_softmax(X, delta), likelihoods)

        gain = loglik - path[-1]
        if gain < -cfg.em_monotone_tol * max(1.0, abs(path[-1])):
            logger.warning(f"Gating log-likelihood decreased by {-gain:.3e} at iteration {iterations}.")
        path.append(loglik)
        if abs(gain) <= cfg.em_tol * max(1.0, abs(loglik)):
            converged = True
            break
    return delta, posteriors, path, converged, iterations


def em_fit_gating(
    data: TrialDataset,
    strata: StratumSet = StratumSet.FULL4,
    cfg: Optional[SolverConfig] = None,
    logger: Optional[MainLogger] = None,
    seed: int = 0,
) -> GatingModel:
    """
    Fit the gating network by EM, starting from uniform stratum priors.

    The M-step is a multinomial logistic regression of the posteriors on the design, warm-started
    from the previous iteration. With `cfg.restarts > 0`, additional runs start from random
    Dirichlet priors and the run with the highest final log-likelihood is kept.

    Args:
        data (TrialDataset): Trial rows; the design must include the intercept.
        strata (StratumSet): `FULL4` or `MONO3` (monotonicity).
        cfg (Optional[SolverConfig]): Solver and EM settings.
        logger (Optional[MainLogger]): Logger; the package logger by default.
        seed (int): Seed of the restart priors.

    Returns:
        GatingModel: The fitted gating network.

    Raises:
        EmptySubsetError: If the data has no rows.
        DegenerateDataError: Under `cfg.strict`, if a stratum's posterior mass is below 10 x cols.
        SingularSystemError: Propagated from the M-step.
    """
    cfg = cfg or SolverConfig()
    logger = logger or default_logger()
    if data.n == 0:
        raise EmptySubsetError("Cannot fit the gating network on an empty dataset.")

    likelihoods = compliance_likelihoods(data.z, data.t, strata)
    starts = [np.full((data.n, strata.size), 1.0 / strata.size)]
    rng = np.random.default_rng(seed)
    starts.extend(rng.dirichlet(np.ones(strata.size), size=data.n) for _ in range(cfg.restarts))

    best = None
    for start, priors in enumerate(starts):
        run = _run_gating_em(data.X, likelihoods, priors, cfg, logger)
        logger.debug(f"Gating EM start {start}: log-likelihood {run[2][-1]:.6f} after {run[4]} iterations.")
        if best is None or run[2][-1] > best[2][-1]:
            best = run

    delta, posteriors, path, converged, iterations = best
    if not converged:
        logger.warning(f"Gating EM stopped at the iteration cap ({cfg.em_max_iter}) without converging.")
    mass = _check_stratum_mass(posteriors, strata, data.cols, cfg, logger)
    return GatingModel(
        strata=strata,
        delta=delta,
        design_columns=data.covariate_names,
        loglik_path=tuple(path),
        converged=converged,
        iterations=iterations,
        posterior_mass=mass,
    )


class MulticlassLearner(Protocol):
    """Classifier fitted on soft targets; `predict_proba` rows must sum to one."""

    def fit(self, X: np.ndarray, targets: np.ndarray) -> "MulticlassLearner": ...

    def predict_proba(self, X: np.ndarray) -> np.ndarray: ...


class MultinomialLearner:
    """
    Default `MulticlassLearner`: the reference-coded multinomial regression of `glm_core`.

    Consecutive `fit` calls warm-start from the previous coefficients, matching the M-step of
    `em_fit_gating` iterate for iterate.
    """

    def __init__(self, cfg: Optional[SolverConfig] = None) -> None:
        self.cfg = cfg or SolverConfig()
        self.coef_: Optional[np.ndarray] = None

    def fit(self, X: np.ndarray, targets: np.ndarray) -> "MultinomialLearner":
        self.coef_ = fit_weighted_multinomial(X, targets, self.cfg, init=self.coef_).coefficients
        return self

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _reference_softmax(np.asarray(X, dtype=float), self.coef_)


def nonparametric_gating_step(learner: MulticlassLearner, posteriors: np.ndarray, X: np.ndarray) -> np.ndarray:
    """
    M-step of the learner-driven gating EM: fit the learner to the posteriors and predict new priors.

    Raises:
        LearnerContractViolationError: If predictions have the wrong shape, negative entries, or
            rows that do not sum to one within 1e-6.
    """
    learner.fit(X, posteriors)
    priors = np.asarray(learner.predict_proba(X), dtype=float)
    if priors.shape != posteriors.shape:
        raise LearnerContractViolationError(f"Learner returned shape {priors.shape}, expected {posteriors.shape}.")
    if np.any(priors < 0) or np.max(np.abs(priors.sum(axis=1) - 1.0)) > 1e-6:
        raise LearnerContractViolationError("Learner probabilities must be non-negative rows summing to one.")
    return priors


@dataclass(frozen=True)
class LearnedGating:
    """
    Gating network backed by an arbitrary `MulticlassLearner`.

    Attributes:
        strata (StratumSet): Strata in the model.
        learner (MulticlassLearner): The fitted learner, used as the prior function.
        loglik_path (Tuple[float, ...]): Observed-data log-likelihood per iteration (reported only).
        converged (bool): Whether the posterior-change rule was met.
        iterations (int): Iterations performed.
    """

    strata: StratumSet
    learner: MulticlassLearner
    loglik_path: Tuple[float, ...] = ()
    converged: bool = True
    iterations: int = 0

    def predict(self, X: np.ndarray, padded: bool = False) -> np.ndarray:
        probabilities = np.asarray(self.learner.predict_proba(X), dtype=float)
        if padded and self.strata is StratumSet.MONO3:
            return _pad_defier(probabilities)
        return probabilities

    def log_predict(self, X: np.ndarray, padded: bool = False) -> np.ndarray:
        """Log of `predict`; zero probabilities map to `-inf`."""
        with np.errstate(divide="ignore"):
            return np.log(self.predict(X, padded=padded))


def em_fit_gating_nonparametric(
    data: TrialDataset,
    strata: StratumSet = StratumSet.FULL4,
    learner: Optional[MulticlassLearner] = None,
    cfg: Optional[SolverConfig] = None,
    logger: Optional[MainLogger] = None,
) -> LearnedGating:
    """
    Learner-driven gating EM from uniform priors.

    Stops when the max-abs change of the posteriors falls below `cfg.posterior_tol`; no likelihood
    is assumed to exist for an arbitrary learner.
    """
    cfg = cfg or SolverConfig()
    logger = logger or default_logger()
    learner = learner or MultinomialLearner(cfg)
    if data.n == 0:
        raise EmptySubsetError("Cannot fit the gating network on an empty dataset.")

    likelihoods = compliance_likelihoods(data.z, data.t, strata)
    posteriors, loglik = expert_posteriors(np.full((data.n, strata.size), 1.0 / strata.size), likelihoods)
    path = [loglik]
    converged = False
    iterations = 0
    for iterations in range(1, cfg.em_max_iter + 1):
        priors = nonparametric_gating_step(learner, posteriors, data.X)
        updated, loglik = expert_posteriors(priors, likelihoods)
        change = float(np.max(np.abs(updated - posteriors)))
        posteriors = updated
        path.append(loglik)
        if change < cfg.posterior_tol:
            converged = True
            break

    if not converged:
        logger.warning(f"Learner-driven gating EM stopped at the iteration cap ({cfg.em_max_iter}).")
    _check_stratum_mass(posteriors, strata, data.cols, cfg, logger)
    return LearnedGating(
        strata=strata, learner=learner, loglik_path=tuple(path), converged=converged, iterations=iterations
    )
