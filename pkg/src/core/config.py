from enum import Enum
from typing import Annotated, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


class OutcomeKind(str, Enum):
    """Type of the observed outcome; selects Bernoulli or Gaussian experts."""

    BINARY = "binary"
    CONTINUOUS = "continuous"


class Specification(str, Enum):
    """Which covariates the analyst gets to see in a simulated dataset."""

    WELL = "well"
    MISSPECIFIED = "mis"


ESTIMATOR_NAMES: Tuple[str, ...] = ("pi", "pi_er", "pi_mo", "pi_mo_er", "iv_matching", "iv_wald")


class SolverConfig(BaseModel):
    """
    Numerical settings shared by the GLM solvers and every EM loop.

    Attributes:
        tol (float): Relative objective change below which a Newton/IRLS solve stops.
        max_iter (int): Newton/IRLS iteration cap.
        max_halvings (int): Step-halving attempts before a Newton step is abandoned.
        ridge_scale (float): Ridge added as `ridge_scale * trace / cols` when the information
            matrix is numerically singular.
        cond_limit (float): Condition number above which the ridge retry kicks in.
        em_tol (float): Relative log-likelihood change below which an EM loop stops.
        em_max_iter (int): EM iteration cap.
        em_monotone_tol (float): Allowed log-likelihood decrease before a warning is logged.
        posterior_tol (float): Max-abs posterior change stopping learner-driven EM loops.
        strict (bool): Turn degenerate-stratum warnings into errors.
        restarts (int): Extra randomly initialised gating EM runs.
        n_starts (int): Random initialisations of every expert EM; the best likelihood wins.
        init_variance (float): Variance of the random expert initialisation, per standardized column.
        variance_denominator (str): `paper` uses 1/(n'-d) (parametric) or 1/n' (learner-driven),
            `posterior_mass` uses the posterior mass of the expert.

    Example:
        >>> cfg = SolverConfig(em_max_iter=50, n_starts=1)
        >>> cfg.tol
        1e-08
    """

    model_config = ConfigDict(frozen=True)

    tol: Annotated[float, Field(ge=0)] = 1e-8
    max_iter: Annotated[int, Field(gt=0)] = 100
    max_halvings: Annotated[int, Field(ge=0)] = 20
    ridge_scale: Annotated[float, Field(gt=0)] = 1e-8
    cond_limit: Annotated[float, Field(gt=1)] = 1e12
    em_tol: Annotated[float, Field(ge=0)] = 1e-8
    em_max_iter: Annotated[int, Field(gt=0)] = 500
    em_monotone_tol: Annotated[float, Field(ge=0)] = 1e-10
    posterior_tol: Annotated[float, Field(gt=0)] = 1e-6
    strict: bool = False
    restarts: Annotated[int, Field(ge=0)] = 0
    n_starts: Annotated[int, Field(gt=0)] = 5
    init_variance: Annotated[float, Field(gt=0)] = 0.01
    variance_denominator: Literal["paper", "posterior_mass"] = "paper"


class PipelineConfig(BaseModel):
    """
    Settings of a full CACE pipeline run (gating, allocation model, experts, bootstrap).

    Attributes:
        solver (SolverConfig): Numerical settings forwarded to every fit.
        outcome_kind (OutcomeKind): Declared type of the outcome.
        eta_mode (str): `constant_mle` (sample mean of Z) or `logistic` (regression of Z on X).
        level (float): Confidence level of bootstrap intervals.
        max_failure_share (float): Share of failed bootstrap replicates tolerated.
        threads (int): Worker threads for bootstrap replicates.
        n_groups (Optional[int]): Matching groups for the IV matching baseline; `None` picks
            one group when the allocation model is constant and ten otherwise.
    """

    model_config = ConfigDict(frozen=True)

    solver: SolverConfig = Field(default_factory=SolverConfig)
    outcome_kind: OutcomeKind = OutcomeKind.BINARY
    eta_mode: Literal["constant_mle", "logistic"] = "constant_mle"
    level: Annotated[float, Field(gt=0, lt=1)] = 0.95
    max_failure_share: Annotated[float, Field(ge=0, le=1)] = 0.10
    threads: Annotated[int, Field(gt=0)] = 1
    n_groups: Optional[Annotated[int, Field(gt=0)]] = None


class MatchingConfig(BaseModel):
    """
    Grouping used by the IV matching estimator.

    Attributes:
        n_groups (int): Number of quantile bins of the allocation probability.
        min_group_size (int): Rows required in each assignment arm of a retained group.
    """

    model_config = ConfigDict(frozen=True)

    n_groups: Annotated[int, Field(ge=1)] = 1
    min_group_size: Annotated[int, Field(ge=1)] = 1


class StudyConfig(BaseModel):
    """
    Monte-Carlo study grid: scenarios x sample sizes x estimators, replicated.

    Attributes:
        scenarios (Tuple[int, ...]): Scenario numbers in 1..4.
        specification (Specification): Covariate view handed to the estimators.
        ns (Tuple[int, ...]): Sample sizes drawn from the target population.
        replicates (int): Samples per (scenario, n) cell.
        estimators (Tuple[str, ...]): Estimator names, see `ESTIMATOR_NAMES`.
        population_size (int): Size of the simulated target population.
        seed (int): Seed of parameter draws and every replicate stream.
        threads (int): Worker threads for replicate cells.
        pipeline (PipelineConfig): Settings forwarded to each estimator.
    """

    model_config = ConfigDict(frozen=True)

    scenarios: Tuple[Annotated[int, Field(ge=1, le=4)], ...] = (1, 2, 3, 4)
    specification: Specification = Specification.MISSPECIFIED
    ns: Tuple[Annotated[int, Field(gt=0)], ...] = (2000, 5000, 10000)
    replicates: Annotated[int, Field(gt=0)] = 200
    estimators: Tuple[str, ...] = ESTIMATOR_NAMES
    population_size: Annotated[int, Field(gt=0)] = 1_000_000
    seed: int = 0
    threads: Annotated[int, Field(gt=0)] = 1
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)

    @model_validator(mode="after")
    def check_grid(self) -> "StudyConfig":
        """
        Validate the study grid once all fields are parsed.

        Raises:
            ValueError: If an estimator name is unknown, a grid axis is empty, or a sample size
                exceeds the population size (replicates are drawn without replacement).
        """
        unknown = [name for name in self.estimators if name not in ESTIMATOR_NAMES]
        if unknown:
            raise ValueError(f"Unknown estimators {unknown}; choose from {list(ESTIMATOR_NAMES)}.")
        if not self.scenarios or not self.ns or not self.estimators:
            raise ValueError("Scenarios, sample sizes and estimators must all be non-empty.")
        if max(self.ns) > self.population_size:
            raise ValueError(f"Sample size {max(self.ns)} exceeds the population size {self.population_size}.")
        return self
