"""
Synthetic randomized trials with non-compliance and full counterfactual ground truth.

Covariates are 7 binary indicators and 7 log-normal variables built from a correlated Gaussian
vector. Strata follow a softmax in the covariates, assignment is a fair coin and every elementary
potential outcome `Y^{s=k, z=l, t=m}` is Bernoulli with a logistic mean. Four scenarios cross the
exclusion restriction (ER) with monotonicity (MO).
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import linalg

from core.config import Specification
from core.data import INTERCEPT, TrialDataset
from core.gating import ALWAYS_TAKER, COMPLIER, DEFIER, NEVER_TAKER
from core.glm_core import expit, softmax

N_COVARIATES = 14
N_BINARY = 7
COVARIATE_NAMES: Tuple[str, ...] = tuple(f"x{j}" for j in range(1, N_COVARIATES + 1))
HIDDEN_WHEN_MISSPECIFIED: Tuple[str, ...] = ("x7", "x14")


@dataclass(frozen=True)
class Scenario:
    """
    Simulation scenario 1..4.

    1: ER and MO both violated; 2: ER holds; 3: MO holds; 4: both hold.
    """

    number: int

    def __post_init__(self) -> None:
        if self.number not in (1, 2, 3, 4):
            raise ValueError(f"Scenario must be 1, 2, 3 or 4, got {self.number}.")

    @property
    def exclusion_restriction(self) -> bool:
        return self.number in (2, 4)

    @property
    def monotonicity(self) -> bool:
        return self.number in (3, 4)


def random_orthogonal(rng: np.random.Generator, size: int) -> np.ndarray:
    """Orthogonal matrix from the QR factorization of a Gaussian matrix, with a positive R diagonal."""
    q, r = linalg.qr(rng.standard_normal((size, size)))
    return q * np.sign(np.diag(r))


@dataclass(frozen=True)
class SimulationParams:
    """
    Parameters of one simulated population.

    Attributes:
        seed (int): Seed the parameters were drawn from.
        scenario (Scenario): Assumption scenario.
        specification (Specification): Covariate view given to the analyst.
        eigenvalues (np.ndarray): `1 + 0.2 (i - 1)` for i = 1..14.
        orthogonal (np.ndarray): Random 14 x 14 orthogonal matrix.
        delta (np.ndarray): `(4, 15)` stratum coefficients in stratum order c, a, n, d.
        beta (np.ndarray): `(4, 2, 2, 15)` outcome coefficients indexed by stratum, z, t.
    """

    seed: int
    scenario: Scenario
    specification: Specification
    eigenvalues: np.ndarray
    orthogonal: np.ndarray
    delta: np.ndarray
    beta: np.ndarray

    @property
    def covariance(self) -> np.ndarray:
        return self.orthogonal @ np.diag(self.eigenvalues) @ self.orthogonal.T

    def stratum_logits(self, X: np.ndarray) -> np.ndarray:
        """Stratum logits; the defier logit is `-inf` under monotonicity."""
        logits = np.asarray(X, dtype=float) @ self.delta.T
        if self.scenario.monotonicity:
            logits[:, DEFIER] = -np.inf
        return logits

    def rho(self, X: np.ndarray) -> np.ndarray:
        """True stratum probabilities (c, a, n, d)."""
        return softmax(self.stratum_logits(X), axis=1)


def build_params(
    seed: int, scenario: int, specification: Specification = Specification.MISSPECIFIED
) -> SimulationParams:
    """
    Draw the population parameters.

    The random stream does not depend on the scenario, so the four scenarios of one seed share
    covariates, stratum coefficients and outcome coefficients.

    Example:
        >>> params = build_params(3, 4)
        >>> params.eigenvalues[[0, -1]]
        array([1. , 3.6])
    """
    rng = np.random.default_rng(seed)
    orthogonal = random_orthogonal(rng, N_COVARIATES)
    delta = rng.uniform(-1.0, 1.0, size=(4, N_COVARIATES + 1))
    beta = rng.uniform(-1.0, 1.0, size=(4, 2, 2, N_COVARIATES + 1))
    return SimulationParams(
        seed=seed,
        scenario=Scenario(scenario),
        specification=Specification(specification),
        eigenvalues=1.0 + 0.2 * np.arange(N_COVARIATES),
        orthogonal=orthogonal,
        delta=delta,
        beta=beta,
    )


@dataclass(frozen=True)
class PopulationWithTruth:
    """
    A simulated population with its latent strata and all potential outcomes.

    Attributes:
        X (np.ndarray): `(n, 15)` design, intercept first.
        strata (np.ndarray): Stratum index per row (0 c, 1 a, 2 n, 3 d).
        rho (np.ndarray): True stratum probabilities per row.
        z (np.ndarray): Assignment.
        t (np.ndarray): Treatment taken, `S_c Z + S_a + S_d (1 - Z)`.
        outcomes (np.ndarray): `(n, 4, 2, 2)` elementary potential outcomes indexed by stratum, z, t.
        y1 (np.ndarray): Potential outcome under treatment.
        y0 (np.ndarray): Potential outcome under control.
        y (np.ndarray): Observed outcome `T y1 + (1 - T) y0`.
        true_delta (float): Complier average causal effect of the population the rows came from.
    """

    X: np.ndarray
    strata: np.ndarray
    rho: np.ndarray
    z: np.ndarray
    t: np.ndarray
    outcomes: np.ndarray
    y1: np.ndarray
    y0: np.ndarray
    y: np.ndarray
    true_delta: float
    covariate_names: Tuple[str, ...] = field(default=(INTERCEPT, *COVARIATE_NAMES))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def take(self, index: np.ndarray) -> "PopulationWithTruth":
        """Rows of the population; `true_delta` stays the population value."""
        return PopulationWithTruth(
            X=self.X[index],
            strata=self.strata[index],
            rho=self.rho[index],
            z=self.z[index],
            t=self.t[index],
            outcomes=self.outcomes[index],
            y1=self.y1[index],
            y0=self.y0[index],
            y=self.y[index],
            true_delta=self.true_delta,
            covariate_names=self.covariate_names,
        )

    def to_dataset(self) -> TrialDataset:
        """Observed data with the full covariate set."""
        observed = (self.z.astype(float), self.t.astype(float), self.y.astype(float))
        return TrialDataset(self.X, *observed, self.covariate_names)

    def truth_summary(self) -> Dict[str, float]:
        """Population-level reference quantities."""
        always, never = self.outcomes[:, ALWAYS_TAKER], self.outcomes[:, NEVER_TAKER]
        return {
            "cace": self.true_delta,
            "ate": float(np.mean(self.y1 - self.y0)),
            "mean_rho_c": float(self.rho[:, COMPLIER].mean()),
            "mean_rho_d": float(self.rho[:, DEFIER].mean()),
            "er_violation_always_takers": float(np.mean((always[:, 0, 1] - always[:, 1, 1]) ** 2.0)),
            "er_violation_never_takers": float(np.mean((never[:, 1, 0] - never[:, 0, 0]) ** 2.0)),
        }


def draw_covariates(params: SimulationParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Intercept, 7 indicators `1{X' > 0}` and 7 log-normals `exp(X')` of a `N(0, Sigma)` draw."""
    cholesky = linalg.cholesky(params.covariance, lower=True)
    latent = rng.standard_normal((n, N_COVARIATES)) @ cholesky.T
    binary = (latent[:, :N_BINARY] > 0).astype(float)
    lognormal = np.exp(latent[:, N_BINARY:])
    return np.column_stack([np.ones(n), binary, lognormal])


def draw_population(params: SimulationParams, n: int, seed: Optional[int] = None) -> PopulationWithTruth:
    """
    Draw `n` rows of the population defined by `params`.

    Args:
        params (SimulationParams): Population parameters.
        n (int): Number of rows, at least 1.
        seed (Optional[int]): Seed of the row draws; derived from `params.seed` when omitted.

    Returns:
        PopulationWithTruth: Rows with their strata, counterfactuals and the CACE of these rows.
    """
    if n < 1:
        raise ValueError("A population needs at least one row.")
    rng = np.random.default_rng([params.seed, 1] if seed is None else seed)

    X = draw_covariates(params, n, rng)
    rho = params.rho(X)
    n_strata = 3 if params.scenario.monotonicity else 4
    cumulative = np.cumsum(rho[:, :n_strata], axis=1)
    cumulative /= cumulative[:, -1:]
    strata = np.sum(rng.random(n)[:, None] > cumulative, axis=1)
    strata = np.minimum(strata, n_strata - 1)
    one_hot = np.eye(4)[strata]
    s_c, s_a, s_n, s_d = (one_hot[:, k] for k in (COMPLIER, ALWAYS_TAKER, NEVER_TAKER, DEFIER))

    z = rng.binomial(1, 0.5, size=n).astype(np.int8)
    t = (s_c * z + s_a + s_d * (1 - z)).astype(np.int8)

    outcomes = np.empty((n, 4, 2, 2), dtype=np.int8)
    for k in range(4):
        for level in range(2):
            for taken in range(2):
                p = expit(X @ params.beta[k, level, taken])
                outcomes[:, k, level, taken] = rng.random(n) < p
    if params.scenario.exclusion_restriction:
        outcomes[:, ALWAYS_TAKER, 1, 1] = outcomes[:, ALWAYS_TAKER, 0, 1]
        outcomes[:, NEVER_TAKER, 1, 0] = outcomes[:, NEVER_TAKER, 0, 0]

    y1 = (
        s_c * outcomes[:, COMPLIER, 1, 1]
        + s_a * z * outcomes[:, ALWAYS_TAKER, 1, 1]
        + s_a * (1 - z) * outcomes[:, ALWAYS_TAKER, 0, 1]
        + s_d * outcomes[:, DEFIER, 0, 1]
    )
    y0 = (
        s_c * outcomes[:, COMPLIER, 0, 0]
        + s_n * z * outcomes[:, NEVER_TAKER, 1, 0]
        + s_n * (1 - z) * outcomes[:, NEVER_TAKER, 0, 0]
        + s_d * outcomes[:, DEFIER, 1, 0]
    )
    y = t * y1 + (1 - t) * y0

    compliers = strata == COMPLIER
    true_delta = float(np.mean(y1[compliers] - y0[compliers])) if compliers.any() else float("nan")
    return PopulationWithTruth(
        X=X, strata=strata, rho=rho, z=z, t=t, outcomes=outcomes, y1=y1, y0=y0, y=y, true_delta=true_delta
    )


def misspecify_view(data, specification: Specification) -> TrialDataset:
    """
    Analyst-visible dataset.

    Args:
        data: A `PopulationWithTruth` or a `TrialDataset` with the full 15-column design.
        specification (Specification): `well` keeps every covariate; `mis` drops `x7` and `x14`
            (one binary and one log-normal covariate), leaving 13 columns.
    """
    dataset = data.to_dataset() if isinstance(data, PopulationWithTruth) else data
    if Specification(specification) is Specification.WELL:
        return dataset
    visible = [name for name in dataset.covariate_names if name not in HIDDEN_WHEN_MISSPECIFIED]
    return dataset.select_columns(visible)
