"""
Monte-Carlo study: repeated samples from a simulated target population, every estimator on each
sample, and bias / SE / RMSE in percentage points against the population CACE.
"""

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel
from scipy import stats

from core.config import StudyConfig
from core.errors import CacemixError
from core.estimators import estimate
from core.logger import MainLogger, default_logger
from core.simgen import PopulationWithTruth, build_params, draw_population, misspecify_view
from core.utils import child_seed

STUDY_COLUMNS = ["scenario", "spec", "n", "estimator", "bias_pct", "se_pct", "rmse_pct", "failures"]


class StudyCell(BaseModel):
    """
    Summary of one (scenario, n, estimator) cell.

    Attributes:
        scenario (int): Scenario number.
        spec (str): Covariate view (`well` or `mis`).
        n (int): Sample size.
        estimator (str): Estimator name.
        bias_pct (float): Mean estimate minus truth, in percentage points.
        se_pct (float): Standard deviation of the estimates (population form), in percentage points.
        rmse_pct (float): Root mean squared error, in percentage points.
        failures (int): Replicates where the estimator raised.
        estimates (List[Optional[float]]): Per-replicate estimates, `None` for failures.
    """

    scenario: int
    spec: str
    n: int
    estimator: str
    bias_pct: float
    se_pct: float
    rmse_pct: float
    failures: int
    estimates: List[Optional[float]]


class ScenarioTruth(BaseModel):
    """Reference quantities of one simulated target population."""

    scenario: int
    population_size: int
    cace: float
    ate: float
    mean_rho_c: float
    mean_rho_d: float
    er_violation_always_takers: float
    er_violation_never_takers: float


class StudyReport(BaseModel):
    """All cells of a study plus the population truths and the configuration that produced them."""

    config: Dict
    truths: List[ScenarioTruth]
    cells: List[StudyCell]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([cell.model_dump(include=set(STUDY_COLUMNS)) for cell in self.cells], columns=STUDY_COLUMNS)

    def to_csv(self, path: Path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.6f")

    def to_json(self, path: Path) -> None:
        path.write_text(self.model_dump_json(indent=2) + "\n")

    def figure1_frame(self) -> pd.DataFrame:
        """Absolute bias and RMSE per scenario, n and estimator."""
        frame = self.to_frame()
        frame["abs_bias_pct"] = frame["bias_pct"].abs()
        return frame[["scenario", "spec", "n", "estimator", "abs_bias_pct", "rmse_pct"]]

    def figure2_frame(self) -> pd.DataFrame:
        """
        Log SE against log n with the fitted line per scenario and estimator.

        A slope of -1/2 corresponds to root-n convergence. Slopes are NaN when fewer than two
        sample sizes have a positive SE.
        """
        frame = self.to_frame()[["scenario", "spec", "n", "estimator", "se_pct"]].copy()
        frame["log_n"] = np.log(frame["n"].astype(float))
        frame["log_se"] = np.log(frame["se_pct"].where(frame["se_pct"] > 0))

        def fit_line(group: pd.DataFrame) -> pd.Series:
            usable = group.dropna(subset=["log_se"])
            if usable["log_n"].nunique() < 2:
                return pd.Series({"slope": np.nan, "intercept": np.nan})
            line = stats.linregress(usable["log_n"], usable["log_se"])
            return pd.Series({"slope": line.slope, "intercept": line.intercept})

        lines = frame.groupby(["scenario", "estimator"]).apply(fit_line, include_groups=False).reset_index()
        return frame.merge(lines, on=["scenario", "estimator"], how="left")


def summarize_estimates(estimates: np.ndarray, truth: float) -> Dict[str, float]:
    """
    Bias, SE and RMSE in percentage points over the finite estimates.

    SE uses the population form (ddof=0), so `bias^2 + se^2 = rmse^2`.
    """
    valid = estimates[np.isfinite(estimates)]
    if valid.size == 0:
        return {"bias_pct": float("nan"), "se_pct": float("nan"), "rmse_pct": float("nan")}
    return {
        "bias_pct": 100.0 * float(valid.mean() - truth),
        "se_pct": 100.0 * float(valid.std()),
        "rmse_pct": 100.0 * float(np.sqrt(np.mean((valid - truth) ** 2))),
    }


def _replicate_estimates(
    population: PopulationWithTruth, config: StudyConfig, scenario: int, n: int, r: int, logger: MainLogger
) -> Dict[str, float]:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, scenario, n, r]))
    index = rng.choice(population.n, size=n, replace=False)
    sample = misspecify_view(population.take(index), config.specification)

    results = {}
    for name in config.estimators:
        try:
            seed = child_seed(config.seed, scenario, n, r)
            results[name] = estimate(name, sample, config.pipeline, seed, logger).delta_hat
        except CacemixError as exc:
            logger.debug(f"Scenario {scenario}, n={n}, replicate {r}: {name} failed with {type(exc).__name__}.")
            results[name] = float("nan")
    return results


def emit_sample(population: PopulationWithTruth, config: StudyConfig, scenario: int, n: int, out_dir: Path) -> Path:
    """Write the first replicate sample of a cell as a trial CSV; returns its path."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, scenario, n, 0]))
    index = rng.choice(population.n, size=n, replace=False)
    path = out_dir / f"scenario{scenario}_{config.specification.value}_n{n}.csv"
    misspecify_view(population.take(index), config.specification).to_csv(path)
    return path


def run_study(
    config: StudyConfig, logger: Optional[MainLogger] = None, emit_data_dir: Optional[Path] = None
) -> StudyReport:
    """
    Run the simulation study.

    For every scenario a target population of `config.population_size` rows is drawn once. Each
    (scenario, n) cell draws `config.replicates` samples without replacement, with a generator seeded
    by `(seed, scenario, n, replicate)`, so serial and threaded runs give identical reports.

    Args:
        config (StudyConfig): Study grid and pipeline settings.
        logger (Optional[MainLogger]): Progress logger; the package logger by default.
        emit_data_dir (Optional[Path]): If given, the first sample of each cell is written there.

    Returns:
        StudyReport: One cell per scenario x n x estimator.
    """
    logger = logger or default_logger()
    cells: List[StudyCell] = []
    truths: List[ScenarioTruth] = []

    for scenario in config.scenarios:
        params = build_params(config.seed, scenario, config.specification)
        population = draw_population(params, config.population_size, seed=child_seed(config.seed, scenario))
        truth = population.truth_summary()
        truths.append(ScenarioTruth(scenario=scenario, population_size=population.n, **truth))
        logger.info(f"Scenario {scenario}: population CACE {truth['cace']:.4f}, ATE {truth['ate']:.4f}.")

        for n in config.ns:
            if emit_data_dir is not None:
                logger.info(f"Sample written to {emit_sample(population, config, scenario, n, emit_data_dir)}.")

            def run(r: int, n: int = n) -> Dict[str, float]:
                return _replicate_estimates(population, config, scenario, n, r, logger)

            if config.threads > 1:
                with ThreadPoolExecutor(max_workers=config.threads) as executor:
                    replicates = list(executor.map(run, range(config.replicates)))
            else:
                replicates = [run(r) for r in range(config.replicates)]

            for name in config.estimators:
                estimates = np.array([replicate[name] for replicate in replicates])
                failures = int(np.sum(~np.isfinite(estimates)))
                cells.append(
                    StudyCell(
                        scenario=scenario,
                        spec=config.specification.value,
                        n=n,
                        estimator=name,
                        failures=failures,
                        estimates=[float(v) if np.isfinite(v) else None for v in estimates],
                        **summarize_estimates(estimates, truth["cace"]),
                    )
                )
                if failures:
                    logger.warning(f"Scenario {scenario}, n={n}: {name} failed in {failures} replicates.")
            logger.info(f"Scenario {scenario}, n={n}: {config.replicates} replicates done.")

    return StudyReport(config=config.model_dump(mode="json"), truths=truths, cells=cells)
