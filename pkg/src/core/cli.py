import argparse
import os
from pathlib import Path
from typing import Annotated, Dict, List, Literal, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, Field, FilePath, model_validator

from core.config import (
    ESTIMATOR_NAMES,
    OutcomeKind,
    PipelineConfig,
    SolverConfig,
    Specification,
    StudyConfig,
)
from core.utils import resolve_threads

ASSUME_CHOICES: Dict[str, Tuple[str, ...]] = {
    "none": ("pi",),
    "er": ("pi_er",),
    "mo": ("pi_mo",),
    "er+mo": ("pi_mo_er",),
    "all": ("pi", "pi_er", "pi_mo", "pi_mo_er", "iv_wald", "iv_matching"),
    "iv": ("iv_wald", "iv_matching"),
}


def _prepare_paths(values: dict) -> dict:
    """
    Resolve `out` and `log_file` against the working directory and create their folders.

    `log_file` defaults to `<out>/cacemix.log`.
    """
    out = Path(values.get("out") or Path(os.getcwd(), "output"))
    if not out.is_absolute():
        out = Path(os.getcwd(), out)
    values["out"] = out

    log_file = values.get("log_file")
    log_file = Path(log_file) if log_file else out / "cacemix.log"
    if not log_file.is_absolute():
        log_file = Path(os.getcwd(), log_file)
    values["log_file"] = log_file

    # folder creation needed for logging
    log_file.parent.mkdir(parents=True, exist_ok=True)
    out.mkdir(parents=True, exist_ok=True)
    values["threads"] = resolve_threads(values.get("threads"))
    return values


class FitArguments(BaseModel):
    """
    Arguments of the `fit` command.

    Attributes:
        data (FilePath): Trial CSV with `z`, `t`, `y` and covariate columns.
        outcome_kind (OutcomeKind): Declared outcome type.
        assume (str): Assumption set; `all` runs the four mixture-of-experts estimators and both
            IV baselines, `iv` only the baselines.
        bootstrap (int): Bootstrap replicates; 0 skips the bootstrap.
        seed (int): Root seed.
        out (Path): Output directory.
        covariates (Optional[List[str]]): Covariate columns to use, in order.
        threads (int): Worker threads; falls back to `CACEMIX_THREADS`, then 1.
        level (float): Confidence level.
        eta_mode (str): Allocation model.
        n_starts (int): Random starts per expert EM.
        variance_denominator (str): Variance update of continuous experts.
        strict (bool): Degenerate strata raise instead of warn.
        log_file (Path): Log file; `<out>/cacemix.log` by default.

    Example:
        >>> args = FitArguments(data="/path/to/trial.csv", assume="er+mo", bootstrap=999, seed=7)
        >>> args.estimator_names
        ('pi_mo_er',)
    """

    data: FilePath
    outcome_kind: OutcomeKind = OutcomeKind.BINARY
    assume: Literal["none", "er", "mo", "er+mo", "all", "iv"] = "all"
    bootstrap: Annotated[int, Field(ge=0)] = 0
    seed: int = 0
    out: Path = Field(default=Path(os.getcwd(), "output"))
    covariates: Optional[List[str]] = None
    threads: Annotated[int, Field(gt=0)] = 1
    level: Annotated[float, Field(gt=0, lt=1)] = 0.95
    eta_mode: Literal["constant_mle", "logistic"] = "constant_mle"
    n_starts: Annotated[int, Field(gt=0)] = 5
    variance_denominator: Literal["paper", "posterior_mass"] = "paper"
    strict: bool = False
    log_file: Path = Field(default=Path(os.getcwd(), "output", "cacemix.log"))

    @model_validator(mode="before")
    def check_and_create_directories(cls, values: dict) -> dict:  # noqa: N805
        """
        Prevalidate before the model is fully initialized.

        Args:
            cls (self): The class itself (used by Pydantic for validation).
            values (dict): A dictionary of field names and values.

        Returns:
            dict: The values with absolute `out`/`log_file` paths and the resolved thread count.

        Raises:
            ValueError: If `CACEMIX_THREADS` is set to something other than a positive integer.
        """
        return _prepare_paths(dict(values))

    @property
    def estimator_names(self) -> Tuple[str, ...]:
        return ASSUME_CHOICES[self.assume]

    def pipeline_config(self) -> PipelineConfig:
        solver = SolverConfig(
            n_starts=self.n_starts, variance_denominator=self.variance_denominator, strict=self.strict
        )
        return PipelineConfig(
            solver=solver,
            outcome_kind=self.outcome_kind,
            eta_mode=self.eta_mode,
            level=self.level,
            threads=self.threads,
        )


class SimulateArguments(BaseModel):
    """
    Arguments of the `simulate` command.

    Attributes:
        scenario (List[int]): Scenarios to run.
        spec (Specification): Covariate view handed to the estimators.
        n_list (List[int]): Sample sizes.
        replicates (int): Samples per cell.
        estimators (List[str]): Estimator names.
        seed (int): Root seed.
        population_size (int): Rows of each target population.
        out (Path): Output directory.
        threads (int): Worker threads for replicates.
        plots (bool): Also write `figure1.csv` and `figure2.csv`.
        emit_data (bool): Write the first sample of each cell under `<out>/data`.
        log_file (Path): Log file; `<out>/cacemix.log` by default.
    """

    scenario: List[Annotated[int, Field(ge=1, le=4)]] = [1, 2, 3, 4]
    spec: Specification = Specification.MISSPECIFIED
    n_list: List[Annotated[int, Field(gt=0)]] = [2000, 5000, 10000]
    replicates: Annotated[int, Field(gt=0)] = 200
    estimators: List[str] = list(ESTIMATOR_NAMES)
    seed: int = 0
    population_size: Annotated[int, Field(gt=0)] = 1_000_000
    out: Path = Field(default=Path(os.getcwd(), "output"))
    threads: Annotated[int, Field(gt=0)] = 1
    plots: bool = False
    emit_data: bool = False
    log_file: Path = Field(default=Path(os.getcwd(), "output", "cacemix.log"))

    @model_validator(mode="before")
    def check_and_create_directories(cls, values: dict) -> dict:  # noqa: N805
        """Same path handling as `FitArguments`."""
        return _prepare_paths(dict(values))

    def study_config(self) -> StudyConfig:
        """
        Raises:
            ValidationError: If the grid is inconsistent (unknown estimator, n above the population size).
        """
        return StudyConfig(
            scenarios=tuple(self.scenario),
            specification=self.spec,
            ns=tuple(self.n_list),
            replicates=self.replicates,
            estimators=tuple(self.estimators),
            population_size=self.population_size,
            seed=self.seed,
            threads=self.threads,
            pipeline=PipelineConfig(threads=1),
        )


def arguments_parser(argv: Optional[Sequence[str]] = None) -> Union[FitArguments, SimulateArguments]:
    """
    Uses `argparse` for argument parsing and `pydantic` for validation.

    Does the following:
        - parse command-line arguments (`fit` or `simulate` sub-command)
        - validate them against `FitArguments` or `SimulateArguments`
        - return the validated arguments model.

    Raises:
        ValidationError: If the parsed values fail validation.
    """
    parser = argparse.ArgumentParser(prog="cacemix", description="Estimate complier average causal effects.")
    commands = parser.add_subparsers(dest="command", required=True)

    fit = commands.add_parser("fit", help="Fit CACE estimators on a trial CSV")
    fit.add_argument("--data", required=True, help="Trial CSV with z, t, y and covariate columns")
    fit.add_argument("--outcome-kind", dest="outcome_kind", choices=[k.value for k in OutcomeKind], default="binary")
    fit.add_argument("--assume", choices=list(ASSUME_CHOICES), default="all", help="Assumption set (default: all)")
    fit.add_argument("--bootstrap", type=int, default=0, help="Bootstrap replicates (default: 0, no bootstrap)")
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--out", default=None, help="Output directory (default: ./output)")
    fit.add_argument("--covariates", nargs="+", default=None, help="Covariate columns to use, in order")
    fit.add_argument("--threads", type=int, default=None, help="Worker threads (default: $CACEMIX_THREADS or 1)")
    fit.add_argument("--level", type=float, default=0.95, help="Confidence level (default: 0.95)")
    fit.add_argument("--eta-mode", dest="eta_mode", choices=["constant_mle", "logistic"], default="constant_mle")
    fit.add_argument("--n-starts", dest="n_starts", type=int, default=5, help="Random starts per expert EM")
    fit.add_argument(
        "--variance-denominator", dest="variance_denominator", choices=["paper", "posterior_mass"], default="paper"
    )
    fit.add_argument("--strict", action="store_true", help="Fail on degenerate strata")
    fit.add_argument("--log_file", default=None, help="Path to the log file (default: <out>/cacemix.log)")

    simulate = commands.add_parser("simulate", help="Run the simulation study")
    simulate.add_argument("--scenario", type=int, nargs="+", default=[1, 2, 3, 4])
    simulate.add_argument("--spec", choices=[s.value for s in Specification], default="mis")
    simulate.add_argument("--n-list", dest="n_list", type=int, nargs="+", default=[2000, 5000, 10000])
    simulate.add_argument("--replicates", type=int, default=200)
    simulate.add_argument("--estimators", nargs="+", default=list(ESTIMATOR_NAMES))
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--population-size", dest="population_size", type=int, default=1_000_000)
    simulate.add_argument("--out", default=None, help="Output directory (default: ./output)")
    simulate.add_argument("--threads", type=int, default=None, help="Worker threads (default: $CACEMIX_THREADS or 1)")
    simulate.add_argument("--plots", action="store_true", help="Write figure1.csv and figure2.csv")
    simulate.add_argument("--emit-data", dest="emit_data", action="store_true", help="Write one sample CSV per cell")
    simulate.add_argument("--log_file", default=None, help="Path to the log file (default: <out>/cacemix.log)")

    args_dict = vars(parser.parse_args(argv))
    command = args_dict.pop("command")

    # Validate cli arguments
    model = FitArguments if command == "fit" else SimulateArguments
    return model(**args_dict)
