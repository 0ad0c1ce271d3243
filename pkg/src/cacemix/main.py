import logging
import sys
import time
from typing import List, Optional, Sequence

from pydantic import ValidationError

from core.baselines import itt_estimate
from core.cli import FitArguments, SimulateArguments, arguments_parser
from core.data import load_csv
from core.errors import CacemixError
from core.estimators import CaceEstimate, bootstrap_estimator, estimate
from core.logger import MainLogger
from core.study import run_study
from core.utils import RunManifest, setup_output_dir, write_json

CONVENTIONS = [
    "Two-expert E-step uses h_nc = 1 - h_c.",
    "Three-expert E-step normalizes g_k L_k over all three experts.",
    "Gating coefficients use reference coding (last stratum pinned at zero).",
]


def summary_line(result: CaceEstimate) -> str:
    """One aligned line per estimator: name, point estimate and interval."""
    line = f"{result.estimator:<12} delta_hat={result.delta_hat: .6f}"
    if result.bootstrap is not None:
        line += f"  {result.bootstrap.level:.0%} CI=[{result.bootstrap.ci_low: .6f}, {result.bootstrap.ci_high: .6f}]"
    return line


def _run_warnings(results: List[CaceEstimate]) -> List[str]:
    warnings = list(CONVENTIONS)
    for result in results:
        if result.extrapolation_share:
            warnings.append(f"{result.estimator}: extrapolation share {result.extrapolation_share:.4f}.")
        if result.bootstrap is not None and result.bootstrap.failures:
            warnings.append(f"{result.estimator}: {result.bootstrap.failures} bootstrap replicates dropped.")
    return warnings


def cmd_fit(args: FitArguments, logger: MainLogger) -> int:
    """
    Fit the requested estimators on a trial CSV.

    Writes `estimates.json` (deterministic for fixed arguments) and `manifest.json` (with the wall
    time) into `args.out`, and prints one summary line per estimator plus the ITT reference.

    Args:
        args (FitArguments): Validated arguments.
        logger (MainLogger): Run logger.

    Returns:
        int: Exit code 0.

    Raises:
        CacemixError: Schema violations and estimation failures, mapped to exit codes by `main`.
    """
    started = time.perf_counter()
    out = setup_output_dir(args.out, logger)
    data = load_csv(args.data, args.covariates)
    cfg = args.pipeline_config()
    logger.info(f"Loaded {data.n} rows with covariates {list(data.covariate_names[1:])}.")

    results = []
    for name in args.estimator_names:
        logger.info(f"Running {name} ...")
        if args.bootstrap > 0:
            result = bootstrap_estimator(name, data, cfg, args.bootstrap, args.seed, logger)
        else:
            result = estimate(name, data, cfg, args.seed, logger)
        results.append(result)
        print(summary_line(result))

    itt = itt_estimate(data.z, data.y)
    print(f"{'itt':<12} delta_hat={itt: .6f}")

    manifest = RunManifest(
        command="fit", config=args.model_dump(mode="json"), seeds={"seed": args.seed}, warnings=_run_warnings(results)
    )
    write_json(
        out / "estimates.json",
        {
            "manifest": "manifest.json",
            "run_id": manifest.run_id,
            "itt": itt,
            "estimates": [result.model_dump(mode="json") for result in results],
        },
    )
    manifest.wall_time_seconds = time.perf_counter() - started
    write_json(out / "manifest.json", manifest.model_dump(mode="json") | {"run_id": manifest.run_id})
    logger.info(f"Results written to {out}.")
    return 0


def cmd_simulate(args: SimulateArguments, logger: MainLogger) -> int:
    """
    Run the simulation study and write `study.csv`, `study.json` and, with `--plots`, the figure CSVs.

    Returns:
        int: Exit code 0.
    """
    started = time.perf_counter()
    out = setup_output_dir(args.out, logger)
    config = args.study_config()
    emit_dir = setup_output_dir(out / "data", logger) if args.emit_data else None

    report = run_study(config, logger, emit_dir)
    report.to_csv(out / "study.csv")
    report.to_json(out / "study.json")
    if args.plots:
        report.figure1_frame().to_csv(out / "figure1.csv", index=False, float_format="%.6f")
        report.figure2_frame().to_csv(out / "figure2.csv", index=False, float_format="%.6f")
    print(report.to_frame().to_string(index=False, float_format=lambda value: f"{value:.2f}"))

    manifest = RunManifest(
        command="simulate", config=args.model_dump(mode="json"), seeds={"seed": args.seed}, warnings=list(CONVENTIONS)
    )
    manifest.wall_time_seconds = time.perf_counter() - started
    write_json(out / "manifest.json", manifest.model_dump(mode="json") | {"run_id": manifest.run_id})
    logger.info(f"Study written to {out}.")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Main entry point of the `cacemix` command.

    Sub-commands:

    - `fit`: estimate the CACE on a trial CSV under the chosen assumption set, optionally with
      bootstrap intervals.
    - `simulate`: run the simulation study over scenarios, sample sizes and estimators.

    Exit codes are 0 on success, 2 on invalid arguments or input data, 3 on estimation failures;
    the error class name is printed on stderr.

    Example usage:
        >> python -m cacemix.main fit --data trial.csv --assume all --bootstrap 999 --seed 1 --out results
        >> python -m cacemix.main simulate --scenario 4 --spec mis --n-list 10000 --replicates 200
    """
    try:
        args_model = arguments_parser(argv)
    except ValidationError as exc:
        print(f"ValidationError: {exc}", file=sys.stderr)
        return 2

    # Instantiate the logger
    logger = MainLogger("cacemix", log_file=args_model.log_file, log_level=logging.INFO, overwrite=True)
    logger.info(f"Parsed arguments:  {args_model}")

    try:
        if isinstance(args_model, FitArguments):
            return cmd_fit(args_model, logger)
        return cmd_simulate(args_model, logger)
    except ValidationError as exc:
        print(f"ValidationError: {exc}", file=sys.stderr)
        logger.error(str(exc))
        return 2
    except CacemixError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        logger.error(f"{type(exc).__name__}: {exc}")
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
