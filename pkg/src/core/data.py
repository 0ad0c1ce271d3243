"""
Trial data container and CSV ingestion.

A `TrialDataset` holds the analyst-visible design matrix (intercept first), the assignment `z`,
the treatment actually taken `t` and the outcome `y`. CSV files follow one schema: a header row
with `z`, `t`, `y` and any number of numeric covariate columns.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.errors import NonBinaryError, NonFiniteError, SchemaViolationError

INTERCEPT = "intercept"
REQUIRED_COLUMNS: Tuple[str, ...] = ("z", "t", "y")


def check_binary(values: np.ndarray, name: str) -> None:
    """
    Raise `NonBinaryError` unless every entry of `values` is 0 or 1.

    Args:
        values (np.ndarray): Vector to check.
        name (str): Name used in the error message.
    """
    if not np.all((values == 0) | (values == 1)):
        raise NonBinaryError(f"Column '{name}' must only hold 0/1 values.")


@dataclass(frozen=True)
class TrialDataset:
    """
    Rows of (covariates X, assignment Z, treatment taken T, outcome Y).

    Attributes:
        X (np.ndarray): `(n, cols)` design matrix; column 0 is the intercept.
        z (np.ndarray): Binary assignment.
        t (np.ndarray): Binary treatment actually taken.
        y (np.ndarray): Outcome, binary or continuous.
        covariate_names (Tuple[str, ...]): One name per design column, intercept included.

    Example:
        >>> data = TrialDataset.from_arrays(np.zeros((2, 1)), [1, 0], [1, 0], [0.3, 1.2], ("x1",))
        >>> data.covariate_names
        ('intercept', 'x1')
    """

    X: np.ndarray
    z: np.ndarray
    t: np.ndarray
    y: np.ndarray
    covariate_names: Tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        n = self.X.shape[0]
        if self.X.ndim != 2 or any(v.shape != (n,) for v in (self.z, self.t, self.y)):
            raise SchemaViolationError("X must be 2-D and z, t, y vectors of the same length.")
        if self.covariate_names and len(self.covariate_names) != self.X.shape[1]:
            raise SchemaViolationError("One covariate name is needed per design column.")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise NonFiniteError("Covariates and outcome must be finite.")
        check_binary(self.z, "z")
        check_binary(self.t, "t")

    @classmethod
    def from_arrays(
        cls,
        covariates: np.ndarray,
        z: Sequence[float],
        t: Sequence[float],
        y: Sequence[float],
        names: Optional[Sequence[str]] = None,
    ) -> "TrialDataset":
        """Build a dataset from raw covariates (without intercept); the intercept column is prepended."""
        covariates = np.asarray(covariates, dtype=float)
        if covariates.ndim == 1:
            covariates = covariates[:, None]
        names = tuple(names) if names is not None else tuple(f"x{j + 1}" for j in range(covariates.shape[1]))
        X = np.column_stack([np.ones(covariates.shape[0]), covariates])
        return cls(
            X=X,
            z=np.asarray(z, dtype=float),
            t=np.asarray(t, dtype=float),
            y=np.asarray(y, dtype=float),
            covariate_names=(INTERCEPT, *names),
        )

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def cols(self) -> int:
        return self.X.shape[1]

    def take(self, index: np.ndarray) -> "TrialDataset":
        """Rows selected by an integer index (repeats allowed, as in a bootstrap resample)."""
        return TrialDataset(self.X[index], self.z[index], self.t[index], self.y[index], self.covariate_names)

    def subset(self, mask: np.ndarray) -> "TrialDataset":
        """Rows selected by a boolean mask."""
        return self.take(np.flatnonzero(mask))

    def select_columns(self, names: Sequence[str]) -> "TrialDataset":
        """Keep the named design columns, in the given order."""
        missing = [name for name in names if name not in self.covariate_names]
        if missing:
            raise SchemaViolationError(f"Unknown covariates {missing}.")
        positions = [self.covariate_names.index(name) for name in names]
        return TrialDataset(self.X[:, positions], self.z, self.t, self.y, tuple(names))

    def to_frame(self) -> pd.DataFrame:
        """Covariates without the intercept, followed by `z`, `t`, `y`."""
        frame = pd.DataFrame(self.X[:, 1:], columns=list(self.covariate_names[1:]))
        frame["z"] = self.z.astype(int)
        frame["t"] = self.t.astype(int)
        frame["y"] = self.y
        return frame

    def to_csv(self, path: Path) -> None:
        """Write the dataset in the ingestion schema with round-trip float precision."""
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def from_frame(frame: pd.DataFrame, covariates: Optional[Sequence[str]] = None) -> TrialDataset:
    """
    Validate a data frame against the trial schema and convert it to a `TrialDataset`.

    Args:
        frame (pd.DataFrame): Table with `z`, `t`, `y` and covariate columns.
        covariates (Optional[Sequence[str]]): Covariate columns to use, in order. Defaults to
            every column other than `z`, `t`, `y`, in file order.

    Returns:
        TrialDataset: Dataset with the intercept prepended.

    Raises:
        SchemaViolationError: If required columns are missing, values are not numeric or finite,
            or `z`/`t` hold values other than 0/1.
    """
    frame = frame.rename(columns=lambda column: str(column).strip().lower())
    missing = [column for column in REQUIRED_COLUMNS if column not in frame.columns]
    if missing:
        raise SchemaViolationError(f"Missing required columns {missing}.")

    if covariates is None:
        covariates = [column for column in frame.columns if column not in REQUIRED_COLUMNS]
    else:
        covariates = [column.strip().lower() for column in covariates]
        unknown = [column for column in covariates if column not in frame.columns or column in REQUIRED_COLUMNS]
        if unknown:
            raise SchemaViolationError(f"Unknown covariate columns {unknown}.")

    try:
        values = frame[[*covariates, *REQUIRED_COLUMNS]].apply(pd.to_numeric, errors="raise")
    except (ValueError, TypeError) as exc:
        raise SchemaViolationError(f"Non-numeric values in the trial data: {exc}") from exc
    if values.isna().any().any():
        raise SchemaViolationError("The trial data contains missing values.")

    try:
        return TrialDataset.from_arrays(
            values[covariates].to_numpy(dtype=float),
            values["z"].to_numpy(dtype=float),
            values["t"].to_numpy(dtype=float),
            values["y"].to_numpy(dtype=float),
            covariates,
        )
    except (NonBinaryError, NonFiniteError) as exc:
        raise SchemaViolationError(str(exc)) from exc


def load_csv(path: Path, covariates: Optional[Sequence[str]] = None) -> TrialDataset:
    """
    Read a trial CSV file.

    Raises:
        SchemaViolationError: If the file cannot be parsed or violates the schema.
    """
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise SchemaViolationError(f"Cannot read '{path}': {exc}") from exc
    return from_frame(frame, covariates)
