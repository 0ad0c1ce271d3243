"""
Instrumental-variable comparators: the Wald ratio and its grouped (matching) version.
"""

from typing import Optional, Tuple

import numpy as np
import pandas as pd

from core.config import MatchingConfig
from core.errors import EmptySubsetError, NoValidGroupsError, ZeroDenominatorError
from core.logger import MainLogger, default_logger

DENOMINATOR_ATOL = 1e-12


def _arm_differences(z: np.ndarray, t: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    treated, control = z == 1, z == 0
    if not treated.any() or not control.any():
        raise EmptySubsetError("Both assignment arms need at least one row.")
    return y[treated].mean() - y[control].mean(), t[treated].mean() - t[control].mean()


def itt_estimate(z: np.ndarray, y: np.ndarray) -> float:
    """Intention-to-treat effect: difference of outcome means between assignment arms."""
    z, y = np.asarray(z, dtype=float), np.asarray(y, dtype=float)
    return float(_arm_differences(z, y, y)[0])


def wald_estimator(z: np.ndarray, t: np.ndarray, y: np.ndarray) -> float:
    """
    Wald ratio `[E(Y|Z=1) - E(Y|Z=0)] / [E(T|Z=1) - E(T|Z=0)]`.

    Raises:
        EmptySubsetError: If an assignment arm is empty.
        ZeroDenominatorError: If the first-stage difference is zero.

    Example:
        >>> wald_estimator(np.array([1, 1, 0, 0]), np.array([1, 0, 0, 0]), np.array([1, 0, 0, 0]))
        1.0
    """
    z, t, y = (np.asarray(a, dtype=float) for a in (z, t, y))
    outcome_diff, treatment_diff = _arm_differences(z, t, y)
    if abs(treatment_diff) <= DENOMINATOR_ATOL:
        raise ZeroDenominatorError("Treatment uptake does not differ between assignment arms.")
    return float(outcome_diff / treatment_diff)


def matching_groups(eta_hat: np.ndarray, n_groups: int) -> np.ndarray:
    """Quantile bins of the allocation probability; a single group when it is constant."""
    eta_hat = np.asarray(eta_hat, dtype=float)
    if n_groups == 1 or np.ptp(eta_hat) == 0:
        return np.zeros(eta_hat.shape[0], dtype=int)
    return pd.qcut(eta_hat, q=n_groups, labels=False, duplicates="drop").astype(int)


def iv_matching_estimator(
    z: np.ndarray,
    t: np.ndarray,
    y: np.ndarray,
    eta_hat: np.ndarray,
    cfg: Optional[MatchingConfig] = None,
    logger: Optional[MainLogger] = None,
) -> float:
    """
    IV estimator with units matched on the allocation probability.

    Groups are quantile bins of `eta_hat`. Within each retained group the arm means of Y and T are
    differenced; group differences are summed with cell-size weights `n_j / n_retained` and the
    outcome sum is divided by the treatment sum. With one group this is the Wald ratio.

    Args:
        z, t, y (np.ndarray): Assignment, treatment taken and outcome.
        eta_hat (np.ndarray): Estimated allocation probability per row.
        cfg (Optional[MatchingConfig]): Number of groups and minimum arm size per group.
        logger (Optional[MainLogger]): Receives a warning per dropped group.

    Raises:
        NoValidGroupsError: If no group has both arms with `min_group_size` rows.
        ZeroDenominatorError: If the summed treatment difference is zero.
    """
    cfg = cfg or MatchingConfig()
    logger = logger or default_logger()
    z, t, y = (np.asarray(a, dtype=float) for a in (z, t, y))
    groups = matching_groups(eta_hat, cfg.n_groups)

    retained = []
    for group in np.unique(groups):
        members = groups == group
        n_treated, n_control = int(np.sum(z[members] == 1)), int(np.sum(z[members] == 0))
        if min(n_treated, n_control) < cfg.min_group_size:
            logger.warning(f"Matching group {group} dropped: {n_treated} assigned / {n_control} control rows.")
            continue
        retained.append(members)
    if not retained:
        raise NoValidGroupsError("No matching group contains both assignment arms.")

    n_retained = sum(int(members.sum()) for members in retained)
    outcome_sum, treatment_sum = 0.0, 0.0
    for members in retained:
        outcome_diff, treatment_diff = _arm_differences(z[members], t[members], y[members])
        weight = members.sum() / n_retained
        outcome_sum += weight * outcome_diff
        treatment_sum += weight * treatment_diff

    if abs(treatment_sum) <= DENOMINATOR_ATOL:
        raise ZeroDenominatorError("Treatment uptake does not differ between assignment arms within groups.")
    return float(outcome_sum / treatment_sum)
