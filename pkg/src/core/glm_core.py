"""
Weighted generalized-linear-model solvers and the scalar kernels used by every EM M-step.

All functions are pure: they read their inputs, allocate their outputs and keep no state,
so they can be called from several threads at once.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.special import expit as _expit
from scipy.special import log_softmax as _log_softmax
from scipy.special import softmax as _softmax
from scipy.stats import norm

from core.config import SolverConfig
from core.errors import DegenerateDataError, DomainError, NonFiniteError, SingularSystemError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class FitResult:
    """
    Outcome of a weighted GLM fit.

    Attributes:
        coefficients (np.ndarray): Fitted coefficients; a vector for binary/linear fits and a
            `(K-1, cols)` matrix for the multinomial fit (reference class pinned at zero).
        converged (bool): Whether the stopping rule was met before the iteration cap.
        iterations (int): Newton iterations performed (1 for least squares).
        objective (float): Final weighted log-likelihood, or weighted SSE for least squares.
        objective_path (Tuple[float, ...]): Objective after every accepted step, starting point included.
    """

    coefficients: np.ndarray
    converged: bool
    iterations: int
    objective: float
    objective_path: Tuple[float, ...] = field(default=())


def expit(t):
    """
    Logistic function clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]`.

    Args:
        t (ArrayLike): Log-odds, scalar or array.

    Returns:
        Probabilities strictly inside (0, 1).

    Example:
        >>> expit(0.0)
        0.5
    """
    return np.clip(_expit(np.asarray(t, dtype=float)), PROB_FLOOR, 1.0 - PROB_FLOOR)


def softmax(logits, axis: int = -1) -> np.ndarray:
    """
    Normalized exponentials along `axis`, computed with max-subtraction.

    The output is not clamped so that rows sum to one; use `clip_probabilities` before taking logs.
    """
    return _softmax(np.asarray(logits, dtype=float), axis=axis)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    """Logarithm of `softmax`, finite wherever the logits are, even when `softmax` underflows to zero."""
    return _log_softmax(np.asarray(logits, dtype=float), axis=axis)


def clip_probabilities(p) -> np.ndarray:
    """Floor/cap probabilities before they enter a log-likelihood."""
    return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)


def gaussian_loglik(y, mu, sigma2):
    """
    Log-density of Normal(mu, sigma2) evaluated at y (element-wise, broadcasting).

    Raises:
        DomainError: If any variance is not strictly positive.
    """
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(~(sigma2 > 0)):
        raise DomainError(f"Variance must be positive, got {sigma2}.")
    return norm.logpdf(y, loc=mu, scale=np.sqrt(sigma2))


def _check_inputs(X: np.ndarray, *vectors: np.ndarray) -> None:
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise DomainError(f"Design matrix must be 2-D with at least one row and column, got {X.shape}.")
    for vector in vectors:
        if vector.shape[0] != X.shape[0]:
            raise DomainError(f"Row mismatch: design has {X.shape[0]} rows, vector has {vector.shape[0]}.")
    for array in (X, *vectors):
        if not np.all(np.isfinite(array)):
            raise NonFiniteError("Inputs contain NaN or infinite values.")


def _check_weights(w: np.ndarray) -> None:
    if np.any(w < 0):
        raise DomainError("Weights must be non-negative.")
    if not np.any(w > 0):
        raise DegenerateDataError("At least one weight must be positive.")


def _solve_information(info: np.ndarray, grad: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    """Newton direction `info^{-1} grad`, with a single ridge retry for ill-conditioned systems."""
    if not (np.all(np.isfinite(info)) and np.all(np.isfinite(grad))):
        raise NonFiniteError("Information matrix or gradient is not finite.")

    cols = info.shape[0]
    if np.linalg.cond(info) > cfg.cond_limit:
        ridge = cfg.ridge_scale * np.trace(info) / cols
        info = info + ridge * np.eye(cols)
        if not ridge > 0 or np.linalg.cond(info) > cfg.cond_limit:
            raise SingularSystemError("Weighted information matrix is singular even after the ridge retry.")

    try:
        return linalg.solve(info, grad, assume_a="sym")
    except linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc


def _newton_ascent(
    objective: Callable[[np.ndarray], float],
    derivatives: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]],
    start: np.ndarray,
    cfg: SolverConfig,
) -> FitResult:
    """
    Maximize a concave objective by Newton steps with step-halving.

    A step is accepted only when it does not lower the objective, so the recorded path is
    non-decreasing. Stops once the relative gain drops below `cfg.tol`.
    """
    beta = np.array(start, dtype=float)
    current = objective(beta)
    if not np.isfinite(current):
        raise NonFiniteError("Objective is not finite at the starting point.")

    path = [current]
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iter + 1):
        grad, info = derivatives(beta)
        step = _solve_information(info, grad, cfg)

        scale = 1.0
        candidate, value = beta, -np.inf
        for _ in range(cfg.max_halvings + 1):
            candidate = beta + scale * step
            value = objective(candidate)
            if np.isfinite(value) and value >= current:
                break
            scale *= 0.5
        else:
            # no ascent left at machine precision; converged if the Newton decrement agrees
            converged = bool(grad @ step <= cfg.tol * max(1.0, abs(current)))
            break

        gain = value - current
        beta, current = candidate, value
        path.append(current)
        if gain <= cfg.tol * max(1.0, abs(current)):
            converged = True
            break

    return FitResult(
        coefficients=beta,
        converged=converged,
        iterations=iterations,
        objective=float(current),
        objective_path=tuple(path),
    )


def fit_weighted_logistic(
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    cfg: Optional[SolverConfig] = None,
    init: Optional[np.ndarray] = None,
) -> FitResult:
    """
    Weighted logistic regression by IRLS.

    Maximizes `sum_i w_i [y_i ln expit(b'x_i) + (1 - y_i) ln(1 - expit(b'x_i))]`.

    Args:
        X (np.ndarray): `(n, cols)` design matrix.
        y (np.ndarray): Targets in [0, 1].
        w (np.ndarray): Non-negative weights, at least one positive.
        cfg (Optional[SolverConfig]): Solver settings; defaults to `SolverConfig()`.
        init (Optional[np.ndarray]): Warm start; zeros by default.

    Returns:
        FitResult: Coefficient vector and convergence record.

    Raises:
        NonFiniteError: If the inputs contain NaN or infinite values.
        SingularSystemError: If the information matrix stays singular after the ridge retry.

    Example:
        >>> X = np.ones((4, 1))
        >>> fit_weighted_logistic(X, np.array([1, 1, 1, 0]), np.ones(4)).coefficients
        array([1.09861229])
    """
    cfg = cfg or SolverConfig()
    X, y, w = (np.asarray(a, dtype=float) for a in (X, y, w))
    _check_inputs(X, y, w)
    _check_weights(w)
    if np.any((y < 0) | (y > 1)):
        raise DomainError("Logistic targets must lie in [0, 1].")

    def objective(beta: np.ndarray) -> float:
        p = expit(X @ beta)
        return float(np.sum(w * (y * np.log(p) + (1.0 - y) * np.log1p(-p))))

    def derivatives(beta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        p = expit(X @ beta)
        grad = X.T @ (w * (y - p))
        info = (X * (w * p * (1.0 - p))[:, None]).T @ X
        return grad, info

    start = np.zeros(X.shape[1]) if init is None else init
    return _newton_ascent(objective, derivatives, start, cfg)


def fit_weighted_multinomial(
    X: np.ndarray,
    targets: np.ndarray,
    cfg: Optional[SolverConfig] = None,
    init: Optional[np.ndarray] = None,
    weights: Optional[np.ndarray] = None,
) -> FitResult:
    """
    Multinomial logistic regression on soft targets, reference-category coded.

    Maximizes `sum_i m_i sum_s h_is ln softmax_s(delta'x_i)` where the last class has its
    coefficients pinned at zero and `m_i` are optional row weights.

    Args:
        X (np.ndarray): `(n, cols)` design matrix.
        targets (np.ndarray): `(n, K)` probability rows, each summing to one.
        cfg (Optional[SolverConfig]): Solver settings.
        init (Optional[np.ndarray]): Warm start of shape `(K-1, cols)`.
        weights (Optional[np.ndarray]): Row weights, ones by default.

    Returns:
        FitResult: `(K-1, cols)` coefficient matrix and convergence record.

    Raises:
        DomainError: If K < 2 or a target row does not sum to one.
        NonFiniteError: If the inputs contain NaN or infinite values.
        SingularSystemError: If the information matrix stays singular after the ridge retry.
    """
    cfg = cfg or SolverConfig()
    X = np.asarray(X, dtype=float)
    targets = np.asarray(targets, dtype=float)
    weights = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    _check_inputs(X, targets, weights)
    _check_weights(weights)

    n_classes = targets.shape[1] if targets.ndim == 2 else 0
    if n_classes < 2:
        raise DomainError("Multinomial fit needs at least two classes.")
    if np.max(np.abs(targets.sum(axis=1) - 1.0)) > 1e-8 or np.any(targets < 0):
        raise DomainError("Every target row must be a probability vector.")

    free, cols = n_classes - 1, X.shape[1]
    weighted_targets = targets * weights[:, None]

    def probabilities(flat: np.ndarray) -> np.ndarray:
        logits = np.column_stack([X @ flat.reshape(free, cols).T, np.zeros(X.shape[0])])
        return softmax(logits, axis=1)

    def objective(flat: np.ndarray) -> float:
        return float(np.sum(weighted_targets * np.log(clip_probabilities(probabilities(flat)))))

    def derivatives(flat: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        p = probabilities(flat)[:, :free]
        grad = ((weighted_targets[:, :free] - weights[:, None] * p).T @ X).ravel()
        info = np.empty((free * cols, free * cols))
        for k in range(free):
            for m in range(free):
                curvature = weights * p[:, k] * ((k == m) - p[:, m])
                info[k * cols:(k + 1) * cols, m * cols:(m + 1) * cols] = (X * curvature[:, None]).T @ X
        return grad, info

    start = np.zeros(free * cols) if init is None else np.asarray(init, dtype=float).ravel()
    result = _newton_ascent(objective, derivatives, start, cfg)
    return FitResult(
        coefficients=result.coefficients.reshape(free, cols),
        converged=result.converged,
        iterations=result.iterations,
        objective=result.objective,
        objective_path=result.objective_path,
    )


def fit_weighted_least_squares(
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    cfg: Optional[SolverConfig] = None,
) -> FitResult:
    """
    Weighted least squares, `argmin_b sum_i w_i (y_i - b'x_i)^2`.

    Solved through the square-root-weighted system with an orthogonal factorization, which
    satisfies the weighted normal equations without forming `X'WX`.

    Raises:
        SingularSystemError: If the weighted design is rank deficient.
    """
    X, y, w = (np.asarray(a, dtype=float) for a in (X, y, w))
    _check_inputs(X, y, w)
    _check_weights(w)

    root_w = np.sqrt(w)
    try:
        coefficients, _, rank, _ = linalg.lstsq(X * root_w[:, None], y * root_w)
    except linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc
    if rank < X.shape[1]:
        raise SingularSystemError(f"Weighted design has rank {rank} < {X.shape[1]} columns.")

    sse = float(np.sum(w * (y - X @ coefficients) ** 2))
    return FitResult(coefficients=coefficients, converged=True, iterations=1, objective=sse, objective_path=(sse,))
