"""Stochastic reconfiguration: natural-gradient updates delta = -eta (S+eps)^-1 F.

The force F and quantum geometric tensor S are covariance estimators over
one shared sample set.  S is exposed matrix-free (the parameter count makes
the dense matrix wasteful) with an explicit dense mode for small systems
and tests.  Parameters are treated as real throughout; complex network
outputs enter via separate real and imaginary weight arrays upstream.
"""

from __future__ import annotations

import dataclasses
import warnings
from typing import Callable

import numpy as np
from jax.flatten_util import ravel_pytree

from .errors import EmptyAccumulatorError

# learning rate by density parameter; nearest key wins on lookup
LEARNING_RATE_TABLE = {
    1.0: 0.05,
    2.0: 0.05,
    5.0: 0.05,
    10.0: 0.1,
    20.0: 0.1,
    50.0: 0.5,
    100.0: 1.0,
    110.0: 2.5,
}


def learning_rate_for_rs(rs: float) -> float:
    keys = sorted(LEARNING_RATE_TABLE)
    nearest = min(keys, key=lambda k: (abs(k - rs), k))
    return LEARNING_RATE_TABLE[nearest]


def learning_rate_with_warning(rs: float) -> tuple[float, str | None]:
    """Table lookup plus a human-readable note when rs is not tabulated."""
    eta = learning_rate_for_rs(rs)
    if rs in LEARNING_RATE_TABLE:
        return eta, None
    nearest = min(sorted(LEARNING_RATE_TABLE), key=lambda k: (abs(k - rs), k))
    return eta, (
        f"rs={rs:g} has no learning-rate table entry; using eta={eta:g}"
        f" from the nearest tabulated density rs={nearest:g}"
    )


@dataclasses.dataclass(frozen=True)
class SRConfig:
    learning_rate: float | None = None
    diagonal_shift: float = 1e-4
    cg_tol: float = 1e-6
    cg_max_iter: int = 1000
    explicit: bool = False

    def __post_init__(self):
        if self.diagonal_shift <= 0.0:
            raise ValueError(
                f"diagonal_shift must be positive, got {self.diagonal_shift}"
            )

    def resolve_learning_rate(self, rs: float) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return learning_rate_for_rs(rs)


@dataclasses.dataclass
class EstimatorAccumulator:
    """Local energies and parameter log-derivatives from one sample set."""

    local_energies: np.ndarray
    log_derivatives: np.ndarray

    def __post_init__(self):
        self.local_energies = np.asarray(self.local_energies)
        self.log_derivatives = np.asarray(self.log_derivatives)
        if self.log_derivatives.ndim != 2:
            raise ValueError("log_derivatives must be (n_samples, n_params)")
        if self.local_energies.shape[0] != self.log_derivatives.shape[0]:
            raise ValueError("energy and derivative sample counts differ")

    @property
    def n_samples(self) -> int:
        return self.local_energies.shape[0]

    @property
    def n_params(self) -> int:
        return self.log_derivatives.shape[1]

    def _require_samples(self):
        if self.n_samples < 2:
            raise EmptyAccumulatorError(
                f"need at least 2 samples, have {self.n_samples}"
            )

    def centered(self) -> tuple[np.ndarray, np.ndarray]:
        self._require_samples()
        o_c = self.log_derivatives - self.log_derivatives.mean(axis=0)
        e_c = self.local_energies - self.local_energies.mean()
        return o_c, e_c


def estimate_force(acc: EstimatorAccumulator) -> np.ndarray:
    """F = 2 Re[<conj(O) E> - <conj(O)><E>], real vector over parameters."""
    o_c, e_c = acc.centered()
    return 2.0 * np.real(o_c.conj().T @ e_c) / acc.n_samples


def estimate_qgt(
    acc: EstimatorAccumulator, explicit: bool = False
) -> np.ndarray | Callable[[np.ndarray], np.ndarray]:
    """S = Re[<conj(O) O^T> - <conj(O)><O>^T] as dense matrix or matvec."""
    o_c, _ = acc.centered()
    n = acc.n_samples
    if explicit:
        return np.real(o_c.conj().T @ o_c) / n

    def matvec(v: np.ndarray) -> np.ndarray:
        return np.real(o_c.conj().T @ (o_c @ v)) / n

    return matvec


@dataclasses.dataclass
class CGResult:
    solution: np.ndarray
    converged: bool
    n_iterations: int
    residual_norm: float


def conjugate_gradient(
    matvec: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    tol: float = 1e-6,
    max_iter: int = 1000,
    callback: Callable[[np.ndarray], None] | None = None,
) -> CGResult:
    """Solve A x = b for symmetric positive definite A.

    Non-convergence returns the best iterate seen (smallest residual) with a
    warning rather than failing, since the SR update tolerates inexactness.
    """
    b_norm = float(np.linalg.norm(b))
    x = np.zeros_like(b)
    if b_norm == 0.0:
        return CGResult(x, True, 0, 0.0)
    r = b.copy()
    p = r.copy()
    rs_old = float(r @ r)
    best_x, best_res = x.copy(), np.sqrt(rs_old)
    for iteration in range(1, max_iter + 1):
        ap = matvec(p)
        denom = float(p @ ap)
        if not np.isfinite(denom):
            # NaN/inf from the operator: poison the solution so the caller
            # aborts the update instead of silently using a stale iterate
            return CGResult(np.full_like(b, np.nan), False, iteration, np.inf)
        if denom <= 0.0:
            break
        alpha = rs_old / denom
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(r @ r)
        if callback is not None:
            callback(x)
        res = np.sqrt(rs_new)
        if res < best_res:
            best_x, best_res = x.copy(), res
        if res <= tol * b_norm:
            return CGResult(x, True, iteration, res)
        p = r + (rs_new / rs_old) * p
        rs_old = rs_new
    warnings.warn(
        f"conjugate gradient not converged after {max_iter} iterations "
        f"(residual {best_res:.3e}, target {tol * b_norm:.3e}); "
        "using best iterate",
        stacklevel=2,
    )
    return CGResult(best_x, False, max_iter, best_res)


@dataclasses.dataclass
class SRUpdateInfo:
    force_norm: float
    solver: CGResult | None
    aborted: bool = False


def sr_update(
    params,
    force: np.ndarray,
    qgt,
    config: SRConfig,
    learning_rate: float,
):
    """params - eta x with (S + eps I) x = F; NaN solutions keep old params."""
    eps = config.diagonal_shift
    if isinstance(qgt, np.ndarray):
        shifted = qgt + eps * np.eye(qgt.shape[0])
        x = np.linalg.solve(shifted, force)
        solver = CGResult(x, True, 0, 0.0)
    else:
        solver = conjugate_gradient(
            lambda v: qgt(v) + eps * v,
            force,
            tol=config.cg_tol,
            max_iter=config.cg_max_iter,
        )
        x = solver.solution
    info = SRUpdateInfo(force_norm=float(np.linalg.norm(force)), solver=solver)
    if not np.all(np.isfinite(x)):
        info.aborted = True
        return params, info
    flat, unravel = ravel_pytree(params)
    new_flat = np.asarray(flat) - learning_rate * x
    return unravel(new_flat), info
