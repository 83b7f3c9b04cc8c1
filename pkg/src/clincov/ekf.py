"""Navigation filter covariance algebra: Riccati propagation and Kalman update.

Every function accepts a leading batch axis so that a Monte Carlo ensemble can
run one filter per run in a single call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

COND_LIMIT = 1e12


class SingularInnovationError(np.linalg.LinAlgError):
    pass


def symmetrize(P: NDArray) -> NDArray:
    return 0.5 * (P + np.swapaxes(P, -1, -2))


@dataclass
class FilterState:
    x_hat: NDArray
    P_hat: NDArray


def riccati_rhs(P: NDArray, F_hat: NDArray, B_hat: NDArray, Q_hat: NDArray) -> NDArray:
    """Right-hand side F P + P F^T + B Q B^T of the continuous Riccati equation."""
    FP = F_hat @ P
    return symmetrize(FP + np.swapaxes(FP, -1, -2) + B_hat @ Q_hat @ np.swapaxes(B_hat, -1, -2))


def propagate_covariance(P: NDArray, F_start: NDArray, F_end: NDArray, B_hat: NDArray,
                         Q_hat: NDArray, dt: float) -> NDArray:
    """
    One RK4 step of the Riccati equation.

    The design matrix is taken at the start of the step, at the end of the
    step, and as their average at the two midpoint stages.
    """
    F_mid = 0.5 * (F_start + F_end)
    k1 = riccati_rhs(P, F_start, B_hat, Q_hat)
    k2 = riccati_rhs(P + 0.5 * dt * k1, F_mid, B_hat, Q_hat)
    k3 = riccati_rhs(P + 0.5 * dt * k2, F_mid, B_hat, Q_hat)
    k4 = riccati_rhs(P + dt * k3, F_end, B_hat, Q_hat)
    return symmetrize(P + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))


def kalman_gain(P_minus: NDArray, H_hat: NDArray, R_hat: NDArray) -> NDArray:
    """
    K = P H^T (H P H^T + R)^-1.

    Raises
    ------
    SingularInnovationError
        If the innovation covariance has condition number above 1e12.
    """
    Ht = np.swapaxes(H_hat, -1, -2)
    PHt = P_minus @ Ht
    W = symmetrize(H_hat @ PHt + R_hat)
    eig = np.linalg.eigvalsh(W)
    lo, hi = eig[..., 0], eig[..., -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(lo > 0, hi / lo, np.inf)
    if np.any(cond > COND_LIMIT):
        raise SingularInnovationError(
            f"innovation covariance is singular (condition estimate {np.max(cond):.3g})")
    # K W = P H^T with W symmetric, so K^T = W^-1 (P H^T)^T
    return np.swapaxes(np.linalg.solve(W, np.swapaxes(PHt, -1, -2)), -1, -2)


def joseph_update(P_minus: NDArray, K: NDArray, H_hat: NDArray, R_hat: NDArray) -> NDArray:
    """(I - K H) P (I - K H)^T + K R K^T."""
    n = P_minus.shape[-1]
    A = np.eye(n) - K @ H_hat
    return symmetrize(A @ P_minus @ np.swapaxes(A, -1, -2) + K @ R_hat @ np.swapaxes(K, -1, -2))


def state_update(x_hat_minus: NDArray, K: NDArray, z: NDArray, z_pred: NDArray) -> NDArray:
    return x_hat_minus + (K @ (z - z_pred)[..., None])[..., 0]
