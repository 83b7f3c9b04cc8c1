"""
Closed-loop linear covariance analysis.

The truth, navigation and controller dispersions are stacked into one
augmented state whose covariance is propagated along a nominal trajectory with
a Lyapunov equation and updated at each filter measurement.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from . import _kernels
from .ekf import symmetrize
from .simulation import Nominal
from .sysmodel import CoefficientSet, NoiseSpec
from .uav import UAV

COND_LIMIT = 1e12
# RK4 substeps per nominal step for the augmented covariance; the rate loop
# has a pole near -56/s, too fast for a single 0.01 s step to stay PSD.
SUBSTEPS = 4


class IllConditionedCoupling(np.linalg.LinAlgError):
    pass


class CovarianceError(FloatingPointError):
    pass


def _inv_checked(M: NDArray, name: str) -> NDArray:
    cond = np.linalg.cond(M)
    if np.any(~np.isfinite(cond)) or np.any(cond > COND_LIMIT):
        raise IllConditionedCoupling(
            f"{name} inverse is ill-conditioned (condition {np.max(cond):.3g}); the "
            "control/measurement algebraic loop has the potential to become ill-conditioned")
    return np.linalg.inv(M)


def coupling_matrices(coeffs: CoefficientSet) -> tuple[NDArray, NDArray]:
    """
    Algebraic-loop resolvents between control and continuous measurements.

    ``S = (I - G_x* N_y C_u - G_y C_u)^-1`` and
    ``T = (I - C_u G_x* N_y - C_u G_y)^-1``.
    """
    GN = coeffs.G_xstar @ coeffs.N_y
    nu = coeffs.F_u.shape[-1]
    ny = coeffs.C_x.shape[-2]
    S = _inv_checked(np.eye(nu) - GN @ coeffs.C_u - coeffs.G_y @ coeffs.C_u, "S")
    T = _inv_checked(np.eye(ny) - coeffs.C_u @ GN - coeffs.C_u @ coeffs.G_y, "T")
    return S, T


def assemble_continuous(coeffs: CoefficientSet, S: NDArray, T: NDArray
                        ) -> tuple[NDArray, NDArray, NDArray]:
    """Augmented dynamics, continuous-measurement noise and process noise matrices."""
    c = coeffs
    GN = c.G_xstar @ c.N_y
    ctrl_x = GN @ c.C_x + c.G_y @ c.C_x
    ctrl_xhat = c.G_xhat + c.G_xstar @ c.N_xhat
    FuS = c.F_u @ S
    FyT = c.Fhat_y @ T
    FcNT = c.Fcheck_xstar @ c.N_y @ T

    F_xx = c.F_x + FuS @ ctrl_x
    F_xxh = FuS @ ctrl_xhat
    F_xxc = FuS @ c.G_xcheck
    F_xhx = FyT @ c.C_x
    F_xhxh = c.Fhat_xhat + FyT @ c.C_u @ c.G_xhat + FyT @ c.C_u @ c.G_xstar @ c.N_xhat
    F_xhxc = FyT @ c.C_u @ c.G_xcheck
    F_xcx = FcNT @ c.C_x
    F_xcxh = (c.Fcheck_xhat + c.Fcheck_xstar @ c.N_xhat
              + FcNT @ (c.C_u @ c.G_xhat + c.C_u @ c.G_xstar @ c.N_xhat))
    F_xcxc = FcNT @ c.C_u @ c.G_xcheck

    F_cal = np.concatenate([
        np.concatenate([F_xx, F_xxh, F_xxc], axis=-1),
        np.concatenate([F_xhx, F_xhxh, F_xhxc], axis=-1),
        np.concatenate([F_xcx, F_xcxh, F_xcxc], axis=-1),
    ], axis=-2)
    G_cal = np.concatenate([FuS @ (GN + c.G_y), FyT, FcNT], axis=-2)
    nh, nc = c.Fhat_xhat.shape[-1], c.Fcheck_xhat.shape[-2]
    batch = c.B.shape[:-2]
    nw = c.B.shape[-1]
    W_cal = np.concatenate([c.B, np.zeros(batch + (nh, nw)), np.zeros(batch + (nc, nw))], axis=-2)
    return F_cal, G_cal, W_cal


def assemble_update(K: NDArray, H_x: NDArray, H_hat_xhat: NDArray, n_check: int = 2
                    ) -> tuple[NDArray, NDArray]:
    """Augmented update matrices for a navigation update with gain ``K``."""
    K = np.asarray(K, dtype=float)
    batch = K.shape[:-2]
    nh, nz = K.shape[-2:]
    n = H_x.shape[-1]
    N = n + nh + n_check
    A = np.broadcast_to(np.eye(N), batch + (N, N)).copy()
    A[..., n:n + nh, :n] = K @ H_x
    A[..., n:n + nh, n:n + nh] = np.eye(nh) - K @ H_hat_xhat
    B = np.zeros(batch + (N, nz))
    B[..., n:n + nh, :] = K
    return A, B


def process_noise(G_cal: NDArray, W_cal: NDArray, noise: NoiseSpec) -> NDArray:
    GT = np.swapaxes(G_cal, -1, -2)
    WT = np.swapaxes(W_cal, -1, -2)
    return symmetrize(G_cal @ noise.S_eta @ GT + W_cal @ noise.S_w @ WT)


def _lyap(C, F, Q):
    FC = F @ C
    return symmetrize(FC + FC.T + Q)


def propagate(C_A: NDArray, F_cal: NDArray, G_cal: NDArray, W_cal: NDArray,
              noise: NoiseSpec, dt: float, F_end: NDArray | None = None,
              Q_end: NDArray | None = None) -> NDArray:
    """
    One RK4 step of ``dC/dt = F C + C F^T + G S_eta G^T + W S_w W^T``.

    ``F_end``/``Q_end`` give the system at the end of the step; midpoint
    stages use the average. Without them the system is held constant.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    Q0 = process_noise(G_cal, W_cal, noise)
    F1 = F_cal if F_end is None else F_end
    Q1 = Q0 if Q_end is None else Q_end
    Fm, Qm = 0.5 * (F_cal + F1), 0.5 * (Q0 + Q1)
    k1 = _lyap(C_A, F_cal, Q0)
    k2 = _lyap(C_A + 0.5 * dt * k1, Fm, Qm)
    k3 = _lyap(C_A + 0.5 * dt * k2, Fm, Qm)
    k4 = _lyap(C_A + dt * k3, F1, Q1)
    out = symmetrize(C_A + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
    if not np.all(np.isfinite(out)):
        raise CovarianceError("augmented covariance became non-finite")
    return out


def update(C_A: NDArray, A_k: NDArray, B_k: NDArray, R_nu: NDArray) -> NDArray:
    return symmetrize(A_k @ C_A @ A_k.T + B_k @ R_nu @ B_k.T)


def extract_dispersion(C_A: NDArray, n: int = 7) -> NDArray:
    """Truth-state dispersion covariance (top-left block)."""
    return np.asarray(C_A)[..., :n, :n].copy()


def estimation_error_selector(M_x: NDArray, n_hat: int = 4, n_check: int = 2) -> NDArray:
    """Rows ``[-M_x  I  0]`` restricted to the navigation rows of ``M_x``."""
    M = np.asarray(M_x, dtype=float)[:n_hat, :]
    return np.hstack([-M, np.eye(n_hat), np.zeros((n_hat, n_check))])


def extract_estimation_error(C_A: NDArray, M_x: NDArray, n_hat: int = 4) -> NDArray:
    """True estimation-error covariance of ``x_hat - m(x)``."""
    L = estimation_error_selector(M_x, n_hat, C_A.shape[-1] - M_x.shape[-1] - n_hat)
    return L @ C_A @ L.T


def initial_covariance(D0: NDArray, P0: NDArray, M_x: NDArray, n_check: int = 2) -> NDArray:
    """
    Augmented covariance for ``dx ~ N(0, D0)``, ``dx_hat = M dx + e`` with
    ``e ~ N(0, P0)`` independent, and zero controller dispersion.
    """
    D0 = np.asarray(D0, dtype=float)
    P0 = np.asarray(P0, dtype=float)
    n, nh = D0.shape[0], P0.shape[0]
    M = np.asarray(M_x, dtype=float)[:nh, :]
    C = np.zeros((n + nh + n_check,) * 2)
    C[:n, :n] = D0
    C[n:n + nh, :n] = M @ D0
    C[:n, n:n + nh] = (M @ D0).T
    C[n:n + nh, n:n + nh] = M @ D0 @ M.T + P0
    return C


@dataclass
class LinCovSeries:
    """Time series produced by a LinCov run."""

    t: NDArray
    C_A: NDArray
    P_hat: NDArray
    n: int = 7
    n_hat: int = 4

    @property
    def D_true(self) -> NDArray:
        return extract_dispersion(self.C_A, self.n)

    @property
    def P_true(self) -> NDArray:
        M = np.zeros((self.n, self.n))
        M[:self.n_hat, :self.n_hat] = np.eye(self.n_hat)
        return extract_estimation_error(self.C_A, M, self.n_hat)

    def dispersion_sigma(self) -> NDArray:
        return np.sqrt(np.clip(np.diagonal(self.D_true, axis1=-2, axis2=-1), 0, None))

    def estimation_sigma(self) -> NDArray:
        return np.sqrt(np.clip(np.diagonal(self.P_true, axis1=-2, axis2=-1), 0, None))

    def filter_sigma(self) -> NDArray:
        return np.sqrt(np.clip(np.diagonal(self.P_hat, axis1=-2, axis2=-1), 0, None))


def filter_agreement(series: LinCovSeries, transient: float = 0.0) -> NDArray:
    """
    Largest ``|sigma_true / sigma_hat - 1|`` per navigation state after
    ``transient`` seconds: how far the filter's own covariance is from the
    actual estimation-error covariance.
    """
    keep = series.t - series.t[0] >= transient
    ratio = series.estimation_sigma()[keep] / np.maximum(series.filter_sigma()[keep], 1e-300)
    return np.abs(ratio - 1.0).max(axis=0)


def system_matrices(model: UAV, nominal: Nominal) -> dict[str, NDArray]:
    """Start- and end-of-step augmented matrices for every step of ``nominal``."""
    r, psi_q = nominal.segment_geometry()
    x, xh = nominal.x, nominal.x_hat
    # end-of-step evaluation keeps the segment flown during the step
    coeff_start = model.coefficient_set(x[:-1], xh[:-1], r[:-1], psi_q[:-1])
    coeff_end = model.coefficient_set(x[1:], xh[1:], r[:-1], psi_q[:-1])
    out = {}
    for tag, coeffs in (("start", coeff_start), ("end", coeff_end)):
        S, T = coupling_matrices(coeffs)
        F_cal, G_cal, W_cal = assemble_continuous(coeffs, S, T)
        out["F_" + tag] = np.ascontiguousarray(F_cal)
        out["Q_" + tag] = np.ascontiguousarray(process_noise(G_cal, W_cal, model.noise))
    return out


def run(model: UAV, nominal: Nominal, C0: NDArray, noise: NoiseSpec | None = None,
        stride: int = 1, substeps: int = SUBSTEPS) -> LinCovSeries:
    """
    Propagate and update the augmented covariance along ``nominal``.

    Updates are applied wherever the nominal filter took a measurement, using
    the nominal Kalman gains. Each nominal step is covered by ``substeps`` RK4
    steps of the Lyapunov equation.
    """
    if substeps < 1:
        raise ValueError("substeps must be at least 1")
    if noise is not None:
        model = model.with_noise(noise)
    noise = model.noise
    n_pts = nominal.t.size
    if n_pts < 2:
        series = np.asarray(C0, dtype=float)[None].copy()
        return LinCovSeries(nominal.t.copy(), series, nominal.P_hat.copy())
    mats = system_matrices(model, nominal)
    H_x = np.hstack([np.eye(3), np.zeros((3, 4))])
    A, B = assemble_update(nominal.K, H_x, model.H_hat)
    BRB = np.ascontiguousarray(B @ noise.R_nu @ np.swapaxes(B, -1, -2))
    C = _kernels.lincov_series(np.asarray(C0, dtype=float).copy(), mats["F_start"], mats["F_end"],
                               mats["Q_start"], mats["Q_end"], nominal.gps_update,
                               np.ascontiguousarray(A), BRB, float(nominal.dt),
                               int(substeps))
    bad = ~np.all(np.isfinite(C), axis=(1, 2))
    if np.any(bad):
        k = int(np.argmax(bad))
        raise CovarianceError(f"augmented covariance non-finite at t={nominal.t[k]:.2f}s")
    idx = np.arange(0, n_pts, stride)
    if idx[-1] != n_pts - 1:
        idx = np.append(idx, n_pts - 1)
    return LinCovSeries(nominal.t[idx], C[idx], nominal.P_hat[idx])


def covariance_health(C_A: NDArray, sym_tol: float = 1e-10, psd_rel: float = 1e-8) -> tuple[bool, float]:
    """
    Check symmetry and positive semidefiniteness of one or many covariances.

    Returns the pass flag and the worst ``min_eig / trace`` ratio seen.
    """
    C = np.asarray(C_A, dtype=float)
    if C.ndim == 2:
        C = C[None]
    scale = np.maximum(np.abs(C).max(axis=(1, 2)), 1e-300)
    asym = np.abs(C - np.swapaxes(C, 1, 2)).max(axis=(1, 2)) / scale
    eig_min = np.linalg.eigvalsh(symmetrize(C))[:, 0]
    tr = np.trace(C, axis1=1, axis2=2)
    ratio = np.where(tr > 0, eig_min / np.where(tr > 0, tr, 1.0), np.where(eig_min >= 0, 0.0, -np.inf))
    ok = bool(np.all(asym <= sym_tol) and np.all(ratio >= -psd_rel))
    return ok, float(ratio.min())


STATE_NAMES = ("p_n", "p_e", "V_g", "psi", "omega", "u_w", "T_dist")
NAV_NAMES = ("p_n_hat", "p_e_hat", "V_g_hat", "psi_hat")


def write_csv(path: str | Path, nominal: Nominal, series: LinCovSeries) -> None:
    """Time, nominal truth states, and 3-sigma of D_true, P_true and P_hat diagonals."""
    idx = np.searchsorted(nominal.t, series.t - 1e-9 * nominal.dt)
    header = (["time"] + [f"nom_{s}" for s in STATE_NAMES]
              + [f"D3s_{s}" for s in STATE_NAMES]
              + [f"Ptrue3s_{s}" for s in NAV_NAMES]
              + [f"Phat3s_{s}" for s in NAV_NAMES])
    cols = np.column_stack([series.t, nominal.x[idx], 3 * series.dispersion_sigma(),
                            3 * series.estimation_sigma(), 3 * series.filter_sigma()])
    write_table(path, header, cols)


def write_table(path: str | Path, header, rows: NDArray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_number(v) for v in row])


def format_number(v) -> str:
    return f"{float(v):.9g}"
