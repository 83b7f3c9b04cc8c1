"""
Planar UAV with drag, Dryden axial gust and Gauss-Markov disturbance torque,
IMU model-replacement navigation, straight-line guidance and PI/PID control.

Truth state ``x = [p_n, p_e, V_g, psi, omega, u_w, T_dist]``, navigation state
``x_hat = [p_n, p_e, V_g, psi]``, controller state ``x_check = [sigma_F, sigma_T]``.
All model functions operate on the last axis so they accept single vectors or
batches of runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .sysmodel import CoefficientSet, Dimensions, NoiseSpec, SystemFunctions, wrap_angle

N_TRUTH, N_NAV, N_CTRL = 7, 4, 2
N_AUG = N_TRUTH + N_NAV + N_CTRL
DIMS = Dimensions(n=7, n_hat=4, n_check=2, n_u=2, n_y=2, n_z=3, n_w=2)
IDX_PSI = 3
IDX_PSI_HAT = N_TRUTH + 3


@dataclass(frozen=True)
class VehicleParams:
    V_bar: float = 35.0
    rho: float = 1.2682
    C_D0: float = 0.03
    S_p: float = 0.55
    m: float = 25.0
    J: float = 1.759

    @property
    def drag_coeff(self) -> float:
        """rho * C_D0 * S_p."""
        return self.rho * self.C_D0 * self.S_p


@dataclass(frozen=True)
class DisturbanceParams:
    sigma_u: float = 1.06
    L_u: float = 200.0
    sigma_T: float = 0.0033
    tau_T: float = 2.0


@dataclass(frozen=True)
class SensorParams:
    """IMU random walks in datasheet units, GPS-like noise in SI units."""

    vrw: float = 0.02  # m/s/sqrt(hr)
    arw: float = 16.7  # deg/sqrt(hr)
    sigma_pos: float = 1.0
    sigma_vel: float = 0.033

    @property
    def S_a(self) -> float:
        """Accelerometer white-noise PSD, (m/s^2)^2/Hz."""
        return self.vrw**2 / 3600.0

    @property
    def S_omega(self) -> float:
        """Gyro white-noise PSD, rad^2/s."""
        return np.deg2rad(self.arw) ** 2 / 3600.0


@dataclass(frozen=True)
class ControlParams:
    P_F: float = 80.0
    I_F: float = 50.0
    P_T: float = 6.38
    I_T: float = 10.0
    D_T: float = 111.0
    psi_inf: float = np.pi / 2
    k_path: float = 0.05


@dataclass(frozen=True)
class UAVParams:
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    disturbance: DisturbanceParams = field(default_factory=DisturbanceParams)
    sensor: SensorParams = field(default_factory=SensorParams)
    control: ControlParams = field(default_factory=ControlParams)

    def __post_init__(self):
        for group in (self.vehicle, self.disturbance, self.sensor, self.control):
            for name, value in vars(group).items():
                if not value > 0:
                    raise ValueError(f"{type(group).__name__}.{name} must be positive")

    def noise(self) -> NoiseSpec:
        """Truth noise: unit-PSD gust driver, torque PSD giving stationary std sigma_T."""
        d, s = self.disturbance, self.sensor
        return NoiseSpec(
            S_w=np.diag([1.0, 2.0 * d.sigma_T**2 / d.tau_T]),
            S_eta=np.diag([s.S_a, s.S_omega]),
            R_nu=np.diag([s.sigma_pos**2, s.sigma_pos**2, s.sigma_vel**2]),
        )

    def trim_force(self, V_g: float | None = None, u_w: float = 0.0) -> float:
        V = self.vehicle.V_bar if V_g is None else V_g
        return 0.5 * self.vehicle.drag_coeff * (V - u_w) ** 2


@dataclass(frozen=True)
class PathSegment:
    """Straight line through ``r`` with unit direction ``q`` (north, east)."""

    r: NDArray
    q: NDArray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float).reshape(2)
        q = np.asarray(self.q, dtype=float).reshape(2)
        norm = np.hypot(q[0], q[1])
        if norm == 0:
            raise ValueError("path direction must be nonzero")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "q", q / norm)

    @classmethod
    def from_points(cls, start: ArrayLike, end: ArrayLike) -> "PathSegment":
        start = np.asarray(start, dtype=float)
        end = np.asarray(end, dtype=float)
        if np.allclose(start, end):
            raise ValueError("segment endpoints coincide")
        return cls(start, end - start)

    @property
    def psi_q(self) -> float:
        return float(np.arctan2(self.q[1], self.q[0]))

    def along_track(self, p: ArrayLike):
        p = np.asarray(p, dtype=float)
        return (p[..., 0] - self.r[0]) * self.q[0] + (p[..., 1] - self.r[1]) * self.q[1]

    def cross_track(self, p: ArrayLike):
        p = np.asarray(p, dtype=float)
        return cross_track_error(p[..., 0], p[..., 1], self.r, self.psi_q)


def cross_track_error(p_n, p_e, r, psi_q):
    r = np.asarray(r, dtype=float)
    return -np.sin(psi_q) * (p_n - r[..., 0]) + np.cos(psi_q) * (p_e - r[..., 1])


def passed_waypoint(p_hat: ArrayLike, waypoint: ArrayLike, q_in: ArrayLike, q_out: ArrayLike | None):
    """
    Half-plane switching test.

    True once ``p_hat`` lies on or beyond the plane through ``waypoint`` whose
    normal bisects the incoming and outgoing directions. With no outgoing leg
    the normal is the incoming direction.
    """
    q_in = np.asarray(q_in, dtype=float)
    normal = q_in if q_out is None else q_in + np.asarray(q_out, dtype=float)
    if np.hypot(normal[0], normal[1]) < 1e-12:  # full reversal
        normal = q_in
    p_hat = np.asarray(p_hat, dtype=float)
    waypoint = np.asarray(waypoint, dtype=float)
    return ((p_hat[..., 0] - waypoint[0]) * normal[0]
            + (p_hat[..., 1] - waypoint[1]) * normal[1]) >= 0.0


class UAV:
    """Nonlinear model functions and analytic linearization for the planar UAV."""

    dims = DIMS

    def __init__(self, params: UAVParams | None = None, noise: NoiseSpec | None = None,
                 design: NoiseSpec | None = None):
        self.params = params or UAVParams()
        # truth noise and filter design noise are kept apart so the truth may be
        # silenced without making the filter singular
        self.noise = self.params.noise() if noise is None else noise
        self.design = self.params.noise() if design is None else design

    def with_noise(self, noise: NoiseSpec) -> "UAV":
        return UAV(self.params, noise=noise, design=self.design)

    # -- truth, sensors ---------------------------------------------------

    def _accel(self, x, u):
        v = self.params.vehicle
        return (u[..., 0] - 0.5 * v.drag_coeff * (x[..., 2] - x[..., 5]) ** 2) / v.m

    def truth_dynamics(self, x: ArrayLike, u: ArrayLike, w: ArrayLike) -> NDArray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        w = np.asarray(w, dtype=float)
        v, d = self.params.vehicle, self.params.disturbance
        V_g, psi, u_w = x[..., 2], x[..., 3], x[..., 5]
        if np.any(V_g < 0):
            raise ValueError("ground speed must be non-negative for the gust model")
        return np.stack([
            V_g * np.cos(psi),
            V_g * np.sin(psi),
            self._accel(x, u),
            x[..., 4],
            (u[..., 1] + x[..., 6]) / v.J,
            -V_g / d.L_u * u_w + d.sigma_u * np.sqrt(2.0 * V_g / d.L_u) * w[..., 0],
            -x[..., 6] / d.tau_T + w[..., 1],
        ], axis=-1)

    def continuous_measurement(self, x: ArrayLike, u: ArrayLike) -> NDArray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return np.stack([self._accel(x, u), x[..., 4]], axis=-1)

    @staticmethod
    def discrete_measurement(x: ArrayLike) -> NDArray:
        return np.asarray(x, dtype=float)[..., :3].copy()

    @staticmethod
    def map_truth_to_nav(x: ArrayLike) -> NDArray:
        return np.asarray(x, dtype=float)[..., :4].copy()

    # -- navigation -------------------------------------------------------

    @staticmethod
    def nav_propagation(x_hat: ArrayLike, y: ArrayLike) -> NDArray:
        x_hat = np.asarray(x_hat, dtype=float)
        y = np.asarray(y, dtype=float)
        V, psi = x_hat[..., 2], x_hat[..., 3]
        return np.stack([V * np.cos(psi), V * np.sin(psi), y[..., 0], y[..., 1]], axis=-1)

    @staticmethod
    def predicted_measurement(x_hat: ArrayLike) -> NDArray:
        return np.asarray(x_hat, dtype=float)[..., :3].copy()

    # -- guidance and control --------------------------------------------

    def guidance(self, x_hat: ArrayLike, r: ArrayLike, psi_q, V_cmd: float | None = None) -> NDArray:
        """Commanded [V_g*, psi*] for the straight line through ``r`` at heading ``psi_q``."""
        x_hat = np.asarray(x_hat, dtype=float)
        c = self.params.control
        V_cmd = self.params.vehicle.V_bar if V_cmd is None else V_cmd
        e_path = cross_track_error(x_hat[..., 0], x_hat[..., 1], r, psi_q)
        psi_star = psi_q - c.psi_inf * (2.0 / np.pi) * np.arctan(c.k_path * e_path)
        return np.stack([np.broadcast_to(V_cmd, np.shape(psi_star)).astype(float),
                         wrap_angle(psi_star)], axis=-1)

    @staticmethod
    def controller_dynamics(x_hat: ArrayLike, x_star: ArrayLike) -> NDArray:
        x_hat = np.asarray(x_hat, dtype=float)
        x_star = np.asarray(x_star, dtype=float)
        return np.stack([x_star[..., 0] - x_hat[..., 2],
                         wrap_angle(x_star[..., 1] - x_hat[..., 3])], axis=-1)

    def controller_output(self, x_check: ArrayLike, x_hat: ArrayLike, x_star: ArrayLike,
                          y: ArrayLike) -> NDArray:
        x_check = np.asarray(x_check, dtype=float)
        x_hat = np.asarray(x_hat, dtype=float)
        x_star = np.asarray(x_star, dtype=float)
        y = np.asarray(y, dtype=float)
        c = self.params.control
        F_c = c.P_F * (x_star[..., 0] - x_hat[..., 2]) + c.I_F * x_check[..., 0]
        heading_err = wrap_angle(x_star[..., 1] - x_hat[..., 3])
        T_c = c.D_T * (c.P_T * heading_err + c.I_T * x_check[..., 1] - y[..., 1])
        return np.stack([F_c, T_c], axis=-1)

    # -- closed loop ------------------------------------------------------

    def closed_loop(self, z: NDArray, r, psi_q, w=None, eta=None):
        """
        Time derivative of the stacked state ``[x, x_hat, x_check]``.

        Returns
        -------
        zdot, u, y : ndarray
            State derivative, control input and sensed continuous measurement.
        """
        z = np.asarray(z, dtype=float)
        x, xh, xc = z[..., :7], z[..., 7:11], z[..., 11:13]
        batch = z.shape[:-1]
        w = np.zeros(batch + (2,)) if w is None else w
        eta = np.zeros(batch + (2,)) if eta is None else eta
        x_star = self.guidance(xh, r, psi_q)
        # The gyro channel does not depend on u, so the controller sees the
        # final gyro reading before the accelerometer is formed.
        gyro = x[..., 4] + eta[..., 1]
        c = self.params.control
        F_c = c.P_F * (x_star[..., 0] - xh[..., 2]) + c.I_F * xc[..., 0]
        heading_err = wrap_angle(x_star[..., 1] - xh[..., 3])
        T_c = c.D_T * (c.P_T * heading_err + c.I_T * xc[..., 1] - gyro)
        u = np.stack([F_c, T_c], axis=-1)
        y = np.stack([self._accel(x, u) + eta[..., 0], gyro], axis=-1)
        zdot = np.concatenate([
            self.truth_dynamics(x, u, w),
            self.nav_propagation(xh, y),
            np.stack([x_star[..., 0] - xh[..., 2], heading_err], axis=-1),
        ], axis=-1)
        return zdot, u, y

    def system(self, segment: PathSegment) -> SystemFunctions:
        """The nine model functions, with guidance bound to ``segment``."""
        return SystemFunctions(
            dims=DIMS,
            f=self.truth_dynamics,
            c=self.continuous_measurement,
            h=self.discrete_measurement,
            f_hat=self.nav_propagation,
            h_hat=self.predicted_measurement,
            n=lambda x_hat, y: self.guidance(x_hat, segment.r, segment.psi_q),
            f_check=self.controller_dynamics,
            g=self.controller_output,
            m=self.map_truth_to_nav,
        )

    def trim_state(self, position: ArrayLike, heading: float) -> NDArray:
        """Stacked closed-loop state in steady straight flight at V_bar."""
        p = np.asarray(position, dtype=float)
        z = np.zeros(N_AUG)
        z[0:2] = p
        z[2] = self.params.vehicle.V_bar
        z[3] = wrap_angle(heading)
        z[7:11] = z[0:4]
        z[11] = self.params.trim_force() / self.params.control.I_F
        return z

    # -- filter design model ---------------------------------------------

    @staticmethod
    def filter_F(x_hat: ArrayLike) -> NDArray:
        x_hat = np.asarray(x_hat, dtype=float)
        V, psi = x_hat[..., 2], x_hat[..., 3]
        F = np.zeros(x_hat.shape[:-1] + (4, 4))
        F[..., 0, 2] = np.cos(psi)
        F[..., 0, 3] = -V * np.sin(psi)
        F[..., 1, 2] = np.sin(psi)
        F[..., 1, 3] = V * np.cos(psi)
        return F

    H_hat = np.hstack([np.eye(3), np.zeros((3, 1))])
    B_hat = np.vstack([np.zeros((2, 2)), np.eye(2)])

    @property
    def Q_hat(self) -> NDArray:
        return self.design.S_eta

    @property
    def R_hat(self) -> NDArray:
        return self.design.R_nu

    # -- linearization ----------------------------------------------------

    def coefficient_set(self, x: ArrayLike, x_hat: ArrayLike, r: ArrayLike, psi_q) -> CoefficientSet:
        """
        Analytic coefficient matrices evaluated at a nominal point.

        Inputs may carry leading batch axes (e.g. time); every returned matrix
        then carries the same leading axes.
        """
        x = np.asarray(x, dtype=float)
        x_hat = np.asarray(x_hat, dtype=float)
        psi_q = np.asarray(psi_q, dtype=float)
        batch = x.shape[:-1]
        v, d, c = self.params.vehicle, self.params.disturbance, self.params.control

        def zeros(a, b):
            return np.zeros(batch + (a, b))

        def const(m):
            return np.broadcast_to(np.asarray(m, dtype=float), batch + np.shape(m)).copy()

        V, psi, u_w = x[..., 2], x[..., 3], x[..., 5]
        drag_slope = v.drag_coeff * (V - u_w) / v.m

        F_x = zeros(7, 7)
        F_x[..., 0, 2] = np.cos(psi)
        F_x[..., 0, 3] = -V * np.sin(psi)
        F_x[..., 1, 2] = np.sin(psi)
        F_x[..., 1, 3] = V * np.cos(psi)
        F_x[..., 2, 2] = -drag_slope
        F_x[..., 2, 5] = drag_slope
        F_x[..., 3, 4] = 1.0
        F_x[..., 4, 6] = 1.0 / v.J
        F_x[..., 5, 2] = -u_w / d.L_u
        F_x[..., 5, 5] = -V / d.L_u
        F_x[..., 6, 6] = -1.0 / d.tau_T

        F_u = zeros(7, 2)
        F_u[..., 2, 0] = 1.0 / v.m
        F_u[..., 4, 1] = 1.0 / v.J

        B = zeros(7, 2)
        B[..., 5, 0] = d.sigma_u * np.sqrt(2.0 * V / d.L_u)
        B[..., 6, 1] = 1.0

        C_x = zeros(2, 7)
        C_x[..., 0, 2] = -drag_slope
        C_x[..., 0, 5] = drag_slope
        C_x[..., 1, 4] = 1.0
        C_u = const([[1.0 / v.m, 0.0], [0.0, 0.0]])

        G_y = const([[0.0, 0.0], [0.0, -c.D_T]])
        G_xhat = const([[0.0, 0.0, -c.P_F, 0.0], [0.0, 0.0, 0.0, -c.D_T * c.P_T]])
        G_xstar = const([[c.P_F, 0.0], [0.0, c.D_T * c.P_T]])
        G_xcheck = const([[c.I_F, 0.0], [0.0, c.D_T * c.I_T]])

        dist = cross_track_error(x_hat[..., 0], x_hat[..., 1], np.asarray(r, dtype=float), psi_q)
        N_D = np.pi + np.pi * c.k_path**2 * dist**2
        N_xhat = zeros(2, 4)
        N_xhat[..., 1, 0] = 2.0 * c.psi_inf * c.k_path * np.sin(psi_q) / N_D
        N_xhat[..., 1, 1] = -2.0 * c.psi_inf * c.k_path * np.cos(psi_q) / N_D
        N_y = zeros(2, 2)

        Fhat_xhat = self.filter_F(x_hat)
        Fhat_y = const(self.B_hat)
        Fcheck_xhat = const([[0.0, 0.0, -1.0, 0.0], [0.0, 0.0, 0.0, -1.0]])
        Fcheck_xstar = const(np.eye(2))

        H_x = const(np.hstack([np.eye(3), np.zeros((3, 4))]))
        Hhat_xhat = const(self.H_hat)
        M_x = zeros(7, 7)
        M_x[..., :4, :4] = np.eye(4)

        return CoefficientSet(
            F_x=F_x, F_u=F_u, B=B, C_x=C_x, C_u=C_u,
            G_y=G_y, G_xhat=G_xhat, G_xstar=G_xstar, G_xcheck=G_xcheck,
            N_xhat=N_xhat, N_y=N_y,
            Fhat_xhat=Fhat_xhat, Fhat_y=Fhat_y,
            Fcheck_xhat=Fcheck_xhat, Fcheck_xstar=Fcheck_xstar,
            H_x=H_x, Hhat_xhat=Hhat_xhat, M_x=M_x,
        )
