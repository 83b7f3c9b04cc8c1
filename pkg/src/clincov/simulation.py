"""Noise-free nominal trajectories of the closed-loop UAV."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import _kernels
from .uav import UAV, UAVParams


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle in north/east coordinates."""

    north_min: float
    north_max: float
    east_min: float
    east_max: float

    def __post_init__(self):
        if not (self.north_min < self.north_max and self.east_min < self.east_max):
            raise ValueError("rectangle bounds must satisfy min < max")

    def contains(self, p: ArrayLike):
        p = np.asarray(p, dtype=float)
        return ((p[..., 0] >= self.north_min) & (p[..., 0] <= self.north_max)
                & (p[..., 1] >= self.east_min) & (p[..., 1] <= self.east_max))

    def as_row(self) -> tuple[float, float, float, float]:
        return (self.north_min, self.north_max, self.east_min, self.east_max)


def rects_array(rects) -> NDArray:
    if not rects:
        return np.zeros((0, 4))
    return np.array([r.as_row() for r in rects], dtype=float)


def in_denied(p: ArrayLike, rects) -> NDArray:
    p = np.asarray(p, dtype=float)
    out = np.zeros(p.shape[:-1], dtype=bool)
    for r in rects:
        out |= r.contains(p)
    return out


def pack_params(params: UAVParams) -> NDArray:
    v, d, c = params.vehicle, params.disturbance, params.control
    return np.array([v.V_bar, v.drag_coeff, v.m, v.J, d.sigma_u, d.L_u, d.tau_T,
                     c.P_F, c.I_F, c.P_T, c.I_T, c.D_T, c.psi_inf, c.k_path], dtype=float)


@dataclass
class Nominal:
    """
    Nominal trajectory sampled on a uniform grid.

    ``seg`` indexes ``waypoints`` and names the segment used for the step that
    starts at each point; ``gps_update[k]`` marks a filter update applied at
    point k, with gain ``K[k]``; ``P_hat`` is the filter covariance after any
    update at that point. Updates fall on global steps that are multiples of
    ``gps_every``.
    """

    t: NDArray
    z: NDArray
    u: NDArray
    y: NDArray
    seg: NDArray
    waypoints: NDArray
    P_hat: NDArray
    gps_update: NDArray
    K: NDArray
    dt: float
    step0: int = 0
    gps_every: int = 100

    @property
    def x(self) -> NDArray:
        return self.z[:, :7]

    @property
    def x_hat(self) -> NDArray:
        return self.z[:, 7:11]

    @property
    def x_check(self) -> NDArray:
        return self.z[:, 11:13]

    @property
    def n_steps(self) -> int:
        return self.t.size - 1

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    def segment_geometry(self, idx: NDArray | None = None) -> tuple[NDArray, NDArray]:
        """Origins ``r`` (k, 2) and headings ``psi_q`` (k,) for segment indices."""
        idx = self.seg if idx is None else idx
        start = self.waypoints[idx]
        d = self.waypoints[idx + 1] - start
        return start, np.arctan2(d[:, 1], d[:, 0])

    def gps_available(self, rects) -> NDArray:
        return ~in_denied(self.x[:, :2], rects)


def simulate_nominal(model: UAV, z0: ArrayLike, P0: ArrayLike, waypoints: ArrayLike, *,
                     dt: float, gps_every: int, denied=(), max_time: float,
                     step0: int = 0, t0: float = 0.0, edge: bool = False) -> tuple[Nominal, bool]:
    """
    Integrate the noise-free closed loop from ``z0``.

    With ``edge=False`` the vehicle follows ``waypoints`` with half-plane
    switching and stops after passing the last one. With ``edge=True`` the
    single segment ``waypoints[0] -> waypoints[1]`` is flown until the
    along-track coordinate reaches its length.

    Returns
    -------
    nominal : Nominal
    completed : bool
        False when ``max_time`` expired first.
    """
    wp = np.ascontiguousarray(np.asarray(waypoints, dtype=float))
    if wp.ndim != 2 or wp.shape[0] < 2:
        raise ValueError("need at least two waypoints")
    if np.any(np.hypot(*np.diff(wp, axis=0).T) == 0):
        raise ValueError("consecutive waypoints coincide")
    max_steps = int(np.ceil(max_time / dt))
    Z, UY, SEG, PH, UPD, KK, status = _kernels.integrate_nominal(
        np.asarray(z0, dtype=float).copy(), np.asarray(P0, dtype=float).copy(),
        pack_params(model.params), wp,
        _kernels.MODE_EDGE if edge else _kernels.MODE_WAYPOINTS,
        rects_array(list(denied)), float(dt), int(gps_every), int(step0), max_steps,
        np.ascontiguousarray(model.Q_hat), np.ascontiguousarray(model.R_hat))
    if status == _kernels.STATUS_NONFINITE:
        raise SimulationError(f"nominal integration produced non-finite state at t={t0 + (Z.shape[0] - 1) * dt:.2f}s")
    t = t0 + dt * np.arange(Z.shape[0])
    nominal = Nominal(t=t, z=Z, u=UY[:, :2], y=UY[:, 2:], seg=SEG, waypoints=wp, P_hat=PH,
                      gps_update=UPD, K=KK, dt=float(dt), step0=int(step0),
                      gps_every=int(gps_every))
    return nominal, status == _kernels.STATUS_OK
