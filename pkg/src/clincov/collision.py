"""
Probability that a Gaussian relative position falls inside an axis-aligned box.

The vehicle and each obstacle are independent Gaussians in the north/east
plane. Their difference is Gaussian and the collision probability at one time
is the mass of that difference inside ``[-l1, l1] x [-l2, l2]``.

The box integral is evaluated as a one-dimensional Gauss-Legendre quadrature
over the north coordinate of the exact conditional probability of the east
coordinate, split where the conditional mean crosses the box edges so the
integrand stays smooth on every panel.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import ndtr

# Beyond this many marginal standard deviations the density is treated as zero.
TAIL_SIGMAS = 12.0
BASE_ORDER = 32
MAX_ORDER = 256
ORDER_TOL = 1e-9


@dataclass(frozen=True)
class Gaussian2D:
    mean: NDArray
    cov: NDArray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float).reshape(2)
        P = np.asarray(self.cov, dtype=float).reshape(2, 2)
        if not np.all(np.isfinite(m)) or not np.all(np.isfinite(P)):
            raise ValueError("mean and covariance must be finite")
        _check_cov(P, "cov")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", P)


def _check_cov(P: NDArray, name: str) -> None:
    if not np.allclose(P, P.T, rtol=0, atol=1e-12 * max(1.0, np.abs(P).max())):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(0.5 * (P + P.T)).min() < -1e-12 * max(1.0, np.abs(P).max()):
        raise ValueError(f"{name} must be positive semidefinite")


@dataclass(frozen=True)
class ObstacleMap:
    """Obstacle means ``(N, 2)``, covariances ``(N, 2, 2)`` and box half-extents ``l``."""

    means: NDArray
    covs: NDArray
    l: NDArray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float).reshape(-1, 2)
        covs = np.asarray(self.covs, dtype=float).reshape(-1, 2, 2)
        l = np.asarray(self.l, dtype=float).reshape(2)
        if means.shape[0] != covs.shape[0]:
            raise ValueError("one covariance per obstacle is required")
        if not np.all(l > 0):
            raise ValueError("box half-extents must be positive")
        for i, P in enumerate(covs):
            _check_cov(P, f"obstacle {i} covariance")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)
        object.__setattr__(self, "l", l)

    def __len__(self) -> int:
        return self.means.shape[0]

    @classmethod
    def empty(cls, l: ArrayLike = (10.0, 10.0)) -> "ObstacleMap":
        return cls(np.zeros((0, 2)), np.zeros((0, 2, 2)), l)


def relative_transform(n_obstacles: int, i: int) -> NDArray:
    """
    Matrix ``A_i`` mapping the stacked ``[vehicle; obstacle_0; ...]`` position
    vector to ``vehicle - obstacle_i``.
    """
    if not 0 <= i < n_obstacles:
        raise IndexError("obstacle index out of range")
    A = np.zeros((2, 2 * (n_obstacles + 1)))
    A[:, :2] = np.eye(2)
    A[:, 2 * (i + 1):2 * (i + 2)] = -np.eye(2)
    return A


def relative_distribution(vehicle: Gaussian2D, obstacle: Gaussian2D) -> Gaussian2D:
    """Distribution of ``vehicle - obstacle`` for independent positions."""
    return Gaussian2D(vehicle.mean - obstacle.mean, vehicle.cov + obstacle.cov)


@lru_cache(maxsize=None)
def _gauss_legendre(order: int) -> tuple[NDArray, NDArray]:
    return np.polynomial.legendre.leggauss(order)


def _interval_mass(mu, sd, lo, hi):
    """P(lo <= X <= hi) for X ~ N(mu, sd^2); ``sd == 0`` gives an indicator."""
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(sd > 0, (lo - mu) / np.where(sd > 0, sd, 1.0), np.where(mu >= lo, -np.inf, np.inf))
        b = np.where(sd > 0, (hi - mu) / np.where(sd > 0, sd, 1.0), np.where(mu <= hi, np.inf, -np.inf))
    # difference taken on the tail nearer zero for accuracy
    upper = np.where(a > 0, ndtr(-a) - ndtr(-b), ndtr(b) - ndtr(a))
    return np.clip(upper, 0.0, 1.0)


def _box_batch(mean: NDArray, cov: NDArray, l: NDArray, order: int) -> NDArray:
    """Fixed-order evaluation for a batch ``mean (B, 2)``, ``cov (B, 2, 2)``."""
    m0, m1 = mean[:, 0], mean[:, 1]
    s00, s01, s11 = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    l0, l1 = l[..., 0], l[..., 1]
    sd0 = np.sqrt(np.clip(s00, 0.0, None))
    point = sd0 <= 1e-300
    safe00 = np.where(point, 1.0, s00)
    beta = np.where(point, 0.0, s01 / safe00)
    cvar = np.clip(s11 - beta * s01, 0.0, None)
    csd = np.sqrt(cvar)

    # north coordinate is a point mass
    out = np.where(point & (np.abs(m0) <= l0), _interval_mass(m1, np.sqrt(np.clip(s11, 0, None)), -l1, l1), 0.0)

    lo = np.maximum(-l0, m0 - TAIL_SIGMAS * sd0)
    hi = np.minimum(l0, m0 + TAIL_SIGMAS * sd0)
    live = ~point & (hi > lo)
    if not np.any(live):
        return out
    idx = np.flatnonzero(live)
    m0, m1, sd0, beta, csd = m0[idx], m1[idx], sd0[idx], beta[idx], csd[idx]
    lo, hi = lo[idx], hi[idx]
    l1v = np.broadcast_to(l1, live.shape)[idx]

    # panel edges where the conditional mean meets the east box edges
    with np.errstate(divide="ignore", invalid="ignore"):
        b1 = np.where(beta != 0, m0 + (l1v - m1) / beta, lo)
        b2 = np.where(beta != 0, m0 + (-l1v - m1) / beta, lo)
    edges = np.sort(np.stack([lo, np.clip(b1, lo, hi), np.clip(b2, lo, hi), hi], axis=-1), axis=-1)

    nodes, weights = _gauss_legendre(order)
    total = np.zeros(idx.size)
    for p in range(3):
        a, b = edges[:, p], edges[:, p + 1]
        half = 0.5 * (b - a)
        x = 0.5 * (a + b)[:, None] + half[:, None] * nodes[None, :]
        z = (x - m0[:, None]) / sd0[:, None]
        pdf = np.exp(-0.5 * z * z) / (np.sqrt(2.0 * np.pi) * sd0[:, None])
        cmu = m1[:, None] + beta[:, None] * (x - m0[:, None])
        inner = _interval_mass(cmu, csd[:, None], -l1v[:, None], l1v[:, None])
        total += half * ((pdf * inner) @ weights)
    out = out.copy()
    out[idx] = np.clip(total, 0.0, 1.0)
    return out


def box_probabilities(mean: ArrayLike, cov: ArrayLike, l: ArrayLike, *,
                      order: int = BASE_ORDER, max_order: int = MAX_ORDER,
                      tol: float = ORDER_TOL) -> NDArray:
    """
    Batched box probability.

    Parameters
    ----------
    mean : (..., 2) array_like
        Relative-position means.
    cov : (..., 2, 2) array_like
        Relative-position covariances.
    l : (2,) array_like
        Box half-extents.

    The quadrature order starts at ``order`` and doubles for the entries whose
    estimate changed by more than ``tol`` until ``max_order`` is reached.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    l = np.asarray(l, dtype=float).reshape(2)
    if not np.all(l > 0):
        raise ValueError("box half-extents must be positive")
    shape = mean.shape[:-1]
    mean = mean.reshape(-1, 2)
    cov = np.broadcast_to(cov, shape + (2, 2)).reshape(-1, 2, 2)
    est = _box_batch(mean, cov, l, order)
    todo = np.arange(est.size)
    while todo.size and order < max_order:
        order *= 2
        finer = _box_batch(mean[todo], cov[todo], l, order)
        changed = np.abs(finer - est[todo]) >= tol
        est[todo] = finer
        todo = todo[changed]
    return est.reshape(shape)


def box_probability(d: Gaussian2D, l: ArrayLike) -> float:
    """Mass of ``d`` inside ``[-l1, l1] x [-l2, l2]``."""
    return float(box_probabilities(d.mean, d.cov, l))


def marginal_bound(mean: ArrayLike, cov: ArrayLike, l: ArrayLike) -> NDArray:
    """
    Upper bound on the box probability: the smaller of the two 1-D marginal
    masses. Cheap, exact as a bound, and used to skip quadrature when the
    answer is already known to be small.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    l = np.asarray(l, dtype=float).reshape(2)
    sd = np.sqrt(np.clip(np.diagonal(cov, axis1=-2, axis2=-1), 0.0, None))
    sd = np.broadcast_to(sd, mean.shape)
    p0 = _interval_mass(mean[..., 0], sd[..., 0], -l[0], l[0])
    p1 = _interval_mass(mean[..., 1], sd[..., 1], -l[1], l[1])
    return np.minimum(p0, p1)


def vehicle_position_cov(D_true: ArrayLike) -> NDArray:
    """North/east block of the truth dispersion covariance."""
    return np.asarray(D_true, dtype=float)[..., :2, :2]


def path_collision_probabilities(positions: ArrayLike, P_uav: ArrayLike,
                                 obstacles: ObstacleMap) -> tuple[NDArray, NDArray]:
    """
    Collision probability with every obstacle at every time step.

    Parameters
    ----------
    positions : (T, 2) array_like
        Nominal vehicle positions.
    P_uav : (T, 2, 2) array_like
        Vehicle position covariance, e.g. ``vehicle_position_cov(D_true)``.
    obstacles : ObstacleMap

    Returns
    -------
    peak : (N,) ndarray
        Largest probability per obstacle.
    series : (T, N) ndarray
    """
    positions = np.asarray(positions, dtype=float)
    P_uav = np.asarray(P_uav, dtype=float)
    if positions.shape[0] != P_uav.shape[0]:
        raise ValueError("positions and covariances must be aligned")
    T, N = positions.shape[0], len(obstacles)
    if N == 0:
        return np.zeros(0), np.zeros((T, 0))
    mean = positions[:, None, :] - obstacles.means[None, :, :]
    cov = P_uav[:, None, :, :] + obstacles.covs[None, :, :, :]
    series = box_probabilities(mean, cov, obstacles.l)
    peak = series.max(axis=0) if T else np.zeros(N)
    return peak, series


def first_violation(positions: ArrayLike, P_uav: ArrayLike, obstacles: ObstacleMap,
                    p_max: float) -> int | None:
    """
    Index of the first time step where some obstacle reaches ``p_max``, or
    None when the whole series stays strictly below it.
    """
    positions = np.asarray(positions, dtype=float)
    P_uav = np.asarray(P_uav, dtype=float)
    if len(obstacles) == 0 or positions.shape[0] == 0:
        return None
    mean = positions[:, None, :] - obstacles.means[None, :, :]
    cov = P_uav[:, None, :, :] + obstacles.covs[None, :, :, :]
    suspect = marginal_bound(mean, cov, obstacles.l) >= p_max
    if not np.any(suspect):
        return None
    t_idx, o_idx = np.nonzero(suspect)
    prob = box_probabilities(mean[t_idx, o_idx], cov[t_idx, o_idx], obstacles.l)
    hit = prob >= p_max
    if not np.any(hit):
        return None
    return int(t_idx[hit].min())
