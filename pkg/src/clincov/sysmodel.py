"""
System-function contracts for closed-loop GNC models and a finite-difference
Jacobian oracle used to check analytic linearizations.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Mapping

import numpy as np
from numpy.typing import ArrayLike, NDArray


def wrap_angle(angle):
    """Wrap an angle (or array of angles) to the interval (-pi, pi]."""
    wrapped = np.mod(np.asarray(angle, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Dimensions:
    """State, measurement and noise sizes of a closed-loop system."""

    n: int
    n_hat: int
    n_check: int
    n_u: int
    n_y: int
    n_z: int
    n_w: int

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"dimension {f.name} must be strictly positive")

    @property
    def n_aug(self) -> int:
        return self.n + self.n_hat + self.n_check


@dataclass(frozen=True)
class NoiseSpec:
    """Continuous PSDs and discrete measurement covariance.

    Parameters
    ----------
    S_w : (n_w, n_w) array
        Process-noise power spectral density.
    S_eta : (n_y, n_y) array
        Continuous measurement-noise power spectral density.
    R_nu : (n_z, n_z) array
        Discrete measurement-noise covariance.
    """

    S_w: NDArray
    S_eta: NDArray
    R_nu: NDArray

    def __post_init__(self):
        for name in ("S_w", "S_eta", "R_nu"):
            m = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if m.shape[0] != m.shape[1] or not np.allclose(m, m.T, atol=1e-15):
                raise ValueError(f"{name} must be a symmetric square matrix")
            if np.linalg.eigvalsh(m).min() < -1e-12 * max(1.0, np.abs(m).max()):
                raise ValueError(f"{name} must be positive semidefinite")
            object.__setattr__(self, name, m)

    def scaled(self, factor: float) -> "NoiseSpec":
        return NoiseSpec(self.S_w * factor, self.S_eta * factor, self.R_nu * factor)


@dataclass(frozen=True)
class SystemFunctions:
    """The nine nonlinear functions that define a closed-loop GNC system.

    ``f(x, u, w)``, ``c(x, u)``, ``h(x)``, ``f_hat(x_hat, y)``, ``h_hat(x_hat)``,
    ``n(x_hat, y)``, ``f_check(x_hat, x_star)``, ``g(x_check, x_hat, x_star, y)``
    and ``m(x)``. Guidance may close over mission data such as the active
    path segment.
    """

    dims: Dimensions
    f: Callable
    c: Callable
    h: Callable
    f_hat: Callable
    h_hat: Callable
    n: Callable
    f_check: Callable
    g: Callable
    m: Callable


@dataclass(frozen=True)
class CoefficientSet:
    """Linearization matrices of a closed-loop system about a nominal point."""

    F_x: NDArray
    F_u: NDArray
    B: NDArray
    C_x: NDArray
    C_u: NDArray
    G_y: NDArray
    G_xhat: NDArray
    G_xstar: NDArray
    G_xcheck: NDArray
    N_xhat: NDArray
    N_y: NDArray
    Fhat_xhat: NDArray
    Fhat_y: NDArray
    Fcheck_xhat: NDArray
    Fcheck_xstar: NDArray
    H_x: NDArray
    Hhat_xhat: NDArray
    M_x: NDArray

    def expected_shapes(self, dims: Dimensions) -> dict[str, tuple[int, int]]:
        n, nh, nc, nu, ny, nz, nw = (
            dims.n, dims.n_hat, dims.n_check, dims.n_u, dims.n_y, dims.n_z, dims.n_w
        )
        ns = self.N_xhat.shape[0]  # guidance output size
        return {
            "F_x": (n, n), "F_u": (n, nu), "B": (n, nw),
            "C_x": (ny, n), "C_u": (ny, nu),
            "G_y": (nu, ny), "G_xhat": (nu, nh), "G_xstar": (nu, ns), "G_xcheck": (nu, nc),
            "N_xhat": (ns, nh), "N_y": (ns, ny),
            "Fhat_xhat": (nh, nh), "Fhat_y": (nh, ny),
            "Fcheck_xhat": (nc, nh), "Fcheck_xstar": (nc, ns),
            "H_x": (nz, n), "Hhat_xhat": (nz, nh), "M_x": (n, n),
        }


@dataclass(frozen=True)
class NominalPoint:
    """One point of a nominal trajectory (all noise terms zero)."""

    x: NDArray
    x_hat: NDArray
    x_check: NDArray
    u: NDArray
    y: NDArray


def numeric_jacobian(fn: Callable[[NDArray], ArrayLike], at: ArrayLike, eps: float = 1e-6) -> NDArray:
    """
    Central-difference Jacobian of a vector function.

    The step for component ``j`` is ``eps * max(1, |at[j]|)``.

    Parameters
    ----------
    fn : callable
        Vector function of one vector argument.
    at : array_like
        Linearization point.
    eps : float
        Relative step size.

    Returns
    -------
    jac : (m, n) ndarray
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    at = np.asarray(at, dtype=float).ravel()
    f0 = np.atleast_1d(np.asarray(fn(at), dtype=float))
    jac = np.empty((f0.size, at.size))
    for j in range(at.size):
        step = eps * max(1.0, abs(at[j]))
        xp = at.copy()
        xm = at.copy()
        xp[j] += step
        xm[j] -= step
        fp = np.atleast_1d(np.asarray(fn(xp), dtype=float))
        fm = np.atleast_1d(np.asarray(fn(xm), dtype=float))
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise FloatingPointError(f"non-finite function value when perturbing component {j}")
        jac[:, j] = (fp - fm) / (2.0 * step)
    return jac


@dataclass
class ValidationReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def failed(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed


def relative_error(analytic: NDArray, numeric: NDArray, floor: float = 1e-7) -> float:
    """Max elementwise |a - b| / |b|; differences below ``floor`` count as zero."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(numeric), floor)
    err = np.where(diff <= floor, 0.0, diff / scale)
    return float(err.max()) if err.size else 0.0


def numeric_coefficient_set(system: SystemFunctions, nominal: NominalPoint,
                            eps: float = 1e-6) -> dict[str, NDArray]:
    """Finite-difference counterparts of every coefficient matrix."""
    x, xh, xc, u, y = (np.asarray(v, dtype=float) for v in
                       (nominal.x, nominal.x_hat, nominal.x_check, nominal.u, nominal.y))
    w0 = np.zeros(system.dims.n_w)
    xs = np.asarray(system.n(xh, y), dtype=float)
    J = numeric_jacobian
    return {
        "F_x": J(lambda v: system.f(v, u, w0), x, eps),
        "F_u": J(lambda v: system.f(x, v, w0), u, eps),
        "B": J(lambda v: system.f(x, u, v), w0, eps),
        "C_x": J(lambda v: system.c(v, u), x, eps),
        "C_u": J(lambda v: system.c(x, v), u, eps),
        "G_y": J(lambda v: system.g(xc, xh, xs, v), y, eps),
        "G_xhat": J(lambda v: system.g(xc, v, xs, y), xh, eps),
        "G_xstar": J(lambda v: system.g(xc, xh, v, y), xs, eps),
        "G_xcheck": J(lambda v: system.g(v, xh, xs, y), xc, eps),
        "N_xhat": J(lambda v: system.n(v, y), xh, eps),
        "N_y": J(lambda v: system.n(xh, v), y, eps),
        "Fhat_xhat": J(lambda v: system.f_hat(v, y), xh, eps),
        "Fhat_y": J(lambda v: system.f_hat(xh, v), y, eps),
        "Fcheck_xhat": J(lambda v: system.f_check(v, xs), xh, eps),
        "Fcheck_xstar": J(lambda v: system.f_check(xh, v), xs, eps),
        "H_x": J(system.h, x, eps),
        "Hhat_xhat": J(system.h_hat, xh, eps),
        "M_x": _square_mapping_jacobian(system, x, eps),
    }


def _square_mapping_jacobian(system: SystemFunctions, x: NDArray, eps: float) -> NDArray:
    # The mapping jacobian is n_hat x n; it is reported padded to n x n.
    top = numeric_jacobian(system.m, x, eps)
    out = np.zeros((x.size, x.size))
    out[: top.shape[0], :] = top
    return out


def validate_coefficient_set(system: SystemFunctions, nominal: NominalPoint,
                             coeffs: CoefficientSet | Mapping[str, NDArray],
                             tolerance: float = 1e-4, eps: float = 1e-6) -> ValidationReport:
    """
    Compare analytic coefficient matrices against central differences.

    Raises
    ------
    ValueError
        If any analytic matrix does not have the shape implied by ``system.dims``.
    """
    if isinstance(coeffs, CoefficientSet):
        shapes = coeffs.expected_shapes(system.dims)
        analytic = {name: np.asarray(getattr(coeffs, name), dtype=float) for name in shapes}
        for name, shape in shapes.items():
            if analytic[name].shape != shape:
                raise ValueError(f"{name} has shape {analytic[name].shape}, expected {shape}")
    else:
        analytic = {k: np.asarray(v, dtype=float) for k, v in coeffs.items()}
    numeric = numeric_coefficient_set(system, nominal, eps)
    errors = {}
    for name, a in analytic.items():
        if a.shape != numeric[name].shape:
            raise ValueError(f"{name} has shape {a.shape}, expected {numeric[name].shape}")
        errors[name] = relative_error(a, numeric[name])
    return ValidationReport(errors, tolerance)


def closed_loop_rhs(system: SystemFunctions, x: NDArray, x_hat: NDArray, x_check: NDArray,
                    w: NDArray | None = None, eta: NDArray | None = None,
                    max_iter: int = 50, tol: float = 1e-13) -> tuple[NDArray, NDArray, NDArray]:
    """
    Derivatives of truth, navigation and controller states for a generic system.

    The control/measurement loop ``u = g(.., c(x, u) + eta)`` is resolved by
    fixed-point iteration, which converges whenever the loop gain is below one.
    """
    dims = system.dims
    w = np.zeros(dims.n_w) if w is None else np.asarray(w, dtype=float)
    eta = np.zeros(dims.n_y) if eta is None else np.asarray(eta, dtype=float)
    u = np.zeros(dims.n_u)
    for _ in range(max_iter):
        y = np.asarray(system.c(x, u), dtype=float) + eta
        x_star = np.asarray(system.n(x_hat, y), dtype=float)
        u_next = np.asarray(system.g(x_check, x_hat, x_star, y), dtype=float)
        done = np.max(np.abs(u_next - u)) <= tol * max(1.0, np.max(np.abs(u_next)))
        u = u_next
        if done:
            break
    else:
        raise RuntimeError("control/measurement loop did not converge")
    y = np.asarray(system.c(x, u), dtype=float) + eta
    x_star = np.asarray(system.n(x_hat, y), dtype=float)
    return (np.asarray(system.f(x, u, w), dtype=float),
            np.asarray(system.f_hat(x_hat, y), dtype=float),
            np.asarray(system.f_check(x_hat, x_star), dtype=float))
