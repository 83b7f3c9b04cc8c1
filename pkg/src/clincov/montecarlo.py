"""
Nonlinear Monte Carlo of the closed-loop UAV and its comparison with LinCov.

All runs of a batch advance together: the state is an ``(R, 13)`` array and
each run carries its own filter covariance. Every run draws from its own
counter-based random stream keyed by ``(seed, run_id)``, so results do not
depend on how runs are grouped into batches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import ekf
from .lincov import NAV_NAMES, STATE_NAMES, LinCovSeries, format_number
from .simulation import Nominal, in_denied
from .sysmodel import wrap_angle
from .uav import IDX_PSI, IDX_PSI_HAT, N_AUG, N_NAV, N_TRUTH, UAV

# Time steps of noise drawn per random-stream request.
CHUNK_STEPS = 2000


class MonteCarloError(FloatingPointError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """
    Parameters
    ----------
    runs : int
        Ensemble size.
    seed : int
        Master seed; run ``i`` uses the stream keyed by ``(seed, i)``.
    D0 : (7, 7) array
        Initial truth dispersion covariance.
    P0 : (4, 4) array
        Initial filter covariance.
    E0 : (4, 4) array, optional
        Covariance of the initial estimation error; defaults to ``P0``.
    stride : int
        Output every ``stride`` steps (the final step is always included).
    batch : int
        Runs advanced together.
    """

    runs: int
    seed: int
    D0: NDArray
    P0: NDArray
    stride: int = 1
    batch: int = 500
    E0: NDArray | None = None

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be positive")
        if self.stride < 1 or self.batch < 1:
            raise ValueError("stride and batch must be positive")
        object.__setattr__(self, "D0", np.asarray(self.D0, dtype=float).reshape(N_TRUTH, N_TRUTH))
        object.__setattr__(self, "P0", np.asarray(self.P0, dtype=float).reshape(N_NAV, N_NAV))
        E0 = self.P0 if self.E0 is None else self.E0
        object.__setattr__(self, "E0", np.asarray(E0, dtype=float).reshape(N_NAV, N_NAV))


def output_indices(n_pts: int, stride: int) -> NDArray:
    idx = np.arange(0, n_pts, stride)
    if idx[-1] != n_pts - 1:
        idx = np.append(idx, n_pts - 1)
    return idx


def run_stream(seed: int, run_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, run_id])))


def _chol(P: NDArray) -> NDArray:
    """Factor of a PSD matrix (zero rows and columns allowed)."""
    w, V = np.linalg.eigh(0.5 * (P + P.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def dispersion(z: NDArray, z_nom: NDArray) -> NDArray:
    """Truth dispersion ``x - x_nom`` with the heading difference wrapped."""
    d = z[..., :N_TRUTH] - z_nom[..., :N_TRUTH]
    d[..., IDX_PSI] = wrap_angle(d[..., IDX_PSI])
    return d


def estimation_error(z: NDArray) -> NDArray:
    """``x_hat - m(x)`` with the heading difference wrapped."""
    e = z[..., N_TRUTH:N_TRUTH + N_NAV] - z[..., :N_NAV]
    e[..., 3] = wrap_angle(e[..., 3])
    return e


class _Streams:
    """Per-run noise in fixed chunks so draws are independent of batching."""

    def __init__(self, seed: int, run_ids: NDArray, n_steps: int):
        self.gens = [run_stream(seed, int(i)) for i in run_ids]
        self.n_steps = n_steps
        self.start = 0
        self.stop = 0
        self.cont = None
        self.disc = None

    def initial(self):
        return np.stack([g.standard_normal(N_TRUTH + N_NAV) for g in self.gens])

    def at(self, k: int) -> tuple[NDArray, NDArray]:
        if k >= self.stop:
            size = min(CHUNK_STEPS, self.n_steps - k)
            draws = [g.standard_normal((size, 7)) for g in self.gens]
            block = np.stack(draws, axis=1)
            self.cont = block[..., :4]
            self.disc = block[..., 4:]
            self.start, self.stop = k, k + size
        return self.cont[k - self.start], self.disc[k - self.start]


def _rk4(model: UAV, z: NDArray, r: NDArray, psi_q: float, w: NDArray, eta: NDArray,
         dt: float) -> NDArray:
    k1 = model.closed_loop(z, r, psi_q, w, eta)[0]
    k2 = model.closed_loop(z + 0.5 * dt * k1, r, psi_q, w, eta)[0]
    k3 = model.closed_loop(z + 0.5 * dt * k2, r, psi_q, w, eta)[0]
    k4 = model.closed_loop(z + dt * k3, r, psi_q, w, eta)[0]
    out = z + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[:, IDX_PSI] = wrap_angle(out[:, IDX_PSI])
    out[:, IDX_PSI_HAT] = wrap_angle(out[:, IDX_PSI_HAT])
    return out


def simulate_batch(model: UAV, nominal: Nominal, config: RunConfig, run_ids: ArrayLike,
                   denied=(), visit=None) -> None:
    """
    Integrate the runs ``run_ids`` along the time grid of ``nominal``.

    Guidance follows the nominal's segment schedule. GPS updates occur on the
    nominal update grid whenever the run's own truth position is outside every
    denied rectangle. ``visit(k, z, P_hat)`` is called at each output index.
    """
    run_ids = np.asarray(run_ids, dtype=int)
    R = run_ids.size
    dt, n_steps = nominal.dt, nominal.n_steps
    noise = model.noise
    sw = np.sqrt(np.diag(noise.S_w) / dt)
    se = np.sqrt(np.diag(noise.S_eta) / dt)
    Lr = _chol(noise.R_nu)
    LD, LE = _chol(config.D0), _chol(config.E0)
    r_all, psi_all = nominal.segment_geometry()
    gps_grid = (nominal.step0 + np.arange(n_steps + 1)) % nominal.gps_every == 0
    outputs = set(output_indices(n_steps + 1, config.stride).tolist())

    streams = _Streams(config.seed, run_ids, n_steps)
    init = streams.initial()
    dx0 = init[:, :N_TRUTH] @ LD.T
    e0 = init[:, N_TRUTH:] @ LE.T
    z = np.repeat(nominal.z[:1], R, axis=0)
    z[:, :N_TRUTH] += dx0
    z[:, N_TRUTH:N_TRUTH + N_NAV] += dx0[:, :N_NAV] + e0
    z[:, IDX_PSI] = wrap_angle(z[:, IDX_PSI])
    z[:, IDX_PSI_HAT] = wrap_angle(z[:, IDX_PSI_HAT])
    P = np.repeat(config.P0[None], R, axis=0)
    Q_hat, R_hat, H_hat, B_hat = model.Q_hat, model.R_hat, model.H_hat, model.B_hat

    if visit is not None and 0 in outputs:
        visit(0, z, P)
    for k in range(n_steps):
        cont, disc = streams.at(k)
        w = cont[:, :2] * sw
        eta = cont[:, 2:] * se
        F0 = model.filter_F(z[:, N_TRUTH:N_TRUTH + N_NAV])
        z = _rk4(model, z, r_all[k], psi_all[k], w, eta, dt)
        F1 = model.filter_F(z[:, N_TRUTH:N_TRUTH + N_NAV])
        P = ekf.propagate_covariance(P, F0, F1, B_hat, Q_hat, dt)
        if gps_grid[k + 1]:
            avail = ~in_denied(z[:, :2], denied)
            if np.any(avail):
                zi = z[avail]
                meas = model.discrete_measurement(zi[:, :N_TRUTH]) + disc[avail] @ Lr.T
                xh = zi[:, N_TRUTH:N_TRUTH + N_NAV]
                K = ekf.kalman_gain(P[avail], H_hat, R_hat)
                xh = ekf.state_update(xh, K, meas, model.predicted_measurement(xh))
                xh[:, 3] = wrap_angle(xh[:, 3])
                z[avail, N_TRUTH:N_TRUTH + N_NAV] = xh
                P[avail] = ekf.joseph_update(P[avail], K, H_hat, R_hat)
        if not np.all(np.isfinite(z)):
            bad = run_ids[~np.all(np.isfinite(z), axis=1)][0]
            raise MonteCarloError(f"run {bad} diverged at t={nominal.t[k + 1]:.2f}s")
        if visit is not None and (k + 1) in outputs:
            visit(k + 1, z, P)


@dataclass
class Trajectories:
    """Recorded runs: ``z`` is ``(R, T, 13)`` and ``P_hat`` is ``(R, T, 4, 4)``."""

    t: NDArray
    z: NDArray
    P_hat: NDArray


def simulate_runs(model: UAV, nominal: Nominal, config: RunConfig, run_ids: ArrayLike,
                  denied=()) -> Trajectories:
    """Simulate and keep the full output-grid history of each run."""
    run_ids = np.atleast_1d(np.asarray(run_ids, dtype=int))
    idx = output_indices(nominal.n_steps + 1, config.stride)
    pos = {int(k): i for i, k in enumerate(idx)}
    Z = np.empty((run_ids.size, idx.size, N_AUG))
    PH = np.empty((run_ids.size, idx.size, N_NAV, N_NAV))

    def keep(k, z, P):
        Z[:, pos[k]] = z
        PH[:, pos[k]] = P

    simulate_batch(model, nominal, config, run_ids, denied, keep)
    return Trajectories(nominal.t[idx], Z, PH)


def simulate_run(model: UAV, nominal: Nominal, config: RunConfig, run_id: int,
                 denied=()) -> Trajectories:
    out = simulate_runs(model, nominal, config, [run_id], denied)
    return Trajectories(out.t, out.z[0], out.P_hat[0])


@dataclass
class EnsembleStats:
    """Per-time sample mean and standard deviation of truth dispersions and estimation errors."""

    t: NDArray
    runs: int
    disp_mean: NDArray
    disp_std: NDArray
    est_mean: NDArray
    est_std: NDArray


class _Accumulator:
    """Chan's pairwise merge of (count, mean, M2), folded in run-index order."""

    def __init__(self, shape):
        self.n = 0
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)

    def merge(self, values: NDArray) -> None:
        # values: (R, T, k) for one batch of runs
        nb = values.shape[0]
        mb = values.mean(axis=0)
        m2b = ((values - mb) ** 2).sum(axis=0)
        n = self.n + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * (nb / n)
        self.m2 = self.m2 + m2b + delta**2 * (self.n * nb / n)
        self.n = n

    def std(self) -> NDArray:
        if self.n < 2:
            raise ValueError("at least two runs are needed for a sample standard deviation")
        return np.sqrt(self.m2 / (self.n - 1))


def ensemble_stats(t: ArrayLike, nominal_z: ArrayLike, runs: list[NDArray] | NDArray) -> EnsembleStats:
    """
    Statistics from recorded runs.

    Parameters
    ----------
    t : (T,) array_like
    nominal_z : (T, 13) array_like
        Nominal stacked state on the same grid.
    runs : sequence of (T, 13) arrays
    """
    t = np.asarray(t, dtype=float)
    nominal_z = np.asarray(nominal_z, dtype=float)
    Z = np.asarray([np.asarray(r, dtype=float) for r in runs])
    if Z.ndim != 3 or Z.shape[1] != t.size or nominal_z.shape[0] != t.size:
        raise ValueError("runs and nominal must share the time grid")
    disp = _Accumulator((t.size, N_TRUTH))
    est = _Accumulator((t.size, N_NAV))
    disp.merge(dispersion(Z, nominal_z[None]))
    est.merge(estimation_error(Z))
    return EnsembleStats(t, Z.shape[0], disp.mean, disp.std(), est.mean, est.std())


def run_ensemble(model: UAV, nominal: Nominal, config: RunConfig, denied=()) -> EnsembleStats:
    """Simulate ``config.runs`` runs and reduce them to ensemble statistics."""
    if config.runs < 2:
        raise ValueError("at least two runs are needed for statistics")
    idx = output_indices(nominal.n_steps + 1, config.stride)
    pos = {int(k): i for i, k in enumerate(idx)}
    z_nom = nominal.z[idx]
    disp = _Accumulator((idx.size, N_TRUTH))
    est = _Accumulator((idx.size, N_NAV))
    for first in range(0, config.runs, config.batch):
        ids = np.arange(first, min(first + config.batch, config.runs))
        D = np.empty((ids.size, idx.size, N_TRUTH))
        E = np.empty((ids.size, idx.size, N_NAV))

        def keep(k, z, P):
            i = pos[k]
            D[:, i] = dispersion(z, z_nom[i])
            E[:, i] = estimation_error(z)

        simulate_batch(model, nominal, config, ids, denied, keep)
        disp.merge(D)
        est.merge(E)
    return EnsembleStats(nominal.t[idx], config.runs, disp.mean, disp.std(), est.mean, est.std())


@dataclass
class StateComparison:
    name: str
    ratio: NDArray
    counted: NDArray
    flagged: NDArray
    fraction: float
    passed: bool


@dataclass
class ComparisonReport:
    t: NDArray
    tolerance: float
    required_fraction: float
    states: list[StateComparison] = field(default_factory=list)
    mc_sigma: NDArray | None = None
    lincov_sigma: NDArray | None = None

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.states)

    def summary(self) -> dict:
        return {
            "tolerance": self.tolerance,
            "required_fraction": self.required_fraction,
            "passed": self.passed,
            "states": {s.name: {"fraction_within": round(float(s.fraction), 6),
                                "flagged_points": int(s.flagged.sum()),
                                "passed": bool(s.passed)} for s in self.states},
        }


def exit_windows(t: ArrayLike, gps_available: ArrayLike, before: float, after: float) -> NDArray:
    """Mask of times within ``[t_exit - before, t_exit + after]`` of each denial exit."""
    t = np.asarray(t, dtype=float)
    avail = np.asarray(gps_available, dtype=bool)
    exits = t[1:][avail[1:] & ~avail[:-1]]
    mask = np.zeros(t.size, dtype=bool)
    for te in exits:
        mask |= (t >= te - before) & (t <= te + after)
    return mask


# Window around each nominal GPS-denial exit that is reported but not scored.
EXIT_BEFORE = 1.0
EXIT_AFTER = 10.0
TRANSIENT = 5.0
SIGMA_FLOOR = 1e-12


def compare(series: LinCovSeries, stats: EnsembleStats, tolerance: float, *,
            transient: float = TRANSIENT, excluded: ArrayLike | None = None,
            required_fraction: float = 0.95, sigma_floor: float = SIGMA_FLOOR) -> ComparisonReport:
    """
    Ratio of Monte Carlo to LinCov standard deviation for every truth state
    and every navigation error state.

    A state passes when the ratio lies within ``1 +/- tolerance`` on at least
    ``required_fraction`` of the scored points: those after ``transient``
    seconds and outside ``excluded``. Points where both deviations are below
    ``sigma_floor`` count as agreeing.
    """
    if series.t.shape != stats.t.shape or not np.allclose(series.t, stats.t):
        raise ValueError("LinCov and Monte Carlo series must share the time grid")
    t = stats.t
    lin = np.hstack([series.dispersion_sigma(), series.estimation_sigma()])
    mc = np.hstack([stats.disp_std, stats.est_std])
    names = list(STATE_NAMES) + [f"err_{n}" for n in NAV_NAMES]
    excluded = np.zeros(t.size, dtype=bool) if excluded is None else np.asarray(excluded, dtype=bool)
    scored = (t - t[0] >= transient) & ~excluded
    report = ComparisonReport(t, tolerance, required_fraction, mc_sigma=mc, lincov_sigma=lin)
    for j, name in enumerate(names):
        both_small = (lin[:, j] <= sigma_floor) & (mc[:, j] <= sigma_floor)
        ratio = np.where(both_small, 1.0, mc[:, j] / np.maximum(lin[:, j], sigma_floor))
        ok = np.abs(ratio - 1.0) <= tolerance
        frac = float(ok[scored].mean()) if np.any(scored) else 1.0
        flagged = excluded & ~ok
        report.states.append(StateComparison(name, ratio, scored, flagged, frac,
                                             frac >= required_fraction))
    return report


def write_comparison_csv(path: str | Path, report: ComparisonReport) -> None:
    names = [s.name for s in report.states]
    header = ["time"] + [f"mc_sigma_{n}" for n in names] + [f"lincov_sigma_{n}" for n in names]
    rows = np.column_stack([report.t, report.mc_sigma, report.lincov_sigma])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format_number(v) for v in row) + "\n")


def write_summary_json(path: str | Path, report: ComparisonReport, extra: dict | None = None) -> None:
    doc = report.summary()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
