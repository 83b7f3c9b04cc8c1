"""
Scenario files: JSON documents validated into typed settings.

Every vehicle, disturbance, sensor and controller parameter has a default, so
a scenario only has to describe geometry. Validation errors name the offending
field path.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .collision import ObstacleMap
from .lincov import initial_covariance
from .simulation import Rect
from .sysmodel import NoiseSpec
from .uav import (ControlParams, DisturbanceParams, SensorParams, UAV, UAVParams,
                  VehicleParams)

SCHEMA_VERSION = 1
SCENARIO_DIR = Path(__file__).parent / "scenarios"

Point = Annotated[list[float], Field(min_length=2, max_length=2)]
Positive = Annotated[float, Field(gt=0)]


class ScenarioError(ValueError):
    """Invalid scenario file; the message lists every problem with its field path."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class VehicleSettings(_Strict):
    V_bar: Positive = VehicleParams.V_bar
    rho: Positive = VehicleParams.rho
    C_D0: Positive = VehicleParams.C_D0
    S_p: Positive = VehicleParams.S_p
    m: Positive = VehicleParams.m
    J: Positive = VehicleParams.J


class DisturbanceSettings(_Strict):
    sigma_u: Positive = DisturbanceParams.sigma_u
    L_u: Positive = DisturbanceParams.L_u
    sigma_T: Positive = DisturbanceParams.sigma_T
    tau_T: Positive = DisturbanceParams.tau_T


class SensorSettings(_Strict):
    vrw: Positive = SensorParams.vrw
    arw: Positive = SensorParams.arw
    sigma_pos: Positive = SensorParams.sigma_pos
    sigma_vel: Positive = SensorParams.sigma_vel


class ControlSettings(_Strict):
    P_F: Positive = ControlParams.P_F
    I_F: Positive = ControlParams.I_F
    P_T: Positive = ControlParams.P_T
    I_T: Positive = ControlParams.I_T
    D_T: Positive = ControlParams.D_T
    psi_inf: Positive = ControlParams.psi_inf
    k_path: Positive = ControlParams.k_path


class Parameters(_Strict):
    vehicle: VehicleSettings = VehicleSettings()
    disturbance: DisturbanceSettings = DisturbanceSettings()
    sensor: SensorSettings = SensorSettings()
    control: ControlSettings = ControlSettings()

    def build(self) -> UAVParams:
        return UAVParams(
            vehicle=VehicleParams(**self.vehicle.model_dump()),
            disturbance=DisturbanceParams(**self.disturbance.model_dump()),
            sensor=SensorParams(**self.sensor.model_dump()),
            control=ControlParams(**self.control.model_dump()),
        )


class NoiseSettings(_Strict):
    """Truth noise override; any matrix left out keeps its parameter-derived value."""

    S_w: Optional[list[list[float]]] = None
    S_eta: Optional[list[list[float]]] = None
    R_nu: Optional[list[list[float]]] = None

    @model_validator(mode="after")
    def _shapes(self):
        for name, n in (("S_w", 2), ("S_eta", 2), ("R_nu", 3)):
            value = getattr(self, name)
            if value is None:
                continue
            M = np.asarray(value, dtype=float)
            if M.shape != (n, n):
                raise ValueError(f"{name} must be {n}x{n}")
            if not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() < -1e-12 * max(1.0, np.abs(M).max()):
                raise ValueError(f"{name} must be symmetric positive semidefinite")
        return self


class DeniedRegion(_Strict):
    north_min: float
    north_max: float
    east_min: float
    east_max: float

    @model_validator(mode="after")
    def _ordered(self):
        if not (self.north_min < self.north_max and self.east_min < self.east_max):
            raise ValueError("rectangle bounds must satisfy min < max")
        return self

    def build(self) -> Rect:
        return Rect(self.north_min, self.north_max, self.east_min, self.east_max)


class Obstacle(_Strict):
    """Obstacle position mean with either an isotropic ``sigma`` or a full ``cov``."""

    mean: Point
    sigma: Optional[Annotated[float, Field(ge=0)]] = None
    cov: Optional[list[list[float]]] = None

    @model_validator(mode="after")
    def _one_spread(self):
        if (self.sigma is None) == (self.cov is None):
            raise ValueError("give exactly one of sigma or cov")
        if self.cov is not None:
            P = np.asarray(self.cov, dtype=float)
            if P.shape != (2, 2) or not np.allclose(P, P.T) or np.linalg.eigvalsh(P).min() < -1e-12:
                raise ValueError("cov must be a symmetric positive semidefinite 2x2 matrix")
        return self

    def covariance(self) -> np.ndarray:
        if self.cov is not None:
            return np.asarray(self.cov, dtype=float)
        return self.sigma**2 * np.eye(2)


class Obstacles(_Strict):
    half_extent: Annotated[list[Positive], Field(min_length=2, max_length=2)] = [10.0, 10.0]
    items: list[Obstacle] = []

    def build(self) -> ObstacleMap:
        if not self.items:
            return ObstacleMap.empty(self.half_extent)
        return ObstacleMap([o.mean for o in self.items], [o.covariance() for o in self.items],
                           self.half_extent)


class SimulationSettings(_Strict):
    dt: Positive = 0.01
    gps_every: Annotated[int, Field(ge=1)] = 100
    max_time: Positive = 600.0
    output_stride: Annotated[int, Field(ge=1)] = 10


class InitialCovariance(_Strict):
    """
    One-sigma values of the initial truth dispersion, the filter covariance
    and, optionally, the actual initial estimation error (defaults to the
    filter's own belief).
    """

    dispersion_sigma: Annotated[list[Annotated[float, Field(ge=0)]], Field(min_length=7, max_length=7)] = [
        1.0, 1.0, 0.1, float(np.deg2rad(0.5)), 0.01, DisturbanceParams.sigma_u, DisturbanceParams.sigma_T]
    filter_sigma: Annotated[list[Positive], Field(min_length=4, max_length=4)] = [
        1.0, 1.0, 0.05, float(np.deg2rad(1.0))]
    estimation_sigma: Optional[Annotated[list[Annotated[float, Field(ge=0)]],
                                         Field(min_length=4, max_length=4)]] = None

    @property
    def D0(self) -> np.ndarray:
        return np.diag(np.square(self.dispersion_sigma))

    @property
    def P0(self) -> np.ndarray:
        return np.diag(np.square(self.filter_sigma))

    @property
    def E0(self) -> np.ndarray:
        sig = self.filter_sigma if self.estimation_sigma is None else self.estimation_sigma
        return np.diag(np.square(sig))


class MonteCarloSettings(_Strict):
    runs: Annotated[int, Field(ge=1)] = 500
    tolerance: Annotated[float, Field(gt=0)] = 0.15
    required_fraction: Annotated[float, Field(gt=0, le=1)] = 0.95
    transient: Annotated[float, Field(ge=0)] = 5.0
    exit_window: Annotated[list[Annotated[float, Field(ge=0)]], Field(min_length=2, max_length=2)] = [1.0, 10.0]
    batch: Annotated[int, Field(ge=1)] = 500


class PlannerSettings(_Strict):
    bounds_min: Point
    bounds_max: Point
    threshold: Annotated[float, Field(gt=0, le=1)] = 0.01
    iterations: Annotated[int, Field(ge=1)] = 3000
    step: Positive = 100.0
    goal_bias: Annotated[float, Field(ge=0, le=1)] = 0.05
    time_cap_factor: Annotated[float, Field(gt=1)] = 3.0

    @model_validator(mode="after")
    def _ordered(self):
        if any(a > b for a, b in zip(self.bounds_min, self.bounds_max)):
            raise ValueError("bounds_min must not exceed bounds_max")
        return self


class Scenario(_Strict):
    """
    A mission: waypoints (the first is the start, the last is the planner's
    goal), GPS-denied rectangles, obstacles, parameter overrides, noise,
    timing, initial covariances and the random seed.
    """

    schema_version: int = SCHEMA_VERSION
    name: str = "scenario"
    description: str = ""
    seed: Annotated[int, Field(ge=0)] = 0
    waypoints: Annotated[list[Point], Field(min_length=2)]
    initial_heading: Optional[float] = None
    denied_regions: list[DeniedRegion] = []
    obstacles: Obstacles = Obstacles()
    parameters: Parameters = Parameters()
    noise: NoiseSettings = NoiseSettings()
    simulation: SimulationSettings = SimulationSettings()
    initial_covariance: InitialCovariance = InitialCovariance()
    monte_carlo: MonteCarloSettings = MonteCarloSettings()
    planner: Optional[PlannerSettings] = None

    @field_validator("schema_version")
    @classmethod
    def _known_version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}; expected {SCHEMA_VERSION}")
        return v

    @field_validator("waypoints")
    @classmethod
    def _distinct(cls, v):
        for a, b in zip(v, v[1:]):
            if a == b:
                raise ValueError("consecutive waypoints coincide")
        return v

    @model_validator(mode="after")
    def _goal_inside(self):
        p = self.planner
        if p is not None:
            for label, pt in (("start", self.waypoints[0]), ("goal", self.waypoints[-1])):
                if any(c < lo or c > hi for c, lo, hi in zip(pt, p.bounds_min, p.bounds_max)):
                    raise ValueError(f"planner {label} {pt} lies outside the sampling bounds")
        return self

    # -- builders ---------------------------------------------------------

    @property
    def waypoint_array(self) -> np.ndarray:
        return np.asarray(self.waypoints, dtype=float)

    @property
    def heading(self) -> float:
        if self.initial_heading is not None:
            return float(self.initial_heading)
        d = self.waypoint_array[1] - self.waypoint_array[0]
        return float(np.arctan2(d[1], d[0]))

    @property
    def denied(self) -> tuple[Rect, ...]:
        return tuple(r.build() for r in self.denied_regions)

    def model(self) -> UAV:
        params = self.parameters.build()
        base = params.noise()
        n = self.noise
        truth = NoiseSpec(
            S_w=base.S_w if n.S_w is None else np.asarray(n.S_w, dtype=float),
            S_eta=base.S_eta if n.S_eta is None else np.asarray(n.S_eta, dtype=float),
            R_nu=base.R_nu if n.R_nu is None else np.asarray(n.R_nu, dtype=float),
        )
        return UAV(params, noise=truth)

    def initial_augmented(self) -> np.ndarray:
        ic = self.initial_covariance
        return initial_covariance(ic.D0, ic.E0, np.eye(7))

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "\n".join(lines)


def parse_scenario_text(text: str, source: str = "<string>") -> Scenario:
    if not text.strip():
        doc = {}
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{source}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ScenarioError(f"{source}: top level must be an object")
    try:
        return Scenario.model_validate(doc)
    except ValidationError as exc:
        raise ScenarioError(f"{source}:\n{_format_errors(exc)}") from exc


def parse_scenario(path: str | Path) -> Scenario:
    """
    Read and validate a scenario file.

    A bare name such as ``validate`` resolves to the scenario shipped with the
    package.
    """
    p = Path(path)
    if not p.exists():
        shipped = SCENARIO_DIR / (p.name if p.suffix else p.name + ".json")
        if shipped.exists():
            p = shipped
        else:
            raise ScenarioError(f"scenario file not found: {path}")
    return parse_scenario_text(p.read_text(), str(p))


def shipped_scenarios() -> list[str]:
    return sorted(f.stem for f in SCENARIO_DIR.glob("*.json"))
