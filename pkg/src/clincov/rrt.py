"""
Chance-constrained RRT.

Each candidate edge is flown noise-free from the parent vertex's stored
closed-loop state, the augmented covariance is carried forward from the
parent, and the edge is kept only if the collision probability with every
obstacle stays below the threshold at every time step. Uncertainty therefore
accumulates along branches, including across GPS-denied stretches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import networkx as nx
import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import lincov
from .collision import ObstacleMap, first_violation, path_collision_probabilities, vehicle_position_cov
from .simulation import Nominal, simulate_nominal
from .uav import UAV

START = 0
GOAL = "goal"


class NoPathError(RuntimeError):
    pass


class EdgeTimeout(RuntimeError):
    pass


@dataclass(frozen=True)
class PlannerConfig:
    """
    Parameters
    ----------
    bounds_min, bounds_max : (2,) array_like
        Sampling box in north/east.
    p_max : float
        Collision-probability threshold, in (0, 1].
    iterations : int
    step : float
        Steering distance; also the goal-connection radius.
    goal_bias : float
        Probability that a sample is the goal itself.
    time_cap_factor : float
        An edge is abandoned after this many times its straight-line flight time.
    """

    bounds_min: tuple[float, float]
    bounds_max: tuple[float, float]
    p_max: float
    iterations: int = 3000
    step: float = 100.0
    goal_bias: float = 0.05
    time_cap_factor: float = 3.0

    def __post_init__(self):
        lo = np.asarray(self.bounds_min, dtype=float).reshape(2)
        hi = np.asarray(self.bounds_max, dtype=float).reshape(2)
        if np.any(lo > hi):
            raise ValueError("sampling bounds must satisfy min <= max")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if not self.step > 0:
            raise ValueError("step must be positive")
        if not 0.0 < self.p_max <= 1.0:
            raise ValueError("p_max must lie in (0, 1]")
        if not 0.0 <= self.goal_bias <= 1.0:
            raise ValueError("goal_bias must lie in [0, 1]")
        if not self.time_cap_factor > 1.0:
            raise ValueError("time_cap_factor must exceed 1")
        object.__setattr__(self, "bounds_min", tuple(lo.tolist()))
        object.__setattr__(self, "bounds_max", tuple(hi.tolist()))

    def contains(self, p: ArrayLike) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.bounds_min) and np.all(p <= self.bounds_max))


@dataclass
class Mission:
    """Everything an edge simulation needs besides the endpoints."""

    model: UAV
    obstacles: ObstacleMap
    denied: tuple = ()
    dt: float = 0.01
    gps_every: int = 100
    substeps: int = lincov.SUBSTEPS


@dataclass
class Vertex:
    """Tree vertex with the full state needed to continue simulating from it."""

    index: int
    position: NDArray
    z: NDArray
    P_hat: NDArray
    C_A: NDArray
    step: int
    t: float


@dataclass
class Edge:
    parent: int
    child: int | str
    dt: float
    t: NDArray
    positions: NDArray
    P_uav: NDArray
    healthy: bool = True
    worst_ratio: float = 0.0


@dataclass
class EdgeResult:
    nominal: Nominal
    series: lincov.LinCovSeries
    dt: float
    free: bool


def sample(rng: np.random.Generator, bounds_min: ArrayLike, bounds_max: ArrayLike) -> NDArray:
    """Uniform point in the box."""
    return rng.uniform(np.asarray(bounds_min, dtype=float), np.asarray(bounds_max, dtype=float))


def nearest(points: ArrayLike, p: ArrayLike) -> int:
    """Index of the closest point; ties go to the lowest index."""
    points = np.asarray(points, dtype=float)
    if points.shape[0] == 0:
        raise ValueError("no vertices to search")
    d2 = ((points - np.asarray(p, dtype=float)) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def steer(x_nearest: ArrayLike, x_rand: ArrayLike, step: float) -> NDArray:
    """Point ``step`` away from ``x_nearest`` toward ``x_rand``."""
    if not step > 0:
        raise ValueError("step must be positive")
    a = np.asarray(x_nearest, dtype=float)
    b = np.asarray(x_rand, dtype=float)
    d = b - a
    norm = np.hypot(d[0], d[1])
    if norm == 0:
        raise ValueError("cannot steer toward the current position")
    if norm == step:
        return b.copy()
    return a + step * d / norm


def run_sim(mission: Mission, vertex: Vertex, to_point: ArrayLike,
            time_cap_factor: float = 3.0) -> tuple[Nominal, float]:
    """
    Fly the straight segment from the vertex position to ``to_point``.

    Raises
    ------
    EdgeTimeout
        If the along-track target is not reached within the time cap.
    """
    to_point = np.asarray(to_point, dtype=float)
    length = float(np.hypot(*(to_point - vertex.position)))
    cap = time_cap_factor * length / mission.model.params.vehicle.V_bar
    nominal, done = simulate_nominal(
        mission.model, vertex.z, vertex.P_hat, np.stack([vertex.position, to_point]),
        dt=mission.dt, gps_every=mission.gps_every, denied=mission.denied, max_time=cap,
        step0=vertex.step, t0=vertex.t, edge=True)
    if not done:
        raise EdgeTimeout(f"segment of {length:.1f} m not completed within {cap:.1f} s")
    return nominal, nominal.duration


def propagate_edge(mission: Mission, vertex: Vertex, to_point: ArrayLike, p_max: float,
                   time_cap_factor: float = 3.0) -> EdgeResult:
    """Nominal, continued LinCov and chance-constraint verdict for one edge."""
    nominal, dt = run_sim(mission, vertex, to_point, time_cap_factor)
    series = lincov.run(mission.model, nominal, vertex.C_A, substeps=mission.substeps)
    free = collision_free(nominal, series, mission.obstacles, p_max)
    return EdgeResult(nominal, series, dt, free)


def collision_free(nominal: Nominal, series: lincov.LinCovSeries, obstacles: ObstacleMap,
                   p_max: float) -> bool:
    """True when every obstacle's probability stays below ``p_max`` at every step."""
    if series.t.size != nominal.t.size:
        raise ValueError("LinCov series must be on the nominal grid")
    return first_violation(nominal.x[:, :2], vehicle_position_cov(series.D_true),
                           obstacles, p_max) is None


def select_path(graph: nx.DiGraph, source=START, target=GOAL) -> list:
    """Minimum total traversal time path from ``source`` to ``target``."""
    try:
        return nx.dijkstra_path(graph, source, target, weight="dt")
    except (nx.NetworkXNoPath, nx.NodeNotFound) as exc:
        raise NoPathError("no path found") from exc


@dataclass
class PathEvaluation:
    """End-to-end LinCov re-run of a waypoint path."""

    t: NDArray
    positions: NDArray
    C_A: NDArray
    peak: NDArray
    series: NDArray
    duration: float

    @property
    def D_true(self) -> NDArray:
        return lincov.extract_dispersion(self.C_A)


@dataclass
class PlanResult:
    graph: nx.DiGraph
    vertices: list[Vertex]
    edges: list[Edge]
    goal: NDArray
    path: list = field(default_factory=list)
    waypoints: NDArray | None = None
    evaluation: PathEvaluation | None = None
    iterations: int = 0

    @property
    def found(self) -> bool:
        return bool(self.path)

    def covariance_health(self) -> tuple[bool, float]:
        """Health of the augmented covariance over every step of every accepted edge."""
        if not self.edges:
            return lincov.covariance_health(self.vertices[0].C_A)
        return (all(e.healthy for e in self.edges), min(e.worst_ratio for e in self.edges))

    def accepted_edges(self) -> set[tuple[tuple[float, float], tuple[float, float]]]:
        """Accepted edges as (parent position, child position) pairs."""
        out = set()
        for e in self.edges:
            a = tuple(self.vertices[e.parent].position.tolist())
            b = tuple(self.goal.tolist()) if e.child == GOAL else tuple(self.vertices[e.child].position.tolist())
            out.add((a, b))
        return out


def root_vertex(model: UAV, start: ArrayLike, heading: float, P0: ArrayLike, C0: ArrayLike) -> Vertex:
    start = np.asarray(start, dtype=float)
    return Vertex(START, start.copy(), model.trim_state(start, heading), np.asarray(P0, dtype=float),
                  np.asarray(C0, dtype=float), 0, 0.0)


def _child(index: int, position: NDArray, res: EdgeResult) -> Vertex:
    nom = res.nominal
    return Vertex(index, position, nom.z[-1].copy(), nom.P_hat[-1].copy(), res.series.C_A[-1].copy(),
                  nom.step0 + nom.n_steps, float(nom.t[-1]))


def _edge(parent: int, child, res: EdgeResult) -> Edge:
    ok, worst = lincov.covariance_health(res.series.C_A)
    return Edge(parent, child, res.dt, res.nominal.t, res.nominal.x[:, :2].copy(),
                vehicle_position_cov(res.series.D_true).copy(), ok, worst)


def plan(mission: Mission, root: Vertex, goal: ArrayLike, config: PlannerConfig,
         rng: np.random.Generator) -> PlanResult:
    """
    Grow the tree for ``config.iterations`` iterations and pick the fastest path.

    Every iteration draws one goal-bias variate and one uniform point, so the
    random stream advances identically whatever the threshold.
    """
    goal = np.asarray(goal, dtype=float)
    if not (config.contains(root.position) and config.contains(goal)):
        raise ValueError("start and goal must lie inside the sampling bounds")
    graph = nx.DiGraph()
    graph.add_node(START)
    vertices = [root]
    positions = [root.position]
    edges: list[Edge] = []
    for _ in range(config.iterations):
        coin = rng.random()
        point = sample(rng, config.bounds_min, config.bounds_max)
        x_rand = goal if coin < config.goal_bias else point
        j = nearest(np.asarray(positions), x_rand)
        parent = vertices[j]
        if np.array_equal(parent.position, x_rand):
            continue
        x_new = steer(parent.position, x_rand, config.step)
        try:
            res = propagate_edge(mission, parent, x_new, config.p_max, config.time_cap_factor)
        except EdgeTimeout:
            continue
        if not res.free:
            continue
        child = _child(len(vertices), x_new, res)
        vertices.append(child)
        positions.append(x_new)
        edges.append(_edge(parent.index, child.index, res))
        graph.add_edge(parent.index, child.index, dt=res.dt)
        # the goal can only be reached from a vertex that is in the tree
        if np.hypot(*(x_new - goal)) <= config.step and not np.array_equal(x_new, goal):
            try:
                res_goal = propagate_edge(mission, child, goal, config.p_max, config.time_cap_factor)
            except EdgeTimeout:
                continue
            if res_goal.free:
                edges.append(_edge(child.index, GOAL, res_goal))
                graph.add_edge(child.index, GOAL, dt=res_goal.dt)
    result = PlanResult(graph, vertices, edges, goal, iterations=config.iterations)
    if graph.has_node(GOAL):
        path = select_path(graph)
        result.path = path
        result.waypoints = np.array([goal if v == GOAL else vertices[v].position for v in path])
    return result


def evaluate_path(mission: Mission, root: Vertex, waypoints: ArrayLike,
                  time_cap_factor: float = 3.0) -> PathEvaluation:
    """
    Re-fly a waypoint path from the root state and recompute the collision
    probabilities with full quadrature at every step.

    Nothing cached in the tree is used: the nominal and the augmented
    covariance are regenerated segment by segment from ``root``.
    """
    wp = np.asarray(waypoints, dtype=float)
    if wp.shape[0] < 2:
        raise ValueError("a path needs at least two waypoints")
    vertex = Vertex(root.index, wp[0].copy(), root.z.copy(), root.P_hat.copy(), root.C_A.copy(),
                    root.step, root.t)
    t_parts, pos_parts, C_parts = [], [], []
    for k in range(1, wp.shape[0]):
        nominal, _ = run_sim(mission, vertex, wp[k], time_cap_factor)
        series = lincov.run(mission.model, nominal, vertex.C_A, substeps=mission.substeps)
        first = 0 if k == 1 else 1  # shared boundary point appears once
        t_parts.append(nominal.t[first:])
        pos_parts.append(nominal.x[first:, :2])
        C_parts.append(series.C_A[first:])
        vertex = Vertex(k, wp[k].copy(), nominal.z[-1].copy(), nominal.P_hat[-1].copy(),
                        series.C_A[-1].copy(), nominal.step0 + nominal.n_steps, float(nominal.t[-1]))
    t = np.concatenate(t_parts)
    positions = np.concatenate(pos_parts)
    C_A = np.concatenate(C_parts)
    D_true = lincov.extract_dispersion(C_A)
    peak, probs = path_collision_probabilities(positions, vehicle_position_cov(D_true), mission.obstacles)
    return PathEvaluation(t, positions, C_A, peak, probs, float(t[-1] - t[0]))
