import itertools

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clincov import lincov, rrt
from clincov.collision import ObstacleMap
from clincov.simulation import Nominal

P0 = np.diag([1.0, 1.0, 0.05**2, np.deg2rad(1.0) ** 2])
D0 = np.diag([1.0, 1.0, 0.05**2, np.deg2rad(1.0) ** 2, 0.0, 0.0, 0.0])


def _obstacles(points, sigma=40.0):
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    return ObstacleMap(pts, np.repeat((sigma**2 * np.eye(2))[None], len(pts), axis=0), [10.0, 10.0])


@pytest.fixture(scope="module")
def root(model):
    return rrt.root_vertex(model, [0.0, 0.0], 0.0, P0, lincov.initial_covariance(D0, P0, np.eye(7)))


# -- primitives ---------------------------------------------------------------

def test_sample_uniform_mean():
    rng = np.random.default_rng(0)
    lo, hi = np.array([-200.0, 100.0]), np.array([1200.0, 300.0])
    pts = np.array([rrt.sample(rng, lo, hi) for _ in range(100_000)])
    assert np.all(pts >= lo) and np.all(pts <= hi)
    se = (hi - lo) / np.sqrt(12 * pts.shape[0])
    assert np.all(np.abs(pts.mean(axis=0) - (lo + hi) / 2) <= 3 * se)


def test_sample_degenerate_and_reproducible():
    rng = np.random.default_rng(1)
    np.testing.assert_array_equal(rrt.sample(rng, [5.0, 5.0], [5.0, 5.0]), [5.0, 5.0])
    a = rrt.sample(np.random.default_rng(9), [0, 0], [1, 1])
    b = rrt.sample(np.random.default_rng(9), [0, 0], [1, 1])
    np.testing.assert_array_equal(a, b)


def test_nearest_matches_linear_scan():
    rng = np.random.default_rng(2)
    V = rng.uniform(-1000, 1000, (1000, 2))
    for _ in range(200):
        p = rng.uniform(-1000, 1000, 2)
        brute = min(range(len(V)), key=lambda i: (np.hypot(*(V[i] - p)), i))
        assert rrt.nearest(V, p) == brute


def test_nearest_examples():
    V = np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 5.0]])
    assert rrt.nearest(V[:1], [7.0, 7.0]) == 0
    assert rrt.nearest(V, V[2]) == 2
    assert rrt.nearest(V, [1.0, 0.0]) == 0  # tie goes to the lower index
    with pytest.raises(ValueError):
        rrt.nearest(np.zeros((0, 2)), [0.0, 0.0])


def test_steer_examples():
    np.testing.assert_array_equal(rrt.steer([0.0, 0.0], [60.0, 80.0], 100.0), [60.0, 80.0])
    np.testing.assert_allclose(rrt.steer([0.0, 0.0], [300.0, 400.0], 100.0), [60.0, 80.0])
    np.testing.assert_allclose(rrt.steer([10.0, 10.0], [10.0, 11.0], 100.0), [10.0, 110.0])
    with pytest.raises(ValueError):
        rrt.steer([1.0, 1.0], [1.0, 1.0], 100.0)
    with pytest.raises(ValueError):
        rrt.steer([0.0, 0.0], [1.0, 1.0], 0.0)
    with pytest.raises(ValueError):
        rrt.PlannerConfig([0, 0], [1, 1], 0.01, step=0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4), st.floats(1.0, 200.0))
def test_steer_is_on_the_ray(coords, step):
    a, b = np.array(coords[:2]), np.array(coords[2:])
    dist = np.hypot(*(b - a))
    if dist < 1e-6:
        return
    x = rrt.steer(a, b, step)
    assert np.hypot(*(x - a)) == pytest.approx(step, rel=1e-9)
    # colinear and on the same side as x_rand
    cross = (x - a)[0] * (b - a)[1] - (x - a)[1] * (b - a)[0]
    assert abs(cross) <= 1e-9 * step * dist
    assert np.dot(x - a, b - a) > 0
    if dist >= step:
        assert np.dot(x - a, b - x) >= -1e-9 * dist * step


def test_run_sim_straight_segment(model, root):
    mission = rrt.Mission(model, ObstacleMap.empty())
    nominal, dt = rrt.run_sim(mission, root, [350.0, 0.0])
    assert dt == pytest.approx(350.0 / 35.0, rel=0.05)
    assert nominal.t[0] == 0.0 and nominal.t[-1] == pytest.approx(dt)
    again, dt2 = rrt.run_sim(mission, root, [350.0, 0.0])
    assert dt2 == dt
    np.testing.assert_array_equal(again.z, nominal.z)


def test_run_sim_turn_takes_longer(model, root):
    mission = rrt.Mission(model, ObstacleMap.empty())
    _, dt = rrt.run_sim(mission, root, [0.0, 100.0])
    assert dt > 100.0 / 35.0


def test_run_sim_time_cap(model, root):
    mission = rrt.Mission(model, ObstacleMap.empty())
    with pytest.raises(rrt.EdgeTimeout):
        # a short segment behind the vehicle cannot be flown in 1.1x the kinematic time
        rrt.run_sim(mission, root, [-20.0, 0.0], time_cap_factor=1.1)


def test_child_continues_parent_state(model, root):
    mission = rrt.Mission(model, ObstacleMap.empty())
    res = rrt.propagate_edge(mission, root, [100.0, 0.0], 0.01)
    child = rrt._child(1, np.array([100.0, 0.0]), res)
    assert child.step == res.nominal.n_steps and child.t == pytest.approx(res.dt)
    np.testing.assert_array_equal(child.C_A, res.series.C_A[-1])
    res2 = rrt.propagate_edge(mission, child, [200.0, 0.0], 0.01)
    np.testing.assert_array_equal(res2.nominal.z[0], child.z)
    np.testing.assert_array_equal(res2.series.C_A[0], child.C_A)
    assert res2.nominal.t[0] == child.t


def _straight_series(n=201, pos_var=1600.0):
    x = np.linspace(-100, 100, n)
    z = np.zeros((n, 13))
    z[:, 0] = x
    C = np.zeros((n, 13, 13))
    C[:, 0, 0] = C[:, 1, 1] = pos_var
    nominal = Nominal(t=0.01 * np.arange(n), z=z, u=np.zeros((n, 2)), y=np.zeros((n, 2)),
                      seg=np.zeros(n, dtype=int), waypoints=np.array([[-100.0, 0.0], [100.0, 0.0]]),
                      P_hat=np.zeros((n, 4, 4)), gps_update=np.zeros(n, dtype=bool),
                      K=np.zeros((n, 4, 3)), dt=0.01)
    return nominal, lincov.LinCovSeries(nominal.t, C, nominal.P_hat)


def test_collision_free_examples():
    nominal, series = _straight_series()
    assert rrt.collision_free(nominal, series, ObstacleMap.empty(), 0.01)
    centred = _obstacles([[0.0, 0.0]])
    assert not rrt.collision_free(nominal, series, centred, 0.01)
    assert rrt.collision_free(nominal, series, centred, 0.05)


def test_select_path_examples():
    g = nx.DiGraph()
    g.add_edge(0, rrt.GOAL, dt=3.0)
    assert rrt.select_path(g) == [0, rrt.GOAL]
    g = nx.DiGraph()
    g.add_edge(0, 1, dt=5.0)
    g.add_edge(1, rrt.GOAL, dt=5.0)
    g.add_edge(0, 2, dt=6.0)
    g.add_edge(2, rrt.GOAL, dt=6.0)
    assert rrt.select_path(g) == [0, 1, rrt.GOAL]
    g = nx.DiGraph()
    g.add_edge(0, 1, dt=1.0)
    g.add_node(rrt.GOAL)
    with pytest.raises(rrt.NoPathError, match="no path found"):
        rrt.select_path(g)


def _path_cost(g, path):
    return sum(g[a][b]["dt"] for a, b in zip(path, path[1:]))


@pytest.mark.parametrize("seed", range(20))
def test_select_path_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 10))
    g = nx.DiGraph()
    nodes = [0] + list(range(1, n - 1)) + [rrt.GOAL]
    for i, j in itertools.combinations(range(n), 2):
        if rng.random() < 0.5:
            g.add_edge(nodes[i], nodes[j], dt=float(rng.uniform(0.1, 10.0)))
    g.add_nodes_from([0, rrt.GOAL])
    paths = list(nx.all_simple_paths(g, 0, rrt.GOAL))
    if not paths:
        with pytest.raises(rrt.NoPathError):
            rrt.select_path(g)
        return
    best = min(_path_cost(g, p) for p in paths)
    assert _path_cost(g, rrt.select_path(g)) == pytest.approx(best, rel=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-5, 0.5), st.floats(1e-5, 0.5))
def test_edge_verdict_is_monotone_in_threshold(seed, p1, p2):
    """Relaxing the threshold never rejects an edge that a stricter one accepted."""
    from clincov.uav import UAV
    model = UAV()
    rng = np.random.default_rng(seed)
    root = rrt.root_vertex(model, [0.0, 0.0], 0.0, P0, lincov.initial_covariance(D0, P0, np.eye(7)))
    obs = _obstacles(rng.uniform([-20, -150], [150, 150], (3, 2)))
    target = rrt.steer([0.0, 0.0], rng.uniform([10, -100], [100, 100]), 100.0)
    mission = rrt.Mission(model, obs)
    nominal, _ = rrt.run_sim(mission, root, target)
    series = lincov.run(model, nominal, root.C_A)
    lo, hi = sorted([p1, p2])
    if rrt.collision_free(nominal, series, obs, lo):
        assert rrt.collision_free(nominal, series, obs, hi)


# -- full planner -------------------------------------------------------------

@pytest.fixture(scope="module")
def free_plan(model, root):
    cfg = rrt.PlannerConfig([-100, -100], [600, 600], p_max=0.01, iterations=400)
    mission = rrt.Mission(model, ObstacleMap.empty())
    return rrt.plan(mission, root, [500.0, 500.0], cfg, np.random.default_rng(5))


def test_free_world_path_near_kinematic_time(free_plan):
    assert free_plan.found
    total = _path_cost(free_plan.graph, free_plan.path)
    kinematic = np.hypot(500, 500) / 35.0
    assert kinematic <= total <= 1.3 * kinematic


def test_tree_structure(free_plan):
    g = free_plan.graph
    assert g.in_degree(rrt.START) == 0
    for v in g.nodes:
        if v not in (rrt.START, rrt.GOAL):
            assert g.in_degree(v) == 1
            assert nx.has_path(g, rrt.START, v)
    assert g.out_degree(rrt.GOAL) == 0
    assert all(d["dt"] > 0 for _, _, d in g.edges(data=True))
    assert g.number_of_edges() == len(free_plan.edges)
    assert free_plan.covariance_health()[0]
    np.testing.assert_array_equal(free_plan.waypoints[0], [0.0, 0.0])
    np.testing.assert_array_equal(free_plan.waypoints[-1], [500.0, 500.0])


def test_planner_is_deterministic(model, root, free_plan):
    cfg = rrt.PlannerConfig([-100, -100], [600, 600], p_max=0.01, iterations=400)
    again = rrt.plan(rrt.Mission(model, ObstacleMap.empty()), root, [500.0, 500.0], cfg,
                     np.random.default_rng(5))
    assert again.path == free_plan.path
    assert again.accepted_edges() == free_plan.accepted_edges()


def test_unit_threshold_never_rejects(model, root):
    cfg = rrt.PlannerConfig([-100, -100], [400, 400], p_max=1.0, iterations=60)
    crowded = _obstacles([[100.0, 0.0], [0.0, 100.0], [100.0, 100.0], [200.0, 200.0]])
    a = rrt.plan(rrt.Mission(model, crowded), root, [300.0, 300.0], cfg, np.random.default_rng(3))
    b = rrt.plan(rrt.Mission(model, ObstacleMap.empty()), root, [300.0, 300.0], cfg, np.random.default_rng(3))
    assert a.accepted_edges() == b.accepted_edges()


def test_start_and_goal_must_be_in_bounds(model, root):
    cfg = rrt.PlannerConfig([-100, -100], [400, 400], p_max=0.01, iterations=5)
    with pytest.raises(ValueError, match="bounds"):
        rrt.plan(rrt.Mission(model, ObstacleMap.empty()), root, [900.0, 0.0], cfg, np.random.default_rng(0))


def test_evaluate_path_reproduces_tree_edges(model, root, free_plan):
    mission = rrt.Mission(model, ObstacleMap.empty())
    ev = rrt.evaluate_path(mission, root, free_plan.waypoints)
    assert ev.duration == pytest.approx(_path_cost(free_plan.graph, free_plan.path), abs=1e-9)
    # the last tree edge ends at the goal with the same covariance as the re-run
    last = [e for e in free_plan.edges if e.child == rrt.GOAL and e.parent == free_plan.path[-2]][0]
    np.testing.assert_allclose(ev.D_true[-1, :2, :2], last.P_uav[-1], rtol=1e-10)
