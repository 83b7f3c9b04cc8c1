"""Closed-loop linear covariance analysis for a planar UAV, with Monte Carlo
validation and a chance-constrained RRT planner."""

from .collision import Gaussian2D, ObstacleMap, box_probability, path_collision_probabilities
from .lincov import LinCovSeries, covariance_health, initial_covariance
from .lincov import run as run_lincov
from .montecarlo import RunConfig, compare, run_ensemble
from .rrt import Mission, PlannerConfig, evaluate_path, plan, root_vertex
from .scenario import Scenario, ScenarioError, parse_scenario
from .simulation import Nominal, Rect, simulate_nominal
from .uav import UAV, UAVParams

__version__ = "0.1.0"

__all__ = [
    "Gaussian2D", "LinCovSeries", "Mission", "Nominal", "ObstacleMap", "PlannerConfig", "Rect",
    "RunConfig", "Scenario", "ScenarioError", "UAV", "UAVParams", "box_probability", "compare",
    "covariance_health", "evaluate_path", "initial_covariance", "parse_scenario",
    "path_collision_probabilities", "plan", "root_vertex", "run_ensemble", "run_lincov",
    "simulate_nominal",
]
