"""quadnav: hierarchical path planning for a quadruped in voxel worlds."""

__version__ = "0.1.0"

from .global_planner import GlobalPath, plan, valid_discrete_state
from .kinematics import RobotConfig, RobotState, leg_fk, leg_ik, solve_state, standing_height_max
from .local_planner import LocalResult, LocalState, PropagationParams, refine
from .maps import ActionWeightMap, PositionalWeightMap, VoxelMap, support_distance, world_to_discrete
from .orchestrator import RunReport, run_learning
from .world import BoxObstacle, Scenario, generate_stairs, load_scenario, save_scenario, voxelize

__all__ = [
    "ActionWeightMap",
    "BoxObstacle",
    "GlobalPath",
    "LocalResult",
    "LocalState",
    "PositionalWeightMap",
    "PropagationParams",
    "RobotConfig",
    "RobotState",
    "RunReport",
    "Scenario",
    "VoxelMap",
    "generate_stairs",
    "leg_fk",
    "leg_ik",
    "load_scenario",
    "plan",
    "refine",
    "run_learning",
    "save_scenario",
    "solve_state",
    "standing_height_max",
    "support_distance",
    "valid_discrete_state",
    "voxelize",
    "world_to_discrete",
]
