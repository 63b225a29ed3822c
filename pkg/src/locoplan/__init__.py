"""Whole-body trajectory optimization with force-disturbance margins.

Plan multi-contact motions for floating-base robots, score every knot by
the smallest end-effector force the scheduled contacts cannot reject, and
re-optimize trajectories to maximize that margin.
"""
from .model import (RobotModel, SpatialInertia, LinkSpec, JointSpec, ContactPoint,
                    EndEffector, ModelError, SchemaError, ValidationError,
                    parse_model, load_model, model_hash, builtin_model, builtin_models)
from .spatial import Transform, mrp_to_rotation, rotation_to_mrp, mrp_rate
from .solver import (SolverOptions, SolveResult, NlpProblem, CallbackError,
                     solve, default_initial_guess, path_initial_guess,
                     check_derivatives, audit_derivatives)
from .robustness import (SufKnot, SufProfile, DynamicsMismatch, InfeasibleNominal,
                         UnknownLeg, suf_at_knot, suf_of_trajectory, suf_oracle,
                         oracle_directions, leg_failure_analysis,
                         assemble_robust_problem, seed_from_plan)
from .tasks import (TaskSpec, TaskPhase, TaskWaypoint, load_task, load_task_file,
                    task_to_dict, builtin_tasks, get_task, build_problem,
                    initial_guess)
from . import cli, dynamics, robustness, solver, spatial, tasks, transcription

__version__ = "0.1.0"

__all__ = [
    "RobotModel", "SpatialInertia", "LinkSpec", "JointSpec", "ContactPoint",
    "EndEffector", "ModelError", "SchemaError", "ValidationError",
    "parse_model", "load_model", "model_hash", "builtin_model", "builtin_models",
    "Transform", "mrp_to_rotation", "rotation_to_mrp", "mrp_rate",
    "SolverOptions", "SolveResult", "NlpProblem", "CallbackError",
    "solve", "default_initial_guess", "path_initial_guess",
    "check_derivatives", "audit_derivatives",
    "SufKnot", "SufProfile", "DynamicsMismatch", "InfeasibleNominal",
    "UnknownLeg", "suf_at_knot", "suf_of_trajectory", "suf_oracle",
    "oracle_directions", "leg_failure_analysis",
    "assemble_robust_problem", "seed_from_plan",
    "TaskSpec", "TaskPhase", "TaskWaypoint", "load_task", "load_task_file",
    "task_to_dict", "builtin_tasks", "get_task", "build_problem", "initial_guess",
    "cli", "dynamics", "robustness", "solver", "spatial", "tasks", "transcription",
]
