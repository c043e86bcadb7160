"""Workbench for tray-impact reasoning problems.

Generates benchmark problems with a built-in deterministic rigid-body
simulator, estimates per-class contact parameters from auxiliary trajectories
with pluggable black-box optimizers (model-driven, CMA-ES, GP-BO, random),
reconstructs scene layouts from top-down renders, and scores the resulting
stability question answering with IoU.
"""

from .physics import (
    CLASSES,
    CLASS_ORDER,
    ObjectSpec,
    PhysicsParams,
    SceneError,
    SceneSpec,
    SimConfig,
    StabilityReport,
    TrajectorySet,
    format_trajectories,
    make_scene_spec,
    run_simulation,
    stability_report,
    step,
    trajectory_error,
)
from .scene_dsl import (
    PALETTE,
    ProgramParseError,
    SceneProgram,
    emit_program,
    extract_class_params,
    parse_program,
)

__version__ = "0.1.0"
