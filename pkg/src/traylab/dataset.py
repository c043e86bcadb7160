"""Problem generation and on-disk persistence.

Each problem pairs a task scene (5-9 instances, question-specific pusher
velocity) with a simpler auxiliary scene that shares the task's per-class
contact parameters and is struck by a fixed reference push; the auxiliary
trajectories are the estimation target while the task scene's final frame
defines the question answer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .physics import (
    CLASSES,
    CLASS_ORDER,
    ObjectSpec,
    PhysicsParams,
    SceneError,
    SimConfig,
    TrajectorySet,
    format_trajectories,
    make_scene_spec,
    run_simulation,
    validate_layout,
)
from .render import raster_to_png, render_top_down
from .scene_dsl import PALETTE_ORDER, SceneProgram, emit_program
from .physics import TRAY_PHYSICS, PUSHER_START, PUSHER_HEIGHT

__all__ = [
    "AUX_PUSHER_VELOCITY",
    "PARAM_RANGES",
    "DatasetConfig",
    "ProblemInstance",
    "DatasetError",
    "sample_params",
    "generate_problem",
    "compute_ground_truth",
    "layout_program",
    "persist",
    "load",
]

AUX_PUSHER_VELOCITY = (-4.8, -4.8)
TASK_VELOCITY_RANGE = (-7.0, -3.0)

# Per-parameter generation intervals; booleans flag open endpoints.
PARAM_RANGES = {
    "sliding_friction": (0.1, 1.0, True, False),
    "armature": (0.0, 1.0, True, True),
    "stiffness": (0.0, 1.0, True, True),
    "damping": (0.0, 10.0, True, True),
}

THREE_CLASSES = ("bottle", "martini_glass", "wine_glass")
FIVE_CLASSES = CLASS_ORDER


class DatasetError(ValueError):
    """A problem directory is missing or structurally corrupt."""


@dataclass(frozen=True)
class DatasetConfig:
    n_problems: int = 100
    class_names: tuple = THREE_CLASSES
    seed: int = 0
    min_instances: int = 5
    max_instances: int = 9
    sim: SimConfig = field(default_factory=SimConfig)


@dataclass
class ProblemInstance:
    problem_id: str
    class_params: dict  # class name -> PhysicsParams (ground truth)
    task_layout: tuple  # tuple[ObjectSpec, ...]
    aux_layout: tuple
    task_pusher_velocity: tuple
    aux_pusher_velocity: tuple = AUX_PUSHER_VELOCITY
    qa_candidates: tuple = ()
    qa_answer: frozenset | None = None
    # Derived, recomputable cache; excluded from equality.
    aux_trajectories: TrajectorySet | None = field(default=None, compare=False)

    def classes_present(self) -> tuple:
        present = {obj.class_name for obj in self.task_layout}
        return tuple(c for c in CLASS_ORDER if c in present)


def _sample_open_decimal(rng, lo: float, hi: float, lo_open: bool, hi_open: bool) -> float:
    """Uniform in [lo, hi], rounded to one decimal; boundary values that fall
    on an open endpoint are rejected and redrawn."""
    while True:
        value = round(float(rng.uniform(lo, hi)), 1)
        if value < lo or (lo_open and value == lo):
            continue
        if value > hi or (hi_open and value == hi):
            continue
        return value


def sample_params(rng, class_name: str) -> PhysicsParams:
    values = {
        name: _sample_open_decimal(rng, *spec) for name, spec in PARAM_RANGES.items()
    }
    return PhysicsParams(mass=CLASSES[class_name].default_mass, **values)


def _sample_layout(rng, class_names, n_instances: int, start_id: int = 1) -> tuple:
    cells = [(r, c) for r in (1, 2, 3) for c in (1, 2, 3)]
    cell_idx = rng.choice(len(cells), size=n_instances, replace=False)
    colors = rng.choice(len(PALETTE_ORDER), size=n_instances, replace=False)
    objects = []
    for i in range(n_instances):
        cls = class_names[int(rng.integers(0, len(class_names)))]
        r, c = cells[int(cell_idx[i])]
        objects.append(
            ObjectSpec(
                object_id=start_id + i,
                class_name=cls,
                row=r,
                col=c,
                color=PALETTE_ORDER[int(colors[i])],
            )
        )
    return tuple(objects)


def _aux_layout_for(rng, task_layout) -> tuple:
    """One instance per distinct task class, filled row-major from row 1."""
    present = [c for c in CLASS_ORDER if any(o.class_name == c for o in task_layout)]
    cells = [(r, c) for r in (1, 2, 3) for c in (1, 2, 3)]
    colors = rng.choice(len(PALETTE_ORDER), size=len(present), replace=False)
    return tuple(
        ObjectSpec(
            object_id=i + 1,
            class_name=cls,
            row=cells[i][0],
            col=cells[i][1],
            color=PALETTE_ORDER[int(colors[i])],
        )
        for i, cls in enumerate(present)
    )


def generate_problem(seed: int, config: DatasetConfig = DatasetConfig()) -> ProblemInstance:
    """Deterministically generate one problem from a seed.

    Ground-truth parameters are drawn per class on the one-decimal grid inside
    their open generation intervals; the auxiliary push is fixed while the
    task push varies per problem.
    """
    rng = np.random.default_rng(seed)
    class_params = {cls: sample_params(rng, cls) for cls in config.class_names}
    n_instances = int(rng.integers(config.min_instances, config.max_instances + 1))
    task_layout = _sample_layout(rng, config.class_names, n_instances)
    aux_layout = _aux_layout_for(rng, task_layout)
    velocity = (
        round(float(rng.uniform(*TASK_VELOCITY_RANGE)), 1),
        round(float(rng.uniform(*TASK_VELOCITY_RANGE)), 1),
    )
    candidate_idx = rng.choice(n_instances, size=5, replace=False)
    candidates = tuple(task_layout[int(i)].color for i in sorted(candidate_idx))
    validate_layout(task_layout)
    validate_layout(aux_layout)
    problem = ProblemInstance(
        problem_id=f"problem_{seed:05d}",
        class_params=class_params,
        task_layout=task_layout,
        aux_layout=aux_layout,
        task_pusher_velocity=velocity,
        qa_candidates=candidates,
    )
    return compute_ground_truth(problem, config.sim)


def compute_ground_truth(problem: ProblemInstance, sim: SimConfig = SimConfig()) -> ProblemInstance:
    """Simulate both scenes with the ground-truth parameters: cache the
    auxiliary trajectories and record the stable candidate subset."""
    aux_spec = make_scene_spec(problem.aux_layout, problem.class_params, problem.aux_pusher_velocity)
    aux_traj, _, _ = run_simulation(aux_spec, sim)
    task_spec = make_scene_spec(problem.task_layout, problem.class_params, problem.task_pusher_velocity)
    _, _, report = run_simulation(task_spec, sim)
    stable_colors = {
        obj.color for obj in problem.task_layout if report.stable[obj.object_id]
    }
    problem.aux_trajectories = aux_traj
    problem.qa_answer = frozenset(c for c in problem.qa_candidates if c in stable_colors)
    return problem


def layout_program(layout, class_params: dict) -> SceneProgram:
    """Wrap a layout and its class parameters as a canonical scene program."""
    decls = tuple(replace(obj, physics=class_params[obj.class_name]) for obj in layout)
    return SceneProgram(
        pusher_start=(PUSHER_START[0], PUSHER_START[1], PUSHER_HEIGHT),
        tray_physics=TRAY_PHYSICS,
        declarations=decls,
    )


def _params_to_json(params: PhysicsParams) -> dict:
    return {
        "sliding_friction": params.sliding_friction,
        "armature": params.armature,
        "stiffness": params.stiffness,
        "damping": params.damping,
        "mass": params.mass,
    }


def _layout_to_json(layout) -> list:
    return [
        {
            "object_id": obj.object_id,
            "class": obj.class_name,
            "row": obj.row,
            "col": obj.col,
            "color": obj.color,
        }
        for obj in layout
    ]


def _layout_from_json(data) -> tuple:
    return tuple(
        ObjectSpec(
            object_id=int(o["object_id"]),
            class_name=o["class"],
            row=int(o["row"]),
            col=int(o["col"]),
            color=o["color"],
        )
        for o in data
    )


def problem_to_json(problem: ProblemInstance) -> dict:
    return {
        "problem_id": problem.problem_id,
        "class_params": {
            cls: _params_to_json(p) for cls, p in sorted(problem.class_params.items())
        },
        "task_layout": _layout_to_json(problem.task_layout),
        "aux_layout": _layout_to_json(problem.aux_layout),
        "task_pusher_velocity": list(problem.task_pusher_velocity),
        "aux_pusher_velocity": list(problem.aux_pusher_velocity),
        "qa_candidates": list(problem.qa_candidates),
        "qa_answer": sorted(problem.qa_answer) if problem.qa_answer is not None else None,
    }


def problem_from_json(data: dict) -> ProblemInstance:
    return ProblemInstance(
        problem_id=data["problem_id"],
        class_params={
            cls: PhysicsParams(**vals) for cls, vals in data["class_params"].items()
        },
        task_layout=_layout_from_json(data["task_layout"]),
        aux_layout=_layout_from_json(data["aux_layout"]),
        task_pusher_velocity=tuple(data["task_pusher_velocity"]),
        aux_pusher_velocity=tuple(data["aux_pusher_velocity"]),
        qa_candidates=tuple(data["qa_candidates"]),
        qa_answer=frozenset(data["qa_answer"]) if data["qa_answer"] is not None else None,
    )


def persist(problem: ProblemInstance, path, sim: SimConfig = SimConfig()) -> Path:
    """Write one problem directory: problem.json, the auxiliary trajectory
    text, canonical programs for both scenes, and the task top-down render."""
    if problem.aux_trajectories is None or problem.qa_answer is None:
        compute_ground_truth(problem, sim)
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    (out / "problem.json").write_text(
        json.dumps(problem_to_json(problem), indent=2, sort_keys=True) + "\n"
    )
    (out / "aux_trajectories.txt").write_text(
        format_trajectories(problem.aux_trajectories, sim.sample_stride)
    )
    (out / "aux_program.txt").write_text(
        emit_program(layout_program(problem.aux_layout, problem.class_params))
    )
    (out / "task_program.txt").write_text(
        emit_program(layout_program(problem.task_layout, problem.class_params))
    )
    (out / "top_down.png").write_bytes(raster_to_png(render_top_down(problem.task_layout)))
    return out


def load(path, sim: SimConfig = SimConfig(), recompute: bool = True) -> ProblemInstance:
    """Invert :func:`persist`; recomputes the trajectory cache by default."""
    manifest = Path(path) / "problem.json"
    if not manifest.exists():
        raise DatasetError(f"missing {manifest}")
    try:
        data = json.loads(manifest.read_text())
        problem = problem_from_json(data)
    except (KeyError, TypeError, ValueError, SceneError) as exc:
        raise DatasetError(f"corrupt {manifest}: {exc}") from None
    if recompute:
        compute_ground_truth(problem, sim)
    return problem
