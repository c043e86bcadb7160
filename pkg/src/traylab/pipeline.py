"""Two-phase optimization loops, question answering and evaluation.

Phase 1 iterates proposer -> simulate auxiliary scene -> trajectory error ->
feedback until the mean error drops below the stop threshold or the budget is
spent; the best-so-far proposal wins.  Phase 2 iterates layout proposals
against the task render under a PSNR stop.  Answers come from simulating the
inferred scene and intersecting the stable set with the candidates.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

from .optimizers import (
    OptTrace,
    OptimizerStepError,
    TracePoint,
    bounds_for_classes,
    unflatten_params,
)
from .physics import SimConfig, make_scene_spec, run_simulation, trajectory_error
from .render import misplaced_colors, psnr, render_top_down

__all__ = [
    "PipelineConfig",
    "QATask",
    "Phase1Result",
    "Phase2Result",
    "EvalReport",
    "run_phase1",
    "run_phase2",
    "answer_question",
    "iou",
    "evaluate",
    "inject_feedback_noise",
    "LayoutProposalError",
]

class LayoutProposalError(RuntimeError):
    """A layout proposal could not be produced or parsed this iteration."""


@dataclass(frozen=True)
class PipelineConfig:
    phase1_max_steps: int = 30
    phase1_epsilon: float = 0.1  # mean trajectory error stop threshold
    phase2_max_steps: int = 5
    phase2_psnr_threshold: float = 45.0  # dB
    feedback_mode: str = "full"  # full | last
    noise_injection: bool = False
    sim: SimConfig = field(default_factory=SimConfig)


@dataclass(frozen=True)
class QATask:
    pusher_velocity: tuple
    candidates: frozenset
    truth: frozenset | None = None
    pusher_start: tuple = (3.0, 3.0)


@dataclass
class Phase1Result:
    best_params: dict  # class -> PhysicsParams
    best_error: float
    trace: OptTrace


@dataclass
class Phase2Result:
    best_layout: tuple
    best_psnr: float
    attempts: list  # of llm.Phase2Attempt paired with layouts

    @property
    def n_iterations(self) -> int:
        return len(self.attempts)


def inject_feedback_noise(per_object_errors: dict, rng) -> dict:
    """Perturb each error by a quarter of the smallest error times a standard
    normal draw; applied to optimizer-visible feedback only."""
    if not per_object_errors:
        raise ValueError("error map must be nonempty")
    e_min = min(per_object_errors.values())
    return {
        key: per_object_errors[key] + e_min * float(rng.standard_normal()) / 4.0
        for key in sorted(per_object_errors)
    }


def _per_class_errors(errors_by_id: dict, layout) -> dict:
    """Re-key per-object errors by class name (auxiliary scenes hold one
    instance per class)."""
    by_class: dict = {}
    for obj in layout:
        if obj.object_id in errors_by_id and obj.class_name not in by_class:
            by_class[obj.class_name] = errors_by_id[obj.object_id]
    return by_class


def run_phase1(problem, proposer, config: PipelineConfig = PipelineConfig(),
               rng=None, noise_rng=None) -> Phase1Result:
    """Estimate per-class parameters against the auxiliary trajectories.

    Proposer failures skip the iteration but still consume budget.  Returns
    the trace argmin (earliest on ties), never the last iterate.
    """
    from .dataset import compute_ground_truth

    if problem.aux_trajectories is None:
        compute_ground_truth(problem, config.sim)
    reference = problem.aux_trajectories
    classes, bounds = bounds_for_classes(problem.classes_present())
    trace = OptTrace()
    for _ in range(config.phase1_max_steps):
        try:
            vector = proposer.propose(trace, bounds, rng)
        except OptimizerStepError as exc:
            warnings.warn(f"optimizer step skipped: {exc}")
            continue
        class_params = unflatten_params(vector, classes)
        spec = make_scene_spec(problem.aux_layout, class_params, problem.aux_pusher_velocity)
        predicted, _, _ = run_simulation(spec, config.sim)
        errors_by_id, mean = trajectory_error(predicted, reference, config.sim.sample_stride)
        per_class = _per_class_errors(errors_by_id, problem.aux_layout)
        if config.noise_injection:
            if noise_rng is None:
                raise ValueError("noise_injection requires a noise_rng")
            shown = inject_feedback_noise(per_class, noise_rng)
        else:
            shown = dict(per_class)
        trace.append(
            TracePoint(
                vector=tuple(float(v) for v in vector),
                per_object_error=per_class,
                total_error=mean,
                feedback_per_object=shown,
                feedback_total=sum(shown.values()) / len(shown),
                class_params=class_params,
            )
        )
        if mean < config.phase1_epsilon:
            break
    if not len(trace):
        raise OptimizerStepError("phase 1 produced no evaluated proposals")
    best = trace.best
    return Phase1Result(best_params=best.class_params, best_error=best.total_error, trace=trace)


def run_phase2(problem, proposer, config: PipelineConfig = PipelineConfig()) -> Phase2Result:
    """Infer the task layout against its top-down render.

    The proposer sees the attempt log (program text, PSNR, misplaced colors)
    and returns ``(layout, program_text)``; unparseable proposals skip the
    iteration.  Stops once the render PSNR reaches the threshold.
    """
    from .llm import Phase2Attempt

    reference_layout = problem.task_layout
    reference = render_top_down(reference_layout)
    attempts: list = []
    layouts: list = []
    for _ in range(config.phase2_max_steps):
        try:
            layout, program_text = proposer.propose(attempts)
        except LayoutProposalError as exc:
            warnings.warn(f"layout proposal skipped: {exc}")
            continue
        rendered = render_top_down(layout)
        score = psnr(rendered, reference)
        bad = misplaced_colors(layout, reference_layout)
        attempts.append(Phase2Attempt(program_text=program_text, psnr=score, misplaced=bad))
        layouts.append(layout)
        if score >= config.phase2_psnr_threshold:
            break
    if not attempts:
        raise LayoutProposalError("phase 2 produced no usable layout proposals")
    best_idx = max(range(len(attempts)), key=lambda i: (attempts[i].psnr, -i))
    return Phase2Result(
        best_layout=layouts[best_idx],
        best_psnr=attempts[best_idx].psnr,
        attempts=attempts,
    )


def answer_question(layout, class_params: dict, qa: QATask,
                    config: PipelineConfig = PipelineConfig()) -> frozenset:
    """Simulate the inferred scene under the question's push and report which
    candidate colors stay upright.  Candidates missing from the layout are
    judged unstable (with a warning)."""
    spec = make_scene_spec(layout, class_params, qa.pusher_velocity, qa.pusher_start)
    _, _, report = run_simulation(spec, config.sim)
    stable_by_color: dict = {}
    for obj in layout:
        if obj.color not in stable_by_color:  # first declaration wins
            stable_by_color[obj.color] = report.stable[obj.object_id]
    answer = set()
    for color in qa.candidates:
        if color not in stable_by_color:
            warnings.warn(f"candidate color {color!r} missing from layout; judged unstable")
            continue
        if stable_by_color[color]:
            answer.add(color)
    return frozenset(answer)


def iou(a, b) -> float:
    """Intersection over union of two answer sets; both empty counts as 1.0."""
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


@dataclass
class EvalReport:
    mean_iou: float
    precise_iou_rate: float
    per_problem_iou: dict
    color_location: float | None = None
    location_type: float | None = None
    color_location_type: float | None = None


def evaluate(predictions: dict, truths: dict, layouts: dict | None = None) -> EvalReport:
    """Score predicted answer sets (and optionally predicted layouts).

    Layout metrics are pooled over all declared objects: the fraction whose
    (color, cell), (cell, class) and full triplet appear in the reference.
    """
    if set(predictions) != set(truths):
        raise ValueError(
            f"problem ids differ: {sorted(predictions)} vs {sorted(truths)}"
        )
    per_problem = {pid: iou(predictions[pid], truths[pid]) for pid in sorted(predictions)}
    n = len(per_problem)
    mean_iou = sum(per_problem.values()) / n if n else 0.0
    precise = sum(1 for v in per_problem.values() if v == 1.0) / n if n else 0.0
    report = EvalReport(
        mean_iou=mean_iou, precise_iou_rate=precise, per_problem_iou=per_problem
    )
    if layouts:
        declared = 0
        cl = lt = clt = 0
        for pid, (pred_layout, ref_layout) in layouts.items():
            ref_cl = {(o.color, o.cell) for o in ref_layout}
            ref_lt = {(o.cell, o.class_name) for o in ref_layout}
            ref_clt = {(o.color, o.cell, o.class_name) for o in ref_layout}
            for o in pred_layout:
                declared += 1
                cl += (o.color, o.cell) in ref_cl
                lt += (o.cell, o.class_name) in ref_lt
                clt += (o.color, o.cell, o.class_name) in ref_clt
        if declared:
            report.color_location = cl / declared
            report.location_type = lt / declared
            report.color_location_type = clt / declared
    return report
