"""Command-line entry point.

Subcommands: ``gen`` (dataset), ``sim`` (one scene from a program file),
``phase1`` (parameter estimation), ``phase2`` (layout inference), ``answer``,
``eval`` (IoU tables) and ``replay`` (full pipeline from a transcript).
Every run writes a manifest sufficient to reproduce it; all randomness is
seeded through ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dataset as ds
from .llm import (
    ChatClient,
    ClientConfig,
    Phase1Context,
    default_phase2_context,
    load_transcript,
)
from .optimizers import (
    CMAESProposer,
    GPBOProposer,
    LLMProposer,
    OptimizerStepError,
    RandomProposer,
    ScriptedProposer,
    bounds_for_classes,
    flatten_params,
)
from .physics import (
    PhysicsParams,
    SceneError,
    SimConfig,
    format_trajectories,
    make_scene_spec,
    run_simulation,
)
from .pipeline import (
    LayoutProposalError,
    PipelineConfig,
    QATask,
    answer_question,
    evaluate,
    run_phase1,
    run_phase2,
)
from .render import export_convergence, raster_to_png, render_top_down
from .scene_dsl import ProgramParseError, parse_program

__all__ = ["main"]


class CliError(RuntimeError):
    pass


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"invalid config file {p}: {exc}") from None


def _setting(args, config: dict, name: str, default):
    """Flag wins over config file wins over default."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    if name in config:
        return config[name]
    return default


def _write_manifest(out: Path, entries: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")


def _params_json(class_params: dict) -> dict:
    return {
        cls: {
            "sliding_friction": p.sliding_friction,
            "armature": p.armature,
            "stiffness": p.stiffness,
            "damping": p.damping,
            "mass": p.mass,
        }
        for cls, p in sorted(class_params.items())
    }


def _params_from_json(data: dict) -> dict:
    return {cls: PhysicsParams(**vals) for cls, vals in data.items()}


def _pipeline_config(args, config: dict) -> PipelineConfig:
    return PipelineConfig(
        phase1_max_steps=int(_setting(args, config, "max_steps", 30)),
        phase1_epsilon=float(_setting(args, config, "epsilon", 0.1)),
        phase2_max_steps=int(_setting(args, config, "phase2_max_steps", 5)),
        phase2_psnr_threshold=float(_setting(args, config, "psnr_threshold", 45.0)),
        feedback_mode=_setting(args, config, "feedback_mode", "full"),
        noise_injection=bool(_setting(args, config, "noise_injection", False)),
        sim=SimConfig(sample_stride=int(_setting(args, config, "sample_stride", 20))),
    )


def _client(args, config: dict, mode: str) -> ChatClient:
    cfg = ClientConfig(
        endpoint=_setting(args, config, "endpoint", ClientConfig.endpoint),
        model=_setting(args, config, "model", ClientConfig.model),
        api_key_env=_setting(args, config, "api_key_env", ClientConfig.api_key_env),
        mode=mode,
    )
    transcript_path = getattr(args, "transcript", None)
    transcript = None
    if mode == "replay":
        if transcript_path is None:
            raise CliError("replay mode needs --transcript")
        transcript = load_transcript(transcript_path)
        transcript_path = None  # replay never writes
    return ChatClient(cfg, transcript=transcript, transcript_path=transcript_path)


def _phase1_proposer(args, config, problem, client_mode):
    name = args.optimizer
    seed = int(_setting(args, config, "seed", 0))
    if name == "random":
        return RandomProposer()
    if name == "cmaes":
        return CMAESProposer(seed=seed)
    if name == "bo":
        return GPBOProposer()
    if name == "scripted":
        if args.script is None:
            raise CliError("--optimizer scripted needs --script FILE")
        entries = json.loads(Path(args.script).read_text())
        classes, _ = bounds_for_classes(problem.classes_present())
        script = [
            flatten_params(_params_from_json(entry), classes) for entry in entries
        ]
        return ScriptedProposer(script)
    if name == "llm":
        client = _client(args, config, client_mode)
        stride = int(_setting(args, config, "sample_stride", 20))
        context = Phase1Context(
            class_names=problem.classes_present(),
            problem_trajectories=format_trajectories(problem.aux_trajectories, stride),
            sample_period=stride * 0.01,
        )
        return LLMProposer(
            client, context, problem.classes_present(),
            feedback_mode=_setting(args, config, "feedback_mode", "full"),
        )
    raise CliError(f"unknown optimizer {name!r}")


def _run_phase1_to_dir(problem, proposer, pcfg: PipelineConfig, out: Path, seed: int):
    rng = np.random.default_rng(seed)
    noise_rng = np.random.default_rng(seed + 1) if pcfg.noise_injection else None
    result = run_phase1(problem, proposer, pcfg, rng=rng, noise_rng=noise_rng)
    out.mkdir(parents=True, exist_ok=True)
    (out / "params.json").write_text(
        json.dumps(_params_json(result.best_params), indent=2, sort_keys=True) + "\n"
    )
    export_convergence([p.total_error for p in result.trace.points], out / "convergence.csv")
    return result


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_gen(args) -> int:
    config = _load_config_file(args.config)
    seed = int(_setting(args, config, "seed", 0))
    n = int(_setting(args, config, "n", 10))
    classes = ds.FIVE_CLASSES if int(_setting(args, config, "classes", 3)) == 5 else ds.THREE_CLASSES
    out = Path(args.out)
    cfg = ds.DatasetConfig(n_problems=n, class_names=classes, seed=seed)

    def build(index: int):
        problem = ds.generate_problem(seed + index, cfg)
        ds.persist(problem, out / problem.problem_id, cfg.sim)
        return problem.problem_id

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            ids = list(pool.map(build, range(n)))
    else:
        ids = [build(i) for i in range(n)]
    _write_manifest(out, {
        "subcommand": "gen", "seed": seed, "n": n,
        "classes": list(classes), "problems": ids, "out": str(out),
    })
    print(f"generated {n} problems in {out}")
    return 0


def _cmd_sim(args) -> int:
    path = Path(args.program)
    if not path.exists():
        raise CliError(f"program file not found: {path}")
    program = parse_program(path.read_text())
    class_params = {}
    for decl in program.declarations:
        class_params.setdefault(decl.class_name, decl.physics)
    velocity = tuple(float(v) for v in args.velocity.split(","))
    if len(velocity) != 2:
        raise CliError("--velocity must be 'vx,vy'")
    spec = make_scene_spec(program.layout(), class_params, velocity,
                           pusher_start=program.pusher_start[:2])
    sim = SimConfig(sample_stride=args.stride)
    trajectories, _, report = run_simulation(spec, sim)
    sys.stdout.write(format_trajectories(trajectories, sim.sample_stride))
    sys.stdout.write("\n")
    for decl in program.declarations:
        verdict = "stable" if report.stable[decl.object_id] else "unstable"
        sys.stdout.write(f"{decl.object_id} {decl.class_name} {decl.color}: {verdict}\n")
    return 0


def _cmd_phase1(args) -> int:
    config = _load_config_file(args.config)
    problem = ds.load(args.problem)
    pcfg = _pipeline_config(args, config)
    seed = int(_setting(args, config, "seed", 0))
    proposer = _phase1_proposer(args, config, problem, args.mode)
    out = Path(args.out)
    result = _run_phase1_to_dir(problem, proposer, pcfg, out, seed)
    _write_manifest(out, {
        "subcommand": "phase1", "problem": str(args.problem), "optimizer": args.optimizer,
        "mode": args.mode, "seed": seed, "max_steps": pcfg.phase1_max_steps,
        "epsilon": pcfg.phase1_epsilon, "feedback_mode": pcfg.feedback_mode,
        "noise_injection": pcfg.noise_injection,
        "transcript": str(args.transcript) if args.transcript else None,
        "config": str(args.config) if args.config else None, "out": str(out),
    })
    print(f"phase1 best error {result.best_error:.6g} after {len(result.trace)} iterations")
    return 0


class _OracleLayoutProposer:
    """Proposes the ground-truth layout (upper-bound / smoke runs)."""

    def __init__(self, problem, class_params):
        self.problem = problem
        self.class_params = class_params

    def propose(self, attempts):
        from .scene_dsl import emit_program

        program = ds.layout_program(self.problem.task_layout, self.class_params)
        return self.problem.task_layout, emit_program(program)


class _LLMLayoutProposer:
    def __init__(self, client, context, task_png, class_params):
        self.client = client
        self.context = context
        self.task_png = task_png
        self.class_params = class_params

    def propose(self, attempts):
        from .llm import build_phase2_messages

        messages = build_phase2_messages(self.context, self.task_png, self.class_params, attempts)
        text = self.client.complete(messages)
        try:
            program = parse_program(text)
        except ProgramParseError as exc:
            raise LayoutProposalError(str(exc)) from None
        return program.layout(), text


def _phase2_proposer(args, config, problem, class_params):
    if args.proposer == "oracle":
        return _OracleLayoutProposer(problem, class_params)
    client = _client(args, config, args.mode)
    context = default_phase2_context(class_names=problem.classes_present())
    task_png = raster_to_png(render_top_down(problem.task_layout))
    return _LLMLayoutProposer(client, context, task_png, class_params)


def _load_params_arg(args, problem) -> dict:
    if args.gt_params or args.params is None:
        if not args.gt_params:
            raise CliError("need --params FILE or --gt-params")
        return dict(problem.class_params)
    return _params_from_json(json.loads(Path(args.params).read_text()))


def _cmd_phase2(args) -> int:
    config = _load_config_file(args.config)
    problem = ds.load(args.problem)
    pcfg = _pipeline_config(args, config)
    class_params = _load_params_arg(args, problem)
    proposer = _phase2_proposer(args, config, problem, class_params)
    result = run_phase2(problem, proposer, pcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .scene_dsl import emit_program

    (out / "layout_program.txt").write_text(
        emit_program(ds.layout_program(result.best_layout, class_params))
    )
    export_convergence([a.psnr for a in result.attempts], out / "psnr.csv")
    _write_manifest(out, {
        "subcommand": "phase2", "problem": str(args.problem), "proposer": args.proposer,
        "mode": args.mode, "seed": int(_setting(args, config, "seed", 0)),
        "psnr_threshold": pcfg.phase2_psnr_threshold, "out": str(out),
        "transcript": str(args.transcript) if args.transcript else None,
    })
    print(f"phase2 best PSNR {result.best_psnr:.1f} dB after {result.n_iterations} iterations")
    return 0


def _cmd_answer(args) -> int:
    problem = ds.load(args.problem)
    class_params = _load_params_arg(args, problem)
    if args.layout:
        layout = parse_program(Path(args.layout).read_text()).layout()
    else:
        layout = problem.task_layout
    qa = QATask(
        pusher_velocity=problem.task_pusher_velocity,
        candidates=frozenset(problem.qa_candidates),
    )
    predicted = answer_question(layout, class_params, qa, PipelineConfig())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "answer.json").write_text(json.dumps({
        "problem_id": problem.problem_id,
        "predicted": sorted(predicted),
        "truth": sorted(problem.qa_answer),
    }, indent=2, sort_keys=True) + "\n")
    print(f"predicted stable candidates: {sorted(predicted)}")
    return 0


def _cmd_eval(args) -> int:
    predictions = {}
    data = json.loads(Path(args.predictions).read_text())
    for pid, colors in data.items():
        predictions[pid] = frozenset(colors)
    truths = {}
    root = Path(args.dataset)
    for pid in predictions:
        truths[pid] = ds.load(root / pid, recompute=False).qa_answer
        if truths[pid] is None:
            truths[pid] = ds.load(root / pid).qa_answer
    report = evaluate(predictions, truths)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "iou.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["problem_id", "iou"])
        for pid in sorted(report.per_problem_iou):
            writer.writerow([pid, repr(report.per_problem_iou[pid])])
        writer.writerow(["mean", repr(report.mean_iou)])
        writer.writerow(["precise_rate", repr(report.precise_iou_rate)])
    print(f"mean IoU {report.mean_iou:.4f}  precise-IoU rate {report.precise_iou_rate:.4f}")
    return 0


def _cmd_replay(args) -> int:
    config = _load_config_file(args.config)
    problem = ds.load(args.problem)
    pcfg = _pipeline_config(args, config)
    seed = int(_setting(args, config, "seed", 0))
    out = Path(args.out)

    args.optimizer = "llm"
    args.mode = "replay"
    proposer = _phase1_proposer(args, config, problem, "replay")
    phase1 = _run_phase1_to_dir(problem, proposer, pcfg, out, seed)

    args.proposer = "llm"
    layout_proposer = _phase2_proposer(args, config, problem, phase1.best_params)
    phase2 = run_phase2(problem, layout_proposer, pcfg)
    from .scene_dsl import emit_program

    (out / "layout_program.txt").write_text(
        emit_program(ds.layout_program(phase2.best_layout, phase1.best_params))
    )
    export_convergence([a.psnr for a in phase2.attempts], out / "psnr.csv")

    qa = QATask(
        pusher_velocity=problem.task_pusher_velocity,
        candidates=frozenset(problem.qa_candidates),
    )
    predicted = answer_question(phase2.best_layout, phase1.best_params, qa, pcfg)
    from .pipeline import iou as _iou

    (out / "answer.json").write_text(json.dumps({
        "problem_id": problem.problem_id,
        "predicted": sorted(predicted),
        "truth": sorted(problem.qa_answer),
        "iou": _iou(predicted, problem.qa_answer),
    }, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, {
        "subcommand": "replay", "problem": str(args.problem), "seed": seed,
        "transcript": str(args.transcript), "out": str(out),
        "config": str(args.config) if args.config else None,
    })
    print(f"replay IoU {_iou(predicted, problem.qa_answer):.4f}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="traylab",
        description="Impact-reasoning workbench: dataset generation, "
        "parameter estimation, layout inference and QA scoring.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
        p.add_argument("--config", default=None, help="JSON config file; flags win")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers across problems")

    p = sub.add_parser("gen", help="generate a problem dataset")
    common(p)
    p.add_argument("--n", type=int, default=None, help="number of problems")
    p.add_argument("--classes", type=int, choices=(3, 5), default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("sim", help="simulate one scene program")
    common(p)
    p.add_argument("--program", required=True)
    p.add_argument("--velocity", default="-4.8,-4.8", help="pusher velocity 'vx,vy'")
    p.add_argument("--stride", type=int, default=20)
    p.set_defaults(func=_cmd_sim)

    p = sub.add_parser("phase1", help="estimate per-class physics parameters")
    common(p)
    p.add_argument("--problem", required=True)
    p.add_argument("--optimizer", choices=("llm", "cmaes", "bo", "random", "scripted"),
                   default="cmaes")
    p.add_argument("--mode", choices=("live", "record", "replay"), default="replay")
    p.add_argument("--transcript", default=None)
    p.add_argument("--script", default=None, help="JSON list of class->params dicts")
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--feedback-mode", dest="feedback_mode", choices=("full", "last"), default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_phase1)

    p = sub.add_parser("phase2", help="infer the task layout")
    common(p)
    p.add_argument("--problem", required=True)
    p.add_argument("--proposer", choices=("llm", "oracle"), default="oracle")
    p.add_argument("--mode", choices=("live", "record", "replay"), default="replay")
    p.add_argument("--transcript", default=None)
    p.add_argument("--params", default=None)
    p.add_argument("--gt-params", dest="gt_params", action="store_true")
    p.add_argument("--psnr-threshold", dest="psnr_threshold", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_phase2)

    p = sub.add_parser("answer", help="answer the stability question")
    common(p)
    p.add_argument("--problem", required=True)
    p.add_argument("--params", default=None)
    p.add_argument("--gt-params", dest="gt_params", action="store_true")
    p.add_argument("--layout", default=None, help="layout program file (default: ground truth)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_answer)

    p = sub.add_parser("eval", help="score predictions against a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--predictions", required=True, help="JSON problem_id -> color list")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("replay", help="run the full pipeline from a transcript")
    common(p)
    p.add_argument("--problem", required=True)
    p.add_argument("--transcript", required=True)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--feedback-mode", dest="feedback_mode", choices=("full", "last"), default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_replay)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ds.DatasetError, SceneError, ProgramParseError,
            OptimizerStepError, LayoutProposalError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
