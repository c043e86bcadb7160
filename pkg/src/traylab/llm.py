"""Chat-completions client with retry, record/replay, and prompt assembly.

The prompt texts are versioned template assets under ``traylab/prompts`` —
they are the wire protocol with the model, so they live as data rather than
code.  Replay mode resolves every request from a transcript by content hash
and never touches the network.
"""

from __future__ import annotations

import base64
import hashlib
import json
import string
import threading
import time
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .physics import CLASSES, CLASS_ORDER, format_value
from .scene_dsl import PALETTE_ORDER

__all__ = [
    "TransportError",
    "ReplayMissError",
    "TranscriptError",
    "ClientConfig",
    "Message",
    "text_message",
    "canonical_hash",
    "TranscriptRecord",
    "Transcript",
    "load_transcript",
    "save_transcript",
    "ChatClient",
    "Phase1Context",
    "Phase2Context",
    "Phase2Attempt",
    "build_phase1_messages",
    "build_phase2_messages",
    "corrective_message",
    "default_phase1_assets",
    "default_phase2_context",
]


class TransportError(RuntimeError):
    """The HTTP layer failed permanently (bad status or retries exhausted)."""


class ReplayMissError(KeyError):
    """A replayed request has no transcript entry; names the request hash."""


class TranscriptError(ValueError):
    """A transcript file contains a corrupt (non-trailing) record."""


@dataclass(frozen=True)
class ClientConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4o-mini"
    api_key_env: str = "OPENAI_API_KEY"
    temperature: float = 0.0
    timeout: float = 120.0
    max_retries: int = 4
    mode: str = "replay"  # live | record | replay
    max_inflight: int = 2

    def __post_init__(self):
        if self.mode not in ("live", "record", "replay"):
            raise ValueError(f"unknown client mode {self.mode!r}")


@dataclass(frozen=True)
class Message:
    """One chat message; parts are ('text', str) or ('image', media, b64)."""

    role: str
    parts: tuple


def text_message(role: str, text: str) -> Message:
    return Message(role=role, parts=(("text", text),))


def image_part(png_bytes: bytes) -> tuple:
    return ("image", "image/png", base64.b64encode(png_bytes).decode("ascii"))


def canonical_hash(messages) -> str:
    """Platform-stable content hash of a message list."""
    canon = [{"role": m.role, "parts": [list(p) for p in m.parts]} for m in messages]
    blob = json.dumps(canon, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


@dataclass
class TranscriptRecord:
    request_hash: str
    request: list  # canonicalized message list
    response: str
    timestamp: float = 0.0


@dataclass
class Transcript:
    records: list = field(default_factory=list)

    def index(self) -> dict:
        return {r.request_hash: r.response for r in self.records}


def save_transcript(transcript: Transcript, path) -> None:
    with open(path, "w") as fh:
        for rec in transcript.records:
            fh.write(_record_line(rec))


def _record_line(rec: TranscriptRecord) -> str:
    return (
        json.dumps(
            {
                "request_hash": rec.request_hash,
                "request": rec.request,
                "response": rec.response,
                "timestamp": rec.timestamp,
            },
            sort_keys=True,
        )
        + "\n"
    )


def load_transcript(path) -> Transcript:
    """Line-delimited records; a truncated final line is dropped with a
    warning, while corruption anywhere else is an error naming the line."""
    records = []
    lines = Path(path).read_text().splitlines()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
            records.append(
                TranscriptRecord(
                    request_hash=data["request_hash"],
                    request=data["request"],
                    response=data["response"],
                    timestamp=data.get("timestamp", 0.0),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            if lineno == len(lines):
                warnings.warn(f"dropping truncated final transcript line {lineno}: {exc}")
                break
            raise TranscriptError(f"corrupt transcript record at line {lineno}: {exc}") from None
    return Transcript(records=records)


def _default_transport(url: str, headers: dict, payload: dict, timeout: float):
    import requests

    resp = requests.post(url, headers=headers, json=payload, timeout=timeout)
    return resp.status_code, resp.text


_RETRYABLE = {429, 500, 502, 503, 504}


class ChatClient:
    """Thread-safe chat client; ``transport`` is injectable for tests."""

    def __init__(self, config: ClientConfig, transcript: Transcript | None = None,
                 transcript_path=None, transport=None, sleep=time.sleep, jitter=None):
        import random

        self.config = config
        self.transcript = transcript if transcript is not None else Transcript()
        self.transcript_path = Path(transcript_path) if transcript_path else None
        self._transport = transport
        self._sleep = sleep
        self._jitter = jitter if jitter is not None else random.random
        self._replay_index = self.transcript.index() if config.mode == "replay" else None
        self._inflight = threading.Semaphore(config.max_inflight)
        self._append_lock = threading.Lock()

    def complete(self, messages) -> str:
        key = canonical_hash(messages)
        if self.config.mode == "replay":
            response = self._replay_index.get(key)
            if response is None:
                raise ReplayMissError(f"no transcript entry for request hash {key}")
            return response
        response = self._post_with_retries(messages)
        if self.config.mode == "record":
            rec = TranscriptRecord(
                request_hash=key,
                request=[{"role": m.role, "parts": [list(p) for p in m.parts]} for m in messages],
                response=response,
                timestamp=time.time(),
            )
            with self._append_lock:
                self.transcript.records.append(rec)
                if self.transcript_path is not None:
                    with open(self.transcript_path, "a") as fh:
                        fh.write(_record_line(rec))
        return response

    def _payload(self, messages) -> dict:
        wire = []
        for m in messages:
            content = []
            for part in m.parts:
                if part[0] == "text":
                    content.append({"type": "text", "text": part[1]})
                else:
                    content.append(
                        {
                            "type": "image_url",
                            "image_url": {"url": f"data:{part[1]};base64,{part[2]}"},
                        }
                    )
            wire.append({"role": m.role, "content": content})
        return {
            "model": self.config.model,
            "messages": wire,
            "temperature": self.config.temperature,
        }

    def _post_with_retries(self, messages) -> str:
        import os

        transport = self._transport or _default_transport
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.config.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = self._payload(messages)
        backoff = 2.0
        for attempt in range(self.config.max_retries + 1):
            with self._inflight:
                status, body = transport(
                    self.config.endpoint, headers, payload, self.config.timeout
                )
            if status == 200:
                try:
                    return json.loads(body)["choices"][0]["message"]["content"]
                except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
                    raise TransportError(f"malformed completion response: {exc}") from None
            if status in _RETRYABLE and attempt < self.config.max_retries:
                self._sleep(backoff + self._jitter())
                backoff *= 2.0
                continue
            raise TransportError(f"request failed with status {status}: {body[:200]}")
        raise TransportError("retries exhausted")


# ---------------------------------------------------------------------------
# Prompt assembly


def _template(name: str) -> string.Template:
    text = resources.files("traylab.prompts").joinpath(name).read_text()
    return string.Template(text)


def _asset(name: str) -> str:
    return resources.files("traylab.prompts").joinpath(name).read_text()


def default_phase1_assets() -> tuple[str, str]:
    return _asset("phase1_example_program.txt"), _asset("phase1_example_trajectories.txt")


@dataclass(frozen=True)
class Phase1Context:
    """Everything the estimation prompt interpolates: the class set, the
    problem's trajectory text, and the fixed in-context example."""

    class_names: tuple
    problem_trajectories: str
    example_program: str = ""
    example_trajectories: str = ""
    sample_period: float = 0.2

    def with_default_example(self) -> "Phase1Context":
        if self.example_program and self.example_trajectories:
            return self
        prog, traj = default_phase1_assets()
        return Phase1Context(
            class_names=self.class_names,
            problem_trajectories=self.problem_trajectories,
            example_program=self.example_program or prog,
            example_trajectories=self.example_trajectories or traj,
            sample_period=self.sample_period,
        )


def _ordered(class_names) -> list:
    return [c for c in CLASS_ORDER if c in set(class_names)]


def _join_names(names) -> str:
    names = list(names)
    if len(names) == 1:
        return names[0]
    return ", ".join(names[:-1]) + " and " + names[-1]


def _geometry_sentences(class_names) -> str:
    parts = []
    for cls in _ordered(class_names):
        c = CLASSES[cls]
        parts.append(
            f"The radius of {cls} is {format_value(c.base_radius)} and its center of "
            f"gravity is {format_value(c.cog_height)} above the ground."
        )
    return " ".join(parts)


def _params_block(name: str, params) -> str:
    d = params.as_dict()
    lines = [f"physical_parameters_for_{name} = {{"]
    keys = list(d)
    for i, key in enumerate(keys):
        comma = "," if i < len(keys) - 1 else ""
        lines.append(f"    '{key}': {format_value(d[key])}{comma}")
    lines.append("}")
    return "\n".join(lines)


def build_phase1_messages(context: Phase1Context, trace, feedback_mode: str = "full"):
    """Assemble the estimation prompt; with a nonempty trace, one feedback
    block per prior attempt (or only the last one in ``last`` mode)."""
    context = context.with_default_example()
    ordered = _ordered(context.class_names)
    body = _template("phase1_preamble.txt").substitute(
        n_objects=str(len(ordered)),
        object_list=_join_names(f"a {c}" for c in ordered),
        geometry_sentences=_geometry_sentences(ordered),
        sample_period=format_value(context.sample_period),
        class_list=_join_names(ordered),
        mass_list=_join_names(
            f"{c} is {format_value(CLASSES[c].default_mass)}" for c in ordered
        ),
        example_program=context.example_program.rstrip("\n"),
        example_trajectories=context.example_trajectories.rstrip("\n"),
        problem_trajectories=context.problem_trajectories.rstrip("\n"),
    )
    points = list(trace.points) if trace is not None else []
    if feedback_mode == "last" and points:
        points = points[-1:]
    blocks = [body]
    feedback_tpl = _template("phase1_feedback.txt")
    for point in points:
        params_blocks = "\n\n".join(
            _params_block(cls, point.class_params[cls])
            for cls in ordered
            if point.class_params and cls in point.class_params
        )
        error_lines = "\n".join(
            f"Error for {key} = {format_value(round(point.feedback_per_object[key], 4))}"
            for key in sorted(point.feedback_per_object)
        )
        blocks.append(
            feedback_tpl.substitute(params_blocks=params_blocks, error_lines=error_lines)
        )
    return [text_message("user", "\n\n".join(b.rstrip("\n") for b in blocks) + "\n")]


def corrective_message(response_text: str, error) -> list:
    """Follow-up turn appended after an unparseable completion."""
    note = (
        "Your previous response did not contain a program our simulator can parse "
        f"({error}). Reply with one complete program following the exact structure of "
        "example_code_1.py inside a single code block."
    )
    return [text_message("assistant", response_text), text_message("user", note)]


@dataclass(frozen=True)
class Phase2Attempt:
    program_text: str
    psnr: float
    misplaced: frozenset


@dataclass(frozen=True)
class Phase2Context:
    example_program: str
    example_png: bytes
    class_names: tuple


def default_phase2_context(class_names=None) -> Phase2Context:
    """Example assets for layout prompts; the render is produced on demand
    from the stored example program."""
    from .render import render_top_down, raster_to_png
    from .scene_dsl import parse_program

    program = _asset("phase2_example_program.txt")
    layout = parse_program(program).layout()
    if class_names is None:
        class_names = tuple(sorted({o.class_name for o in layout}))
    return Phase2Context(
        example_program=program,
        example_png=raster_to_png(render_top_down(layout)),
        class_names=tuple(class_names),
    )


def _color_set_text(colors) -> str:
    inner = ", ".join(sorted(colors))
    return "{" + inner + "}"


def build_phase2_messages(context: Phase2Context, task_png: bytes, class_params: dict,
                          attempts=()):
    """Assemble the layout prompt: example image and code, the task top-down
    image, the fixed per-class attribute lines, then one block per attempt."""
    ordered = _ordered(context.class_names)
    parts = []
    preamble = _template("phase2_preamble.txt").substitute(
        class_set=_color_set_text(ordered),
        color_set=_color_set_text(PALETTE_ORDER),
    )
    parts.append(("text", preamble.rstrip("\n") + "\n\nexample_1_top_down_view_1.png"))
    parts.append(image_part(context.example_png))
    parts.append(("text", "example_code_1.py\n\n" + context.example_program.rstrip("\n")))
    parts.append(("text", _template("phase2_task.txt").substitute().rstrip("\n")
                  + "\n\ntask_image_top_view_1.png"))
    parts.append(image_part(task_png))
    attribute_lines = "\n".join(
        f"object_name: {cls}, mass: {format_value(class_params[cls].mass)}, "
        f"'sliding-friction': {format_value(class_params[cls].sliding_friction)}, "
        f"'armature': {format_value(class_params[cls].armature)}, "
        f"'stiffness': {format_value(class_params[cls].stiffness)}, "
        f"'damping': {format_value(class_params[cls].damping)}"
        for cls in ordered
        if cls in class_params
    )
    parts.append(
        ("text", _template("phase2_attributes.txt").substitute(attribute_lines=attribute_lines).rstrip("\n"))
    )
    if attempts:
        chunks = [_template("phase2_feedback_header.txt").substitute().rstrip("\n")]
        attempt_tpl = _template("phase2_attempt.txt")
        for i, attempt in enumerate(attempts):
            misplaced = (
                "{" + ", ".join(f"'{c}'" for c in sorted(attempt.misplaced)) + "}"
            )
            chunks.append(
                attempt_tpl.substitute(
                    index=str(i),
                    code=attempt.program_text.rstrip("\n"),
                    misplaced=misplaced,
                    psnr=f"{attempt.psnr:.1f}",
                ).rstrip("\n")
            )
        parts.append(("text", "\n\n".join(chunks)))
    return [Message(role="user", parts=tuple(parts))]
