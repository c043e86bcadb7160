"""Parser and emitter for the scene-program text exchanged with the model.

The program format is a tiny declarative Python dialect: a pusher line, a
tray block, then one brace-delimited attribute dictionary plus a
``sim.create_object(...)`` call per instance.  Parsing is deliberately
tolerant of model chatter: markdown fences, prose, comments, stray statements
and unknown attribute keys are all skipped or preserved without failing.
"""

from __future__ import annotations

import ast
import re
from dataclasses import dataclass, replace

from .physics import (
    CLASSES,
    PUSHER_HEIGHT,
    PUSHER_START,
    TRAY_PHYSICS,
    ObjectSpec,
    PhysicsParams,
    SceneError,
    format_value,
)

__all__ = [
    "PALETTE",
    "PALETTE_ORDER",
    "ProgramParseError",
    "SceneProgram",
    "parse_program",
    "emit_program",
    "extract_class_params",
]

# Ten scene colors plus the tolerated extra 'yellow'.
PALETTE = {
    "purple": (128, 0, 128),
    "red": (255, 0, 0),
    "green": (0, 128, 0),
    "blue": (0, 0, 255),
    "olive": (128, 128, 0),
    "cyan": (0, 255, 255),
    "brown": (165, 42, 42),
    "pink": (255, 192, 203),
    "orange": (255, 165, 0),
    "gray": (128, 128, 128),
    "yellow": (255, 255, 0),
}
PALETTE_ORDER = ("purple", "red", "green", "blue", "olive", "cyan", "brown", "pink", "orange", "gray")


class ProgramParseError(ValueError):
    """Raised when a program is structurally unusable; names the offending
    statement when there is one."""

    def __init__(self, message: str, statement: str | None = None):
        self.statement = statement
        if statement is not None:
            snippet = statement.strip().splitlines()[0][:120]
            message = f"{message} (in statement: {snippet!r})"
        super().__init__(message)


@dataclass(frozen=True)
class SceneProgram:
    """Parsed scene program: pusher start, tray attributes and the ordered
    object declarations (with any unknown attribute keys preserved)."""

    pusher_start: tuple[float, float, float]
    tray_physics: PhysicsParams
    declarations: tuple  # tuple[ObjectSpec, ...]
    extras: tuple = ()  # ((object_id, ((key, value), ...)), ...)
    warnings: tuple = ()

    def layout(self) -> tuple:
        """The layout triplets, with physics stripped."""
        return tuple(replace(d, physics=None) for d in self.declarations)


_FENCE_RE = re.compile(r"```[A-Za-z0-9_+-]*\r?\n(.*?)```", re.DOTALL)
_ASSIGN_RE = re.compile(r"^\s*([A-Za-z_]\w*)\s*=\s*\{")
_CREATE_RE = re.compile(r"^\s*(?:\w+\s*=\s*)?sim\s*\.\s*(create_\w+)\s*\(")

_LOCATION_RE = re.compile(r"^(row|column)_([123])$")

_KNOWN_KEYS = ("sliding-friction", "armature", "stiffness", "mass", "damping")


def _extract_code(text: str) -> str:
    """Prefer the last fenced block that declares a tray; fall back to the
    last fenced block, then to the raw text."""
    blocks = _FENCE_RE.findall(text)
    if not blocks:
        return text
    with_tray = [b for b in blocks if "create_tray" in b]
    return (with_tray or blocks)[-1]


def _scan_statements(src: str):
    """Yield candidate statements: dict assignments and sim.create_* calls.

    Line oriented; a statement runs until its braces/parens balance.  Anything
    else (prose, comments, trajectory dumps) is skipped.
    """
    lines = src.splitlines()
    i = 0
    n = len(lines)
    while i < n:
        line = lines[i]
        kind = None
        if _ASSIGN_RE.match(line):
            kind, opener, closer = "assign", "{", "}"
        else:
            m = _CREATE_RE.match(line)
            if m:
                kind, opener, closer = m.group(1), "(", ")"
        if kind is None:
            i += 1
            continue
        depth = 0
        collected = []
        while i < n:
            chunk = lines[i]
            depth += chunk.count(opener) - chunk.count(closer)
            collected.append(chunk)
            i += 1
            if depth <= 0 and collected:
                break
        yield kind, "\n".join(collected)


def _literal(node: ast.AST, stmt: str):
    try:
        return ast.literal_eval(node)
    except (ValueError, SyntaxError) as exc:
        raise ProgramParseError(f"unparseable attribute literal: {exc}", stmt) from None


def _parse_stmt(stmt: str) -> ast.stmt:
    try:
        module = ast.parse(stmt.strip())
    except SyntaxError as exc:
        raise ProgramParseError(f"invalid statement syntax: {exc.msg}", stmt) from None
    if not module.body:
        raise ProgramParseError("empty statement", stmt)
    return module.body[0]


def _params_from_dict(raw: dict, stmt: str) -> tuple[PhysicsParams, tuple]:
    attrs = {}
    extras = []
    for key, value in raw.items():
        norm = str(key).replace("_", "-")
        if norm in _KNOWN_KEYS:
            attrs[norm] = value
        else:
            extras.append((str(key), value))
    missing = [k for k in _KNOWN_KEYS if k not in attrs]
    if missing:
        raise ProgramParseError(f"attribute literal missing keys {missing}", stmt)
    try:
        params = PhysicsParams(
            sliding_friction=float(attrs["sliding-friction"]),
            armature=float(attrs["armature"]),
            stiffness=float(attrs["stiffness"]),
            damping=float(attrs["damping"]),
            mass=float(attrs["mass"]),
        )
    except (TypeError, ValueError) as exc:
        raise ProgramParseError(f"invalid physics attributes: {exc}", stmt) from None
    return params, tuple(extras)


def _resolve_physics(node: ast.AST, env: dict, stmt: str):
    if isinstance(node, ast.Name):
        if node.id not in env:
            raise ProgramParseError(f"undefined attribute dictionary {node.id!r}", stmt)
        return env[node.id]
    if isinstance(node, ast.Dict):
        raw = _literal(node, stmt)
        return _params_from_dict(raw, stmt)
    raise ProgramParseError("object_physics must be a dictionary or a reference to one", stmt)


def _parse_location(value, stmt: str) -> tuple[int, int]:
    if not (isinstance(value, tuple) and len(value) == 2):
        raise ProgramParseError(f"object_location must be a (row, column) pair, got {value!r}", stmt)
    row = col = None
    for token in value:
        m = _LOCATION_RE.match(str(token))
        if not m:
            raise ProgramParseError(f"bad location token {token!r}", stmt)
        if m.group(1) == "row":
            row = int(m.group(2))
        else:
            col = int(m.group(2))
    if row is None or col is None:
        raise ProgramParseError(f"location {value!r} needs one row and one column token", stmt)
    return row, col


_CREATE_OBJECT_ARGS = ("object_id", "object_name", "object_location", "object_color", "object_physics")


def parse_program(text: str) -> SceneProgram:
    """Parse arbitrary model output into a :class:`SceneProgram`.

    Raises :class:`ProgramParseError` when no tray is declared, a grid cell or
    object id repeats, a class name is unknown, or an attribute literal does
    not parse.  Duplicate colors only produce a warning: estimation-phase
    programs routinely reuse one color.
    """
    src = _extract_code(text)
    env: dict[str, tuple[PhysicsParams, tuple]] = {}
    pusher_start = None
    tray_physics = None
    declarations: list[ObjectSpec] = []
    extras: list = []
    warnings: list[str] = []

    for kind, stmt in _scan_statements(src):
        if kind == "assign":
            node = _parse_stmt(stmt)
            if not isinstance(node, ast.Assign) or not isinstance(node.value, ast.Dict):
                continue
            raw = _literal(node.value, stmt)
            name = node.targets[0].id if isinstance(node.targets[0], ast.Name) else None
            if name is not None:
                env[name] = _params_from_dict(raw, stmt)
            continue

        node = _parse_stmt(stmt)
        call = node.value if isinstance(node, (ast.Expr, ast.Assign)) else None
        if isinstance(node, ast.Assign):
            call = node.value
        if not isinstance(call, ast.Call):
            continue

        if kind == "create_pusher":
            if not call.args:
                raise ProgramParseError("create_pusher needs a position argument", stmt)
            raw = _literal(call.args[0], stmt)
            try:
                parts = [float(tok) for tok in str(raw).split()]
            except ValueError:
                raise ProgramParseError(f"bad pusher position {raw!r}", stmt) from None
            if len(parts) != 3:
                raise ProgramParseError(f"pusher position needs 3 numbers, got {raw!r}", stmt)
            pusher_start = tuple(parts)
        elif kind == "create_tray":
            node_phys = None
            for kw in call.keywords:
                if kw.arg == "object_physics":
                    node_phys = kw.value
            if node_phys is None and call.args:
                node_phys = call.args[0]
            if node_phys is None:
                raise ProgramParseError("create_tray needs object_physics", stmt)
            tray_physics, _ = _resolve_physics(node_phys, env, stmt)
        elif kind == "create_object":
            kwargs: dict = {}
            for pos, arg in zip(_CREATE_OBJECT_ARGS, call.args):
                kwargs[pos] = arg
            for kw in call.keywords:
                if kw.arg in _CREATE_OBJECT_ARGS:
                    kwargs[kw.arg] = kw.value
            missing = [a for a in _CREATE_OBJECT_ARGS if a not in kwargs]
            if missing:
                raise ProgramParseError(f"create_object missing arguments {missing}", stmt)
            object_id = _literal(kwargs["object_id"], stmt)
            class_name = _literal(kwargs["object_name"], stmt)
            if class_name not in CLASSES:
                raise ProgramParseError(f"unknown class name {class_name!r}", stmt)
            row, col = _parse_location(_literal(kwargs["object_location"], stmt), stmt)
            color = str(_literal(kwargs["object_color"], stmt))
            physics, extra = _resolve_physics(kwargs["object_physics"], env, stmt)
            try:
                decl = ObjectSpec(
                    object_id=int(object_id),
                    class_name=class_name,
                    row=row,
                    col=col,
                    color=color,
                    physics=physics,
                )
            except SceneError as exc:
                raise ProgramParseError(str(exc), stmt) from None
            if any(d.object_id == decl.object_id for d in declarations):
                raise ProgramParseError(f"duplicate object_id {decl.object_id}", stmt)
            if any(d.cell == decl.cell for d in declarations):
                raise ProgramParseError(f"duplicate grid cell {decl.cell}", stmt)
            if any(d.color == decl.color for d in declarations):
                warnings.append(f"color {color!r} used by more than one instance")
            declarations.append(decl)
            if extra:
                extras.append((decl.object_id, extra))
        # other create_* statements are ignored

    if tray_physics is None:
        raise ProgramParseError("program declares no tray (missing create_tray)")
    if pusher_start is None:
        pusher_start = (PUSHER_START[0], PUSHER_START[1], PUSHER_HEIGHT)
        warnings.append("program declares no pusher; using the default start position")
    return SceneProgram(
        pusher_start=pusher_start,
        tray_physics=tray_physics,
        declarations=tuple(declarations),
        extras=tuple(extras),
        warnings=tuple(warnings),
    )


def _emit_attr_block(name: str, params: PhysicsParams, extra: tuple = ()) -> list[str]:
    lines = [f"{name} = {{"]
    items = list(params.as_dict().items()) + list(extra)
    for i, (key, value) in enumerate(items):
        if isinstance(value, float) or isinstance(value, int):
            rendered = format_value(value)
        else:
            rendered = repr(value)
        comma = "," if i < len(items) - 1 else ""
        lines.append(f"    '{key}': {rendered}{comma}")
    lines.append("}")
    return lines


def emit_program(program: SceneProgram) -> str:
    """Canonical program text: pusher, tray block, then declarations in
    object_id order, one attribute per line."""
    extras = dict(program.extras)
    lines = ["sim = SIMULATOR_MODEL()"]
    start = " ".join(format_value(v) for v in program.pusher_start)
    lines.append(f"sim.create_pusher('{start}')")
    lines.extend(_emit_attr_block("physical_parameters_for_object_id_tray", program.tray_physics))
    lines.append("sim.create_tray(object_physics=physical_parameters_for_object_id_tray)")
    for decl in sorted(program.declarations, key=lambda d: d.object_id):
        var = f"physical_parameters_for_object_id_{decl.object_id}"
        lines.extend(_emit_attr_block(var, decl.physics, extras.get(decl.object_id, ())))
        lines.append(
            f"sim.create_object(object_id={decl.object_id}, object_name='{decl.class_name}', "
            f"object_location=('row_{decl.row}', 'column_{decl.col}'), "
            f"object_color='{decl.color}', object_physics={var})"
        )
    lines.append("sim.create_scene()")
    lines.append("sim_out = sim.run_simulation()")
    lines.append("del sim")
    return "\n".join(lines) + "\n"


def extract_class_params(program: SceneProgram) -> tuple[dict, tuple]:
    """One :class:`PhysicsParams` per class present; on disagreement the first
    declaration wins and a warning is recorded."""
    params: dict[str, PhysicsParams] = {}
    warnings: list[str] = []
    for decl in program.declarations:
        if decl.class_name not in params:
            params[decl.class_name] = decl.physics
        elif params[decl.class_name] != decl.physics:
            warnings.append(
                f"instances of {decl.class_name!r} disagree on physics; "
                f"keeping the first declaration"
            )
    return params, tuple(warnings)
