"""Deterministic staged rigid-body model for the pusher-tray-glassware system.

A disc-shaped pusher slides toward a circular tray holding glassware on a 3x3
grid, strikes the rim once (inelastic impulse), and the tray carries or sheds
its load depending on per-class contact parameters.  Each object couples to
the tray through sliding friction and tilts as a signed single-axis inverted
pendulum about its base edge; the pendulum houses friction, armature,
stiffness and damping so that all four estimated parameters shape the motion.

Everything here is a pure function over value types: identical inputs yield
identical outputs bit for bit, and concurrent calls are safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

__all__ = [
    "GRAVITY",
    "TRAY_RADIUS",
    "TRAY_COG_HEIGHT",
    "TRAY_MASS",
    "GROUND_FRICTION",
    "PUSHER_MASS",
    "PUSHER_RADIUS",
    "PUSHER_START",
    "GRID_COORDS",
    "CLASS_ORDER",
    "CLASSES",
    "SceneError",
    "TrajectoryMismatchError",
    "ObjectClass",
    "PhysicsParams",
    "ObjectSpec",
    "SceneLayout",
    "SceneSpec",
    "SimConfig",
    "BodyState",
    "ObjectState",
    "SimState",
    "TrajectorySet",
    "StabilityReport",
    "cell_center",
    "validate_layout",
    "make_scene_spec",
    "initial_state",
    "step",
    "run_simulation",
    "stability_report",
    "trajectory_error",
    "format_trajectories",
    "format_value",
]

GRAVITY = 9.81  # m/s^2

TRAY_RADIUS = 1.8
TRAY_COG_HEIGHT = 0.05
TRAY_MASS = 0.5
GROUND_FRICTION = 0.1  # tray-ground; the pusher reuses it

PUSHER_MASS = 20.0
PUSHER_RADIUS = 0.25
PUSHER_START = (3.0, 3.0)
PUSHER_HEIGHT = 0.05

# Grid cells sit at radius/2 spacing; row 1 is the top row (+y), column 1 the
# left column (-x) in the top-down view.
GRID_COORDS = (-0.9, 0.0, 0.9)


class SceneError(ValueError):
    """A scene description violates a structural constraint."""


class TrajectoryMismatchError(ValueError):
    """Two trajectory sets cannot be compared (ids or lengths differ)."""


@dataclass(frozen=True)
class ObjectClass:
    name: str
    cog_height: float
    base_radius: float
    default_mass: float


CLASSES = {
    "bottle": ObjectClass("bottle", cog_height=1.1, base_radius=0.4, default_mass=20.0),
    "martini_glass": ObjectClass("martini_glass", cog_height=0.5, base_radius=0.35, default_mass=10.0),
    "wine_glass": ObjectClass("wine_glass", cog_height=0.9, base_radius=0.30, default_mass=4.0),
    "flute_glass": ObjectClass("flute_glass", cog_height=1.0, base_radius=0.25, default_mass=15.0),
    "champagne_glass": ObjectClass("champagne_glass", cog_height=0.6, base_radius=0.30, default_mass=15.0),
}

# Canonical flattening order for per-class parameter vectors.
CLASS_ORDER = ("bottle", "martini_glass", "wine_glass", "flute_glass", "champagne_glass")


@dataclass(frozen=True)
class PhysicsParams:
    """Per-class contact parameters: friction couples the base to the tray,
    armature adds tilt inertia, stiffness and damping act on the tilt angle."""

    sliding_friction: float
    armature: float
    stiffness: float
    damping: float
    mass: float

    def __post_init__(self):
        if not (0.0 < self.sliding_friction <= 1.0):
            raise SceneError(f"sliding_friction must be in (0, 1], got {self.sliding_friction}")
        if self.armature < 0.0:
            raise SceneError(f"armature must be >= 0, got {self.armature}")
        if self.stiffness < 0.0:
            raise SceneError(f"stiffness must be >= 0, got {self.stiffness}")
        if self.damping < 0.0:
            raise SceneError(f"damping must be >= 0, got {self.damping}")
        if self.mass <= 0.0:
            raise SceneError(f"mass must be > 0, got {self.mass}")

    def as_dict(self) -> dict:
        return {
            "sliding-friction": self.sliding_friction,
            "armature": self.armature,
            "stiffness": self.stiffness,
            "mass": self.mass,
            "damping": self.damping,
        }


# Tray attributes in program form; damping/armature are inert placeholders
# kept for wire-format compatibility.
TRAY_PHYSICS = PhysicsParams(
    sliding_friction=GROUND_FRICTION, armature=0.1, stiffness=0.0, damping=20.0, mass=TRAY_MASS
)


@dataclass(frozen=True)
class ObjectSpec:
    """One instance on the tray: identity, grid cell, color and (optionally)
    its contact parameters."""

    object_id: int
    class_name: str
    row: int
    col: int
    color: str
    physics: PhysicsParams | None = None

    def __post_init__(self):
        if self.class_name not in CLASSES:
            raise SceneError(f"unknown object class {self.class_name!r}")
        if self.row not in (1, 2, 3) or self.col not in (1, 2, 3):
            raise SceneError(f"grid cell ({self.row}, {self.col}) outside the 3x3 grid")

    @property
    def cell(self) -> tuple[int, int]:
        return (self.row, self.col)


SceneLayout = tuple  # tuple[ObjectSpec, ...]


def cell_center(row: int, col: int) -> tuple[float, float]:
    """World coordinates of a grid cell center relative to the tray center."""
    return (GRID_COORDS[col - 1], GRID_COORDS[3 - row])


def validate_layout(objects, require_unique_colors: bool = True) -> tuple:
    """Check id/cell (and optionally color) uniqueness; returns the tuple."""
    objects = tuple(objects)
    seen_ids: set[int] = set()
    seen_cells: set[tuple[int, int]] = set()
    seen_colors: set[str] = set()
    for obj in objects:
        if obj.object_id in seen_ids:
            raise SceneError(f"duplicate object_id {obj.object_id}")
        seen_ids.add(obj.object_id)
        if obj.cell in seen_cells:
            raise SceneError(f"duplicate grid cell {obj.cell}")
        seen_cells.add(obj.cell)
        if require_unique_colors:
            if obj.color in seen_colors:
                raise SceneError(f"duplicate color {obj.color!r}")
            seen_colors.add(obj.color)
    return objects


@dataclass(frozen=True)
class SceneSpec:
    """A fully specified scene ready for simulation."""

    instances: tuple
    pusher_velocity: tuple[float, float]
    pusher_start: tuple[float, float] = PUSHER_START
    pusher_height: float = PUSHER_HEIGHT
    pusher_mass: float = PUSHER_MASS
    pusher_radius: float = PUSHER_RADIUS
    tray_radius: float = TRAY_RADIUS
    tray_cog_height: float = TRAY_COG_HEIGHT
    tray_mass: float = TRAY_MASS
    ground_friction: float = GROUND_FRICTION

    def __post_init__(self):
        validate_layout(self.instances, require_unique_colors=False)
        by_class: dict[str, PhysicsParams] = {}
        for obj in self.instances:
            if obj.physics is None:
                raise SceneError(f"instance {obj.object_id} has no physics parameters")
            prev = by_class.setdefault(obj.class_name, obj.physics)
            if prev != obj.physics:
                raise SceneError(
                    f"instances of class {obj.class_name!r} carry different physics parameters"
                )


def make_scene_spec(layout, class_params: dict, pusher_velocity,
                    pusher_start=PUSHER_START) -> SceneSpec:
    """Attach per-class parameters to a layout and fix the pusher kinematics."""
    instances = []
    for obj in layout:
        if obj.class_name not in class_params:
            raise SceneError(f"no physics parameters for class {obj.class_name!r}")
        instances.append(replace(obj, physics=class_params[obj.class_name]))
    return SceneSpec(
        instances=tuple(instances),
        pusher_velocity=(float(pusher_velocity[0]), float(pusher_velocity[1])),
        pusher_start=(float(pusher_start[0]), float(pusher_start[1])),
    )


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.01  # s
    n_steps: int = 200
    gravity: float = GRAVITY
    tilt_threshold_deg: float = 45.0
    restitution: float = 0.0  # pusher-tray impact
    sample_stride: int = 20  # 0.2 s between formatted trajectory samples


@dataclass(frozen=True)
class BodyState:
    position: tuple[float, float]
    velocity: tuple[float, float]


@dataclass(frozen=True)
class ObjectState:
    object_id: int
    base_offset: tuple[float, float]  # relative to the tray center
    base_velocity: tuple[float, float]  # absolute
    tilt: float  # signed, about the impact axis; in [-pi/2, pi/2]
    tilt_rate: float
    toppled: bool = False
    off_tray: bool = False


@dataclass(frozen=True)
class SimState:
    time: float
    pusher: BodyState
    tray: BodyState
    objects: tuple
    impacted: bool = False
    impact_axis: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class TrajectorySet:
    """Per-object center-of-gravity samples, one per step plus the start."""

    samples: dict  # object_id -> tuple[(x, y, z), ...]
    class_names: dict  # object_id -> class name

    def n_samples(self) -> int:
        return len(next(iter(self.samples.values()))) if self.samples else 0

    def subsampled(self, stride: int) -> "TrajectorySet":
        return TrajectorySet(
            samples={k: tuple(v[::stride]) for k, v in self.samples.items()},
            class_names=dict(self.class_names),
        )


@dataclass(frozen=True)
class StabilityReport:
    stable: dict  # object_id -> bool

    def stable_ids(self) -> set:
        return {k for k, v in self.stable.items() if v}


def initial_state(spec: SceneSpec) -> SimState:
    objects = tuple(
        ObjectState(
            object_id=obj.object_id,
            base_offset=cell_center(obj.row, obj.col),
            base_velocity=(0.0, 0.0),
            tilt=0.0,
            tilt_rate=0.0,
        )
        for obj in spec.instances
    )
    return SimState(
        time=0.0,
        pusher=BodyState(position=spec.pusher_start, velocity=spec.pusher_velocity),
        tray=BodyState(position=(0.0, 0.0), velocity=(0.0, 0.0)),
        objects=objects,
    )


def _norm(v) -> float:
    return math.hypot(v[0], v[1])


def _decelerate(v, drop: float):
    """Reduce a velocity's magnitude by `drop`, stopping exactly at zero."""
    speed = _norm(v)
    if speed <= drop:
        return (0.0, 0.0)
    scale = (speed - drop) / speed
    return (v[0] * scale, v[1] * scale)


def step(state: SimState, spec: SceneSpec, config: SimConfig) -> SimState:
    """Advance the staged model by one time step.

    Stages: free pusher, single inelastic rim impact, tray ground friction,
    object stick/slip translation, pairwise base-disc collisions, tilt
    integration (semi-implicit Euler), then the off-tray check.
    """
    dt = config.dt
    g = config.gravity

    impacted = state.impacted
    axis = state.impact_axis
    tray_x, tray_v = state.tray.position, state.tray.velocity
    pusher_x, pusher_v = state.pusher.position, state.pusher.velocity

    # Pusher slides on the ground under the shared ground friction.
    pusher_v = _decelerate(pusher_v, spec.ground_friction * g * dt)
    pusher_x = (pusher_x[0] + pusher_v[0] * dt, pusher_x[1] + pusher_v[1] * dt)

    contact_dist = spec.tray_radius + spec.pusher_radius
    if not impacted:
        dx = (pusher_x[0] - tray_x[0], pusher_x[1] - tray_x[1])
        if _norm(dx) <= contact_dist:
            speed = _norm(pusher_v)
            if speed > 0.0:
                u = (pusher_v[0] / speed, pusher_v[1] / speed)
                m_eff = spec.tray_mass + sum(o.physics.mass for o in spec.instances)
                dv = (1.0 + config.restitution) * speed / (spec.pusher_mass + m_eff)
                tray_v = (u[0] * spec.pusher_mass * dv, u[1] * spec.pusher_mass * dv)
                pusher_v = (pusher_v[0] - u[0] * m_eff * dv, pusher_v[1] - u[1] * m_eff * dv)
                axis = u
                impacted = True

    # Tray ground friction; record its acceleration for the coupling test.
    tray_acc = (0.0, 0.0)
    tray_speed = _norm(tray_v)
    if tray_speed > 0.0:
        drop = spec.ground_friction * g * dt
        new_v = _decelerate(tray_v, drop)
        tray_acc = ((new_v[0] - tray_v[0]) / dt, (new_v[1] - tray_v[1]) / dt)
        tray_v = new_v
    tray_x = (tray_x[0] + tray_v[0] * dt, tray_x[1] + tray_v[1] * dt)

    # Resolve pusher-tray penetration against the tray's new position.
    if impacted:
        dx = (pusher_x[0] - tray_x[0], pusher_x[1] - tray_x[1])
        d = _norm(dx)
        if 0.0 < d < contact_dist:
            pusher_x = (
                tray_x[0] + dx[0] / d * contact_dist,
                tray_x[1] + dx[1] / d * contact_dist,
            )

    # Object translation: stick to the tray while friction can transmit the
    # tray's acceleration, otherwise slide under kinetic friction.
    n_obj = len(state.objects)
    old_tray_x = state.tray.position
    positions: list = [None] * n_obj
    velocities: list = [None] * n_obj
    stuck: list = [False] * n_obj
    for i, (ospec, ost) in enumerate(zip(spec.instances, state.objects)):
        mu_g = ospec.physics.sliding_friction * g
        v0 = ost.base_velocity
        x_abs = (old_tray_x[0] + ost.base_offset[0], old_tray_x[1] + ost.base_offset[1])
        if ost.off_tray:
            v1 = _decelerate(v0, mu_g * dt)
            x_abs = (x_abs[0] + v1[0] * dt, x_abs[1] + v1[1] * dt)
        else:
            v_rel = (v0[0] - tray_v[0], v0[1] - tray_v[1])
            if v_rel[0] == 0.0 and v_rel[1] == 0.0:
                need = _norm(tray_acc)
                if need <= mu_g:
                    v1 = tray_v
                    stuck[i] = True
                else:
                    frac = mu_g / need
                    v1 = (v0[0] + tray_acc[0] * frac * dt, v0[1] + tray_acc[1] * frac * dt)
            else:
                rel_speed = _norm(v_rel)
                a = mu_g / rel_speed
                v1 = (v0[0] - v_rel[0] * a * dt, v0[1] - v_rel[1] * a * dt)
                vr1 = (v1[0] - tray_v[0], v1[1] - tray_v[1])
                if vr1[0] * v_rel[0] + vr1[1] * v_rel[1] <= 0.0:
                    v1 = tray_v  # friction closed the gap within the step
                    stuck[i] = True
            if not stuck[i]:
                x_abs = (x_abs[0] + v1[0] * dt, x_abs[1] + v1[1] * dt)
        positions[i] = x_abs
        velocities[i] = v1

    # Pairwise base-disc collisions: positional separation plus an inelastic
    # impulse along the center line (normal components only).
    for i in range(n_obj):
        ri = CLASSES[spec.instances[i].class_name].base_radius
        mi = spec.instances[i].physics.mass
        for j in range(i + 1, n_obj):
            rj = CLASSES[spec.instances[j].class_name].base_radius
            dxij = (positions[j][0] - positions[i][0], positions[j][1] - positions[i][1])
            d = _norm(dxij)
            r_sum = ri + rj
            if 0.0 < d < r_sum:
                mj = spec.instances[j].physics.mass
                n = (dxij[0] / d, dxij[1] / d)
                half = 0.5 * (r_sum - d)
                positions[i] = (positions[i][0] - n[0] * half, positions[i][1] - n[1] * half)
                positions[j] = (positions[j][0] + n[0] * half, positions[j][1] + n[1] * half)
                stuck[i] = stuck[j] = False
                vi, vj = velocities[i], velocities[j]
                vi_n = vi[0] * n[0] + vi[1] * n[1]
                vj_n = vj[0] * n[0] + vj[1] * n[1]
                if vi_n - vj_n > 0.0:  # approaching
                    vc = (mi * vi_n + mj * vj_n) / (mi + mj)
                    velocities[i] = (vi[0] + n[0] * (vc - vi_n), vi[1] + n[1] * (vc - vi_n))
                    velocities[j] = (vj[0] + n[0] * (vc - vj_n), vj[1] + n[1] * (vc - vj_n))

    # Tilt integration and bookkeeping.
    new_objects = []
    for i, (ospec, ost) in enumerate(zip(spec.instances, state.objects)):
        cls = CLASSES[ospec.class_name]
        p = ospec.physics
        m, h, r = p.mass, cls.cog_height, cls.base_radius
        v1 = velocities[i]
        v0 = ost.base_velocity
        # Pseudo-acceleration felt at the CoG: positive when the base brakes
        # along the impact axis.  Collision impulses are included.
        a_rel = -((v1[0] - v0[0]) * axis[0] + (v1[1] - v0[1]) * axis[1]) / dt

        tilt, rate, toppled = ost.tilt, ost.tilt_rate, ost.toppled
        if not toppled:
            i_eff = m * h * h + p.armature
            cos_t = math.cos(tilt)
            drive = m * h * a_rel * cos_t - p.damping * rate - p.stiffness * tilt
            edge = m * g * r * cos_t
            if tilt == 0.0 and rate == 0.0 and abs(drive) <= edge:
                acc = 0.0  # flat on its base; the edge torque holds it
            else:
                if tilt > 0.0 or (tilt == 0.0 and (rate > 0.0 or (rate == 0.0 and drive > 0.0))):
                    g_term = m * g * (h * math.sin(tilt) - r * cos_t)
                else:
                    g_term = m * g * (h * math.sin(tilt) + r * cos_t)
                acc = (drive + g_term) / i_eff
            rate += acc * dt
            tilt += rate * dt
            if tilt >= math.pi / 2:
                tilt, rate, toppled = math.pi / 2, 0.0, True
            elif tilt <= -math.pi / 2:
                tilt, rate, toppled = -math.pi / 2, 0.0, True

        if stuck[i]:
            offset = ost.base_offset  # preserved exactly: no drift while stuck
        else:
            offset = (positions[i][0] - tray_x[0], positions[i][1] - tray_x[1])
        off_tray = ost.off_tray or _norm(offset) > spec.tray_radius
        new_objects.append(
            ObjectState(
                object_id=ost.object_id,
                base_offset=offset,
                base_velocity=v1,
                tilt=tilt,
                tilt_rate=rate,
                toppled=toppled,
                off_tray=off_tray,
            )
        )

    return SimState(
        time=state.time + dt,
        pusher=BodyState(position=pusher_x, velocity=pusher_v),
        tray=BodyState(position=tray_x, velocity=tray_v),
        objects=tuple(new_objects),
        impacted=impacted,
        impact_axis=axis,
    )


def _cog(state: SimState, spec: SceneSpec) -> dict:
    out = {}
    u = state.impact_axis
    for ospec, ost in zip(spec.instances, state.objects):
        h = CLASSES[ospec.class_name].cog_height
        x = state.tray.position[0] + ost.base_offset[0]
        y = state.tray.position[1] + ost.base_offset[1]
        s = math.sin(ost.tilt)
        out[ost.object_id] = (x + h * s * u[0], y + h * s * u[1], h * math.cos(ost.tilt))
    return out


def run_simulation(spec: SceneSpec, config: SimConfig = SimConfig(),
                   collect_states: bool = False):
    """Run `n_steps` steps and report trajectories plus final stability.

    Returns ``(trajectories, final_state, report)``; with ``collect_states``
    a fourth element holds every intermediate state (for diagnostics).
    """
    state = initial_state(spec)
    ids = [obj.object_id for obj in spec.instances]
    samples = {oid: [] for oid in ids}
    states = [state] if collect_states else None
    for oid, cog in _cog(state, spec).items():
        samples[oid].append(cog)
    for _ in range(config.n_steps):
        state = step(state, spec, config)
        for oid, cog in _cog(state, spec).items():
            samples[oid].append(cog)
        if collect_states:
            states.append(state)
    trajectories = TrajectorySet(
        samples={oid: tuple(v) for oid, v in samples.items()},
        class_names={obj.object_id: obj.class_name for obj in spec.instances},
    )
    report = stability_report(state, config.tilt_threshold_deg)
    if collect_states:
        return trajectories, state, report, states
    return trajectories, state, report


def stability_report(final: SimState, alpha_deg: float) -> StabilityReport:
    """An instance is stable iff its tilt from upright is strictly below the
    threshold and it never left the tray."""
    alpha = math.radians(alpha_deg)
    return StabilityReport(
        stable={o.object_id: (not o.off_tray) and abs(o.tilt) < alpha for o in final.objects}
    )


def trajectory_error(predicted: TrajectorySet, reference: TrajectorySet,
                     stride: int) -> tuple[dict, float]:
    """Per-object L2 error over subsampled CoG points, and the object mean."""
    if set(predicted.samples) != set(reference.samples):
        raise TrajectoryMismatchError(
            f"object ids differ: {sorted(predicted.samples)} vs {sorted(reference.samples)}"
        )
    errors = {}
    for oid in reference.samples:
        a = predicted.samples[oid]
        b = reference.samples[oid]
        if len(a) != len(b):
            raise TrajectoryMismatchError(
                f"object {oid}: sample counts differ ({len(a)} vs {len(b)})"
            )
        sq = 0.0
        for pa, pb in zip(a[::stride], b[::stride]):
            sq += (pa[0] - pb[0]) ** 2 + (pa[1] - pb[1]) ** 2 + (pa[2] - pb[2]) ** 2
        errors[oid] = math.sqrt(sq)
    mean = sum(errors.values()) / len(errors) if errors else 0.0
    return errors, mean


def format_value(x: float) -> str:
    """Compact numeric text with at least one decimal place."""
    s = f"{float(x):.10g}"
    if "." not in s and "e" not in s and "n" not in s:
        s += ".0"
    return s


def format_trajectories(trajectories: TrajectorySet, stride: int) -> str:
    """Render the one-line-per-object trajectory text (one decimal place)."""
    if not trajectories.samples:
        raise ValueError("cannot format an empty trajectory set")
    lines = []
    for oid, pts in trajectories.samples.items():
        cls = trajectories.class_names[oid]
        body = ", ".join(f"({p[0]:.1f}, {p[1]:.1f}, {p[2]:.1f})" for p in pts[::stride])
        lines.append(f"{cls}_motion_trajectory (x, y, z) = [{body}]")
    return "\n".join(lines) + "\n"
