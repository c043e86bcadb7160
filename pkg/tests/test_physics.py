import math
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from traylab.physics import (
    CLASSES,
    GRAVITY,
    GROUND_FRICTION,
    PUSHER_RADIUS,
    PUSHER_START,
    TRAY_RADIUS,
    ObjectSpec,
    PhysicsParams,
    SceneError,
    SimConfig,
    SimState,
    StabilityReport,
    TrajectorySet,
    TrajectoryMismatchError,
    cell_center,
    format_trajectories,
    initial_state,
    make_scene_spec,
    run_simulation,
    stability_report,
    step,
    trajectory_error,
)
from .conftest import layout_strategy, params_strategy

DATA = Path(__file__).parent / "data"


def single_bottle_spec(friction=1.0, velocity=(-4.8, -4.8)):
    params = {"bottle": PhysicsParams(friction, 0.2, 0.3, 5.7, 20.0)}
    layout = (ObjectSpec(1, "bottle", 2, 2, "orange"),)
    return make_scene_spec(layout, params, velocity)


class TestStep:
    def test_zero_velocity_changes_nothing_but_time(self):
        spec = single_bottle_spec(velocity=(0.0, 0.0))
        config = SimConfig()
        s0 = initial_state(spec)
        s1 = step(s0, spec, config)
        assert s1.time == pytest.approx(config.dt)
        assert s1.pusher == s0.pusher
        assert s1.tray == s0.tray
        assert s1.objects == s0.objects
        assert not s1.impacted

    def test_toppled_state_is_absorbing(self):
        spec = single_bottle_spec()
        config = SimConfig()
        s0 = initial_state(spec)
        toppled = s0.objects[0].__class__(
            object_id=1,
            base_offset=s0.objects[0].base_offset,
            base_velocity=(0.0, 0.0),
            tilt=math.pi / 2,
            tilt_rate=0.0,
            toppled=True,
        )
        s0 = SimState(time=0.0, pusher=s0.pusher, tray=s0.tray, objects=(toppled,),
                      impacted=True, impact_axis=(-1.0, 0.0))
        s1 = step(s0, spec, config)
        assert s1.objects[0].tilt == math.pi / 2
        assert s1.objects[0].toppled
        # CoG z collapses to the base height at full tilt
        h = CLASSES["bottle"].cog_height
        assert h * math.cos(s1.objects[0].tilt) == pytest.approx(0.0, abs=1e-12)

    def test_contact_step_matches_uniform_deceleration_kinematics(self):
        # Closed-form oracle: straight-line travel toward the rim under
        # constant deceleration mu*g, contact at distance |start| - (R + r).
        spec = single_bottle_spec()
        config = SimConfig()
        v0 = math.hypot(4.8, 4.8)
        a = GROUND_FRICTION * GRAVITY
        gap = math.hypot(*PUSHER_START) - (TRAY_RADIUS + PUSHER_RADIUS)
        t_star = (v0 - math.sqrt(v0 * v0 - 2 * a * gap)) / a

        state = initial_state(spec)
        contact_step = None
        for i in range(1, config.n_steps + 1):
            state = step(state, spec, config)
            if state.impacted:
                contact_step = i
                break
        assert contact_step == 34  # frozen from the reference run
        assert abs(contact_step * config.dt - t_star) <= 2 * config.dt


class TestRunSimulation:
    def test_zero_velocity_constant_trajectories_all_stable(self):
        spec = single_bottle_spec(velocity=(0.0, 0.0))
        trajectories, final, report = run_simulation(spec)
        samples = trajectories.samples[1]
        assert len(samples) == SimConfig().n_steps + 1
        assert all(p == samples[0] for p in samples)
        assert report.stable == {1: True}

    def test_golden_single_bottle_run(self):
        spec = single_bottle_spec(friction=1.0)
        trajectories, _, _ = run_simulation(spec)
        text = format_trajectories(trajectories, 20)
        golden = (DATA / "golden_single_bottle.txt").read_text()
        assert text == golden

    def test_tilt_beyond_threshold_is_unstable(self):
        # Construct a final state directly: 50 degrees exceeds 45.
        spec = single_bottle_spec()
        s = initial_state(spec)
        obj = s.objects[0].__class__(
            object_id=1, base_offset=(0.0, 0.0), base_velocity=(0.0, 0.0),
            tilt=math.radians(50.0), tilt_rate=0.0,
        )
        final = SimState(time=2.0, pusher=s.pusher, tray=s.tray, objects=(obj,))
        assert stability_report(final, 45.0).stable == {1: False}

    def test_determinism_bit_identical(self):
        spec = single_bottle_spec(friction=0.3)
        t1, f1, r1 = run_simulation(spec)
        t2, f2, r2 = run_simulation(spec)
        assert t1 == t2
        assert f1 == f2
        assert r1 == r2


class TestStabilityReport:
    def _final_with(self, tilt_deg, off_tray=False):
        spec = single_bottle_spec()
        s = initial_state(spec)
        obj = s.objects[0].__class__(
            object_id=1, base_offset=(0.0, 0.0), base_velocity=(0.0, 0.0),
            tilt=math.radians(tilt_deg), tilt_rate=0.0, off_tray=off_tray,
        )
        return SimState(time=2.0, pusher=s.pusher, tray=s.tray, objects=(obj,))

    def test_tilt_below_threshold_is_stable(self):
        assert stability_report(self._final_with(30.0), 45.0).stable[1] is True

    def test_threshold_is_strict(self):
        assert stability_report(self._final_with(45.0), 45.0).stable[1] is False

    def test_off_tray_is_unstable_even_upright(self):
        assert stability_report(self._final_with(0.0, off_tray=True), 45.0).stable[1] is False

    @given(st.floats(0.0, 90.0), st.floats(1.0, 89.0), st.floats(1.0, 89.0))
    def test_lowering_threshold_never_stabilizes(self, tilt_deg, a1, a2):
        lo, hi = sorted((a1, a2))
        final = self._final_with(tilt_deg)
        stable_lo = stability_report(final, lo).stable[1]
        stable_hi = stability_report(final, hi).stable[1]
        assert not (stable_lo and not stable_hi)


class TestTrajectoryError:
    def _constant(self, oid_to_point, n=11):
        return TrajectorySet(
            samples={oid: tuple(p for _ in range(n)) for oid, p in oid_to_point.items()},
            class_names={oid: "bottle" for oid in oid_to_point},
        )

    def test_identical_trajectories_zero_error(self):
        a = self._constant({1: (0.0, 0.0, 1.1)})
        per_object, mean = trajectory_error(a, a, 1)
        assert per_object == {1: 0.0}
        assert mean == 0.0

    def test_single_point_345_triangle(self):
        ref = self._constant({1: (0.0, 0.0, 1.1), 2: (1.0, 1.0, 0.5)})
        pred_samples = {1: list(ref.samples[1]), 2: list(ref.samples[2])}
        x, y, z = pred_samples[1][5]
        pred_samples[1][5] = (x + 0.3, y + 0.4, z)
        pred = TrajectorySet(
            samples={k: tuple(v) for k, v in pred_samples.items()},
            class_names=dict(ref.class_names),
        )
        per_object, mean = trajectory_error(pred, ref, 1)
        assert per_object[1] == pytest.approx(0.5, abs=1e-12)
        assert per_object[2] == 0.0
        assert mean == pytest.approx(0.25, abs=1e-12)

    def test_mean_over_objects(self):
        ref = self._constant({1: (0.0, 0.0, 0.0), 2: (0.0, 0.0, 0.0)}, n=1)
        pred = self._constant({1: (1.0, 0.0, 0.0), 2: (3.0, 0.0, 0.0)}, n=1)
        per_object, mean = trajectory_error(pred, ref, 1)
        assert per_object == {1: 1.0, 2: 3.0}
        assert mean == 2.0

    def test_mismatched_ids_raise(self):
        a = self._constant({1: (0.0, 0.0, 0.0)})
        b = self._constant({2: (0.0, 0.0, 0.0)})
        with pytest.raises(TrajectoryMismatchError):
            trajectory_error(a, b, 1)

    def test_stride_subsampling_ignores_between_points(self):
        ref = self._constant({1: (0.0, 0.0, 0.0)}, n=41)
        samples = list(ref.samples[1])
        samples[3] = (9.0, 9.0, 9.0)  # not on the stride-20 lattice
        pred = TrajectorySet(samples={1: tuple(samples)}, class_names={1: "bottle"})
        per_object, _ = trajectory_error(pred, ref, 20)
        assert per_object[1] == 0.0


@st.composite
def scene_strategy(draw):
    layout = draw(layout_strategy(min_size=1, max_size=5, with_physics=False))
    params = {cls: draw(params_strategy(cls)) for cls in {o.class_name for o in layout}}
    vx = draw(st.integers(-70, -30).map(lambda t: t / 10.0))
    vy = draw(st.integers(-70, -30).map(lambda t: t / 10.0))
    return make_scene_spec(layout, params, (vx, vy))


class TestInvariants:
    @settings(max_examples=20, deadline=None)
    @given(scene_strategy())
    def test_cog_height_consistent_with_tilt(self, spec):
        config = SimConfig(n_steps=60)
        out = run_simulation(spec, config, collect_states=True)
        trajectories, _, _, states = out
        for state in states:
            for ospec, ost in zip(spec.instances, state.objects):
                h = CLASSES[ospec.class_name].cog_height
                # z recomputed from tilt must match the recorded kinematics
                assert h * math.cos(ost.tilt) <= h + 1e-12

        for oid, pts in trajectories.samples.items():
            h = CLASSES[trajectories.class_names[oid]].cog_height
            for state, p in zip(states, pts):
                ost = next(o for o in state.objects if o.object_id == oid)
                assert p[2] == pytest.approx(h * math.cos(ost.tilt), abs=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(scene_strategy())
    def test_tray_speed_non_increasing_after_impact(self, spec):
        config = SimConfig()
        _, _, _, states = run_simulation(spec, config, collect_states=True)
        speeds = [math.hypot(*s.tray.velocity) for s in states if s.impacted]
        for a, b in zip(speeds, speeds[1:]):
            assert b <= a + 1e-12

    @settings(max_examples=20, deadline=None)
    @given(scene_strategy())
    def test_pusher_never_penetrates_tray(self, spec):
        config = SimConfig()
        _, _, _, states = run_simulation(spec, config, collect_states=True)
        contact = TRAY_RADIUS + PUSHER_RADIUS
        for s in states:
            if s.impacted:
                d = math.hypot(
                    s.pusher.position[0] - s.tray.position[0],
                    s.pusher.position[1] - s.tray.position[1],
                )
                assert d >= contact - 1e-9

    @settings(max_examples=10, deadline=None)
    @given(layout_strategy(min_size=1, max_size=5))
    def test_zero_pusher_all_stable(self, layout):
        params = {
            cls: PhysicsParams(0.5, 0.3, 0.4, 5.0, CLASSES[cls].default_mass)
            for cls in {o.class_name for o in layout}
        }
        spec = make_scene_spec(layout, params, (0.0, 0.0))
        _, _, report = run_simulation(spec)
        assert all(report.stable.values())


class TestSceneValidation:
    def test_duplicate_cell_rejected(self):
        p = PhysicsParams(0.5, 0.3, 0.4, 5.0, 20.0)
        layout = (
            ObjectSpec(1, "bottle", 1, 1, "orange", p),
            ObjectSpec(2, "bottle", 1, 1, "blue", p),
        )
        with pytest.raises(SceneError):
            make_scene_spec(layout, {"bottle": p}, (-4.8, -4.8))

    def test_param_range_validation(self):
        with pytest.raises(SceneError):
            PhysicsParams(0.0, 0.3, 0.4, 5.0, 20.0)
        with pytest.raises(SceneError):
            PhysicsParams(1.2, 0.3, 0.4, 5.0, 20.0)
        with pytest.raises(SceneError):
            PhysicsParams(0.5, -0.1, 0.4, 5.0, 20.0)
        with pytest.raises(SceneError):
            PhysicsParams(0.5, 0.3, 0.4, 5.0, 0.0)

    def test_cell_centers(self):
        assert cell_center(1, 1) == (-0.9, 0.9)
        assert cell_center(2, 2) == (0.0, 0.0)
        assert cell_center(3, 3) == (0.9, -0.9)


class TestFormatTrajectories:
    def test_constant_point_formats_verbatim(self):
        ts = TrajectorySet(
            samples={1: tuple((-1.1, -1.1, 1.1) for _ in range(201))},
            class_names={1: "bottle"},
        )
        text = format_trajectories(ts, 20)
        assert text.startswith("bottle_motion_trajectory (x, y, z) = [(-1.1, -1.1, 1.1)")
        assert text.count("(-1.1, -1.1, 1.1)") == 11

    def test_stride_20_over_201_samples_gives_11_points(self):
        ts = TrajectorySet(
            samples={1: tuple((0.0, 0.0, 1.1) for _ in range(201))},
            class_names={1: "bottle"},
        )
        line = format_trajectories(ts, 20).strip()
        assert line.count("(") == 11 + 1  # 11 tuples plus the header coordinates

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            format_trajectories(TrajectorySet(samples={}, class_names={}), 20)
