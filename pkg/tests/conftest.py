import numpy as np
import pytest
from hypothesis import strategies as st

from traylab.dataset import DatasetConfig, generate_problem
from traylab.physics import CLASS_ORDER, ObjectSpec, PhysicsParams
from traylab.scene_dsl import PALETTE_ORDER, SceneProgram
from traylab.physics import PUSHER_HEIGHT, PUSHER_START, TRAY_PHYSICS


def grid_value(lo_tenths: int, hi_tenths: int):
    """One-decimal values in [lo_tenths, hi_tenths] / 10."""
    return st.integers(lo_tenths, hi_tenths).map(lambda t: t / 10.0)


def params_strategy(class_name: str):
    from traylab.physics import CLASSES

    return st.builds(
        PhysicsParams,
        sliding_friction=grid_value(2, 10),
        armature=grid_value(1, 9),
        stiffness=grid_value(1, 9),
        damping=grid_value(1, 99),
        mass=st.just(CLASSES[class_name].default_mass),
    )


@st.composite
def layout_strategy(draw, min_size=1, max_size=9, classes=CLASS_ORDER[:3], with_physics=False):
    n = draw(st.integers(min_size, max_size))
    cells = draw(
        st.permutations([(r, c) for r in (1, 2, 3) for c in (1, 2, 3)]).map(lambda p: p[:n])
    )
    colors = draw(st.permutations(list(PALETTE_ORDER)).map(lambda p: p[:n]))
    objects = []
    for i in range(n):
        cls = draw(st.sampled_from(list(classes)))
        physics = draw(params_strategy(cls)) if with_physics else None
        objects.append(
            ObjectSpec(
                object_id=i + 1,
                class_name=cls,
                row=cells[i][0],
                col=cells[i][1],
                color=colors[i],
                physics=physics,
            )
        )
    return tuple(objects)


@st.composite
def program_strategy(draw):
    """Valid scene programs on the generation grid, one params per class."""
    classes = CLASS_ORDER[:3]
    shared = {cls: draw(params_strategy(cls)) for cls in classes}
    layout = draw(layout_strategy(min_size=1, max_size=9, classes=classes))
    decls = tuple(
        ObjectSpec(
            object_id=o.object_id,
            class_name=o.class_name,
            row=o.row,
            col=o.col,
            color=o.color,
            physics=shared[o.class_name],
        )
        for o in layout
    )
    return SceneProgram(
        pusher_start=(PUSHER_START[0], PUSHER_START[1], PUSHER_HEIGHT),
        tray_physics=TRAY_PHYSICS,
        declarations=decls,
    )


@pytest.fixture(scope="session")
def small_problems():
    """A handful of generated problems shared across tests."""
    cfg = DatasetConfig()
    return [generate_problem(seed, cfg) for seed in range(3)]


def rng(seed=0):
    return np.random.default_rng(seed)
