import numpy as np
import pytest

from posevox.camera import make_circle_rig
from posevox.heatmap import HeatmapStack, default_joint_names


@pytest.fixture(scope="session")
def rig5():
    """The default 5-camera ring used across end-to-end tests."""
    return make_circle_rig(
        5, 4600.0, (3300.0, 3400.0, 3500.0, 3600.0, 3450.0)
    )


def random_stack(rng, k=2, h=12, w=16):
    vals = rng.random((k, h, w)).astype(np.float32)
    return HeatmapStack(values=vals, joint_names=default_joint_names(k))


def oracle_bilinear(values, u, v):
    """Scalar reference bilinear sample with the out-of-bounds-is-zero rule."""
    h, w = values.shape
    if not (0.0 <= u <= w - 1 and 0.0 <= v <= h - 1):
        return 0.0
    u0, v0 = int(np.floor(u)), int(np.floor(v))
    u1, v1 = min(u0 + 1, w - 1), min(v0 + 1, h - 1)
    du, dv = u - u0, v - v0
    top = values[v0, u0] * (1 - du) + values[v0, u1] * du
    bot = values[v1, u0] * (1 - du) + values[v1, u1] * du
    return float(top * (1 - dv) + bot * dv)
