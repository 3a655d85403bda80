import numpy as np
import pytest

from gripcvae import load_builtin_hand
from gripcvae.hand import parse_hand

SINGLE_LINK_URDF = """<robot name="solo">
  <link name="palm">
    <collision><origin xyz="1 2 3" rpy="0 0 0"/><geometry><box size="20 40 60"/></geometry></collision>
  </link>
</robot>
"""

SINGLE_LINK_ANN = """{
  "palm_link": "palm",
  "palm_normal": [0, 0, 1],
  "inner_points": {"palm": [0, 0, 30]}
}
"""

# Planar 2-segment finger (54 mm + 38 mm along +x); the distal frame sits at
# the chain end so straight-chain FK lands on (92, 0, 0).
TWO_LINK_URDF = """<robot name="planar2">
  <link name="base">
    <collision><geometry><box size="10 10 10"/></geometry></collision>
  </link>
  <link name="seg1">
    <collision><origin xyz="27 0 0" rpy="0 1.5707963267948966 0"/><geometry><capsule radius="5" length="54"/></geometry></collision>
  </link>
  <link name="seg2">
    <collision><origin xyz="38 0 0" rpy="0 1.5707963267948966 0"/><geometry><capsule radius="5" length="38"/></geometry></collision>
  </link>
  <joint name="j1" type="revolute">
    <origin xyz="0 0 0" rpy="0 0 0"/>
    <parent link="base"/>
    <child link="seg1"/>
    <axis xyz="0 0 1"/>
    <limit lower="-3.1" upper="3.1"/>
  </joint>
  <joint name="j2" type="revolute">
    <origin xyz="54 0 0" rpy="0 0 0"/>
    <parent link="seg1"/>
    <child link="seg2"/>
    <axis xyz="0 0 1"/>
    <limit lower="-3.1" upper="3.1"/>
  </joint>
</robot>
"""

TWO_LINK_ANN = """{
  "palm_link": "base",
  "palm_normal": [0, 0, 1],
  "inner_points": {"base": [0, 0, 5], "seg1": [0, -5, 0], "seg2": [0, -5, 0]}
}
"""

# Folds the thumb onto finger 1: their distal keypoints end up 0.45 mm apart.
THUMB_ON_FINGER1 = [0.142, 0.623, 0.975, 0.474, 0.043, 0.387, 0.585, 0.844,
                    0.62, 0.748, 0.372, 0.993, 0.827, 0.191, 0.956, 0.739]


@pytest.fixture(scope="session")
def al16():
    return load_builtin_hand()


@pytest.fixture(scope="session")
def single_link():
    return parse_hand(SINGLE_LINK_URDF, SINGLE_LINK_ANN)


@pytest.fixture(scope="session")
def two_link():
    return parse_hand(TWO_LINK_URDF, TWO_LINK_ANN)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-10)
    return float(np.abs(a - b).max(initial=0.0) / scale)
