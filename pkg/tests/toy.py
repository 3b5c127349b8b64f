"""Fixture-labelled toy tasks shared by the end-to-end tests."""
import numpy as np

from localizability.dataset import LabeledSample, Provenance
from localizability.environments import is_collision_free, load_fixture
from localizability.lidar import capture_scan, preset
from localizability.net import NetworkConfig, TrainConfig
from localizability.se3 import Pose6, from_euler_pose

# symmetry labels of the canonical fixtures
CLASS_LABELS = {
    "plane_flat": (1, 1, 0, 0, 0, 1),
    "tunnel_square_10x5": (1, 0, 0, 0, 0, 0),
    "cylinder_r3": (1, 0, 0, 1, 0, 0),
    "room_small": (0, 0, 0, 0, 0, 0),
    "room_cornered": (0, 0, 0, 0, 0, 0),
}
VLP16 = preset("vlp16", azimuth_steps=300)
NET = NetworkConfig()
TRAIN = TrainConfig(batch_size=8, epochs=20, initial_lr=0.5, lr_decay=0.9, seed=0)


def toy_poses(name, n, seed):
    """Near-level poses spread along the first path, free yaw only where the scene allows it."""
    env = load_fixture(name)
    rng = np.random.default_rng(seed)
    w = env.paths[0].waypoints
    free_yaw = CLASS_LABELS[name][5] == 1 or CLASS_LABELS[name] == (0,) * 6
    out = []
    while len(out) < n:
        i = rng.integers(len(w) - 1)
        xyz = w[i] + rng.uniform() * (w[i + 1] - w[i]) + rng.normal(0, 0.3, 3) * [1, 1, 0.3]
        yaw = rng.uniform(-np.pi, np.pi) if free_yaw else rng.normal(0, 0.05)
        p = Pose6(*xyz, *rng.normal(0, 0.02, 2), yaw)
        if is_collision_free(env, xyz, 0.3):
            out.append(p)
    return env, out


def toy_samples(name, n, seed, sensor=VLP16):
    env, poses = toy_poses(name, n, seed)
    rng = np.random.default_rng(seed + 1)
    out = []
    for k, p in enumerate(poses):
        cloud = capture_scan(env, sensor, from_euler_pose(p), rng)
        out.append(LabeledSample(cloud, np.array(CLASS_LABELS[name]), np.zeros(6),
                                 Provenance(name, 0, k, 0, p, seed * 1000 + k)))
    return out
