"""Why eigenvalue thresholds do not transfer between sensors.

The Gauss-Newton Hessian sums one term per point, so the same tunnel seen
by a 128-beam sensor yields eigenvalues several times larger than with a
16-beam sensor. A threshold tuned for one is wrong for the other. This
prints the smallest-eigenvalue distribution for both presets.

    python demos/sensor_point_density.py
"""
import numpy as np

from localizability.environments import load_fixture
from localizability.evaluation import eigen_histogram, smallest_eigenvalues
from localizability.lidar import capture_scan, preset
from localizability.se3 import Pose6, from_euler_pose


def main():
    env = load_fixture("tunnel_square_10x5")
    rng = np.random.default_rng(0)
    poses = [Pose6(x, rng.normal(0, 0.5), 2.5 + rng.normal(0, 0.3), yaw=rng.normal(0, 0.05))
             for x in np.linspace(-15, 15, 8)]
    for name in ("vlp16", "os0_128"):
        sensor = preset(name, azimuth_steps=450)
        clouds = [capture_scan(env, sensor, from_euler_pose(p), rng) for p in poses]
        w = np.array([ev[0] for ev, _ in smallest_eigenvalues(clouds)])
        print(f"{name:8s} points/scan {np.mean([len(c) for c in clouds]):8.0f}  "
              f"smallest eigenvalue median {np.median(w):10.3f}")
        centres, counts = eigen_histogram(w, bins=6)
        for c, n in zip(centres, counts):
            print(f"          {c:10.3f} {'#' * int(n)}")


if __name__ == "__main__":
    main()
