"""Monte Carlo localizability labels for the four symmetric fixtures.

Each scene has an obvious answer: a plane cannot pin down x, y or yaw, a
tunnel loses its axis, a cylinder also loses roll about the axis, and a
cornered room constrains everything. The expected error e is printed in
units of the label thresholds, so values above 1 mean "not localizable".

    python demos/label_symmetric_scenes.py [--samples 50]
"""
import argparse
import time

import numpy as np

from localizability.environments import load_fixture
from localizability.labeling import LabelThresholds, MonteCarloParams, label_scan
from localizability.lidar import preset
from localizability.se3 import Pose6, from_euler_pose

SCENES = [
    ("plane_flat", Pose6(0.0, 0.0, 1.0)),
    ("tunnel_square_10x5", Pose6(0.0, 0.5, 2.5)),
    ("cylinder_r3", Pose6(0.0, 0.3, -0.2)),
    ("room_cornered", Pose6(0.5, 0.3, 1.2, yaw=0.4)),
]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--samples", type=int, default=50, help="Monte Carlo children per scan")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    sensor = preset("vlp16", azimuth_steps=450)
    alpha = LabelThresholds().as_internal()
    print(f"{'scene':<20} {'points':>6}  e / alpha (x y z roll pitch yaw)        d")
    for name, pose in SCENES:
        t0 = time.perf_counter()
        cloud, d, e = label_scan(load_fixture(name), from_euler_pose(pose), sensor,
                                 MonteCarloParams(args.samples), seed=args.seed)
        ratio = " ".join(f"{v:5.2f}" for v in e / alpha)
        print(f"{name:<20} {len(cloud):>6}  {ratio}  {d.tolist()}  ({time.perf_counter() - t0:.0f} s)")


if __name__ == "__main__":
    main()
