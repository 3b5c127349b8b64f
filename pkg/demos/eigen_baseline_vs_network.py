"""A single eigenvalue threshold against a small learned classifier.

The classical detector flags an axis when the smallest Hessian eigenvalue
aligned with it falls below a hand-picked threshold. The threshold that
works for one scene rarely works for another, because eigenvalues scale
with point count and range. This demo labels a handful of scans per scene
with Monte Carlo registration, sweeps the threshold, trains the network on
fixture-labelled scans, and writes the comparison report.

    python demos/eigen_baseline_vs_network.py --out /tmp/comparison
"""
import argparse
from pathlib import Path

import numpy as np

from localizability.dataset import LabeledSample, Provenance
from localizability.environments import load_fixture
from localizability.evaluation import agreement_f1, compare_methods, write_report
from localizability.labeling import MonteCarloParams, label_scan
from localizability.lidar import capture_scan, preset
from localizability.net import NetworkConfig, TrainConfig, decide, evaluate_probabilities, train
from localizability.se3 import Pose6, from_euler_pose

LABELS = {"plane_flat": (1, 1, 0, 0, 0, 1), "tunnel_square_10x5": (1, 0, 0, 0, 0, 0),
          "room_cornered": (0, 0, 0, 0, 0, 0)}


def poses(name, n, rng):
    w = load_fixture(name).paths[0].waypoints
    out = []
    for _ in range(n):
        i = rng.integers(len(w) - 1)
        xyz = w[i] + rng.uniform() * (w[i + 1] - w[i]) + rng.normal(0, 0.3, 3) * [1, 1, 0.3]
        yaw = rng.normal(0, 0.05) if name.startswith("tunnel") else rng.uniform(-np.pi, np.pi)
        out.append(Pose6(*xyz, *rng.normal(0, 0.02, 2), yaw))
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="comparison_report")
    ap.add_argument("--samples", type=int, default=40, help="Monte Carlo children per test scan")
    ap.add_argument("--test-poses", type=int, default=4)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    sensor = preset("vlp16", azimuth_steps=450)

    # training scans carry the fixture label; no Monte Carlo needed
    train_set = []
    for name, label in LABELS.items():
        env = load_fixture(name)
        for k, p in enumerate(poses(name, 40, rng)):
            cloud = capture_scan(env, sensor, from_euler_pose(p), rng)
            train_set.append(LabeledSample(cloud, np.array(label), np.zeros(6),
                                           Provenance(name, 0, k, 0, p, k)))
    net, train_cfg = NetworkConfig(), TrainConfig(initial_lr=0.5)
    params, history = train(train_set, [], net, train_cfg)
    print(f"trained {len(history)} epochs, final loss {history[-1]['train_loss']:.4f}")

    # test scans carry Monte Carlo labels
    test = []
    for name in LABELS:
        env = load_fixture(name)
        for k, p in enumerate(poses(name, args.test_poses, rng)):
            cloud, d, e = label_scan(env, from_euler_pose(p), sensor, MonteCarloParams(args.samples), seed=k)
            test.append(LabeledSample(cloud, d, e, Provenance(name, 0, k, 0, p, k)))
            print(f"  {name} pose {k}: d={d.tolist()}")

    pred = decide(evaluate_probabilities(params, [s.cloud for s in test], net), train_cfg.decision_thresholds)
    thresholds = list(np.logspace(-1, 5, 25))
    report = compare_methods(test, thresholds, pred)
    print("\nworst-axis agreement F1 per scene")
    print(f"{'threshold':>10}  " + "  ".join(f"{n[:12]:>12}" for n in LABELS))
    for i, t in enumerate(thresholds[::3]):
        row = [agreement_f1(report.baseline_per_env[n][3 * i]).min() for n in LABELS]
        print(f"{t:10.3g}  " + "  ".join(f"{v:12.2f}" for v in row))
    row = [agreement_f1(report.network_per_env[n]).min() for n in LABELS]
    print(f"{'network':>10}  " + "  ".join(f"{v:12.2f}" for v in row))
    print(f"\nthresholds good for every scene: {report.universal_thresholds()}")
    print(f"report written to {write_report(report, Path(args.out))}")


if __name__ == "__main__":
    main()
