"""Labelled scan datasets: generation over environment paths, power-set
balancing, parent-level splitting and on-disk persistence."""
from __future__ import annotations

import json
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .environments import PARENT_SIGMAS, EnvironmentSpec, is_collision_free, sample_parent_pose
from .labeling import LabelThresholds, MonteCarloParams, label_scan, localizability_from_error
from .lidar import CloudFormatError, SensorModel, read_cloud, write_cloud
from .registration import ICPConfig
from .se3 import Pose6, derive_rng, from_euler_pose

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MAX_POSE_RETRIES = 50


class EnvironmentUnusableError(RuntimeError):
    """No collision-free pose could be sampled around a waypoint."""


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Provenance:
    env: str
    path_index: int
    waypoint_index: int
    sample_index: int
    pose: Pose6
    seed: int

    @property
    def key(self) -> str:
        return f"{self.env}-p{self.path_index}-w{self.waypoint_index}-s{self.sample_index}"

    def to_json(self) -> dict:
        return {"env": self.env, "path_index": self.path_index,
                "waypoint_index": self.waypoint_index, "sample_index": self.sample_index,
                "pose": self.pose.to_json(), "seed": self.seed}

    @classmethod
    def from_json(cls, d: dict) -> "Provenance":
        return cls(d["env"], int(d["path_index"]), int(d["waypoint_index"]),
                   int(d["sample_index"]), Pose6.from_json(d["pose"]), int(d["seed"]))


@dataclass
class LabeledSample:
    cloud: np.ndarray
    target: np.ndarray  # 6 binary labels
    error: np.ndarray  # expected registration error, m / rad
    provenance: Provenance
    thresholds: LabelThresholds = field(default_factory=LabelThresholds)

    @property
    def id(self) -> str:
        return self.provenance.key

    @property
    def code(self) -> int:
        return powerset_code(self.target)

    def labels_consistent(self) -> bool:
        return bool(np.array_equal(localizability_from_error(self.error, self.thresholds),
                                   self.target))


def powerset_code(d) -> int:
    """Bit ``i`` of the code is label ``i`` (x is bit 0, yaw bit 5)."""
    d = np.asarray(d, dtype=np.int64)
    return int(np.sum(d << np.arange(6)))


def powerset_labels(code: int) -> np.ndarray:
    if not 0 <= code < 64:
        raise ValueError("power-set code must lie in [0, 63]")
    return (code >> np.arange(6)) & 1


# --------------------------------------------------------------------------
# generation


def _sample_pose(env, path, wi, rng, sigmas):
    for _ in range(MAX_POSE_RETRIES):
        pose = sample_parent_pose(path, wi, rng, sigmas)
        if is_collision_free(env, pose.as_array()[:3]):
            return pose
    raise EnvironmentUnusableError(
        f"{env.name}: no collision-free pose near waypoint {wi} "
        f"{path.waypoints[wi].tolist()} after {MAX_POSE_RETRIES} attempts")


def _label_one(args):
    env, prov, sensor, mc, icp, thresholds = args
    cloud, d, e = label_scan(env, from_euler_pose(prov.pose), sensor, mc, icp, thresholds, prov.seed)
    return LabeledSample(cloud, d, e, prov, thresholds)


def plan_parents(envs, samples_per_path_point: int, master_seed: int,
                 sigmas=PARENT_SIGMAS) -> list:
    """Collision-checked parent poses for every waypoint, as ``(env, Provenance)``."""
    plan = []
    for ei, env in enumerate(envs):
        if not env.paths:
            raise EnvironmentUnusableError(f"{env.name}: environment has no sampling path")
        for pi, path in enumerate(env.paths):
            for wi in range(len(path)):
                for si in range(samples_per_path_point):
                    rng = derive_rng(master_seed, 0, ei, pi, wi, si)
                    pose = _sample_pose(env, path, wi, rng, sigmas)
                    seed = int(derive_rng(master_seed, 1, ei, pi, wi, si).integers(2**62))
                    plan.append((env, Provenance(env.name, pi, wi, si, pose, seed)))
    return plan


def generate_dataset(envs, samples_per_path_point: int = 1, sensor: SensorModel | None = None,
                     mc: MonteCarloParams = MonteCarloParams(), icp: ICPConfig = ICPConfig(),
                     thresholds: LabelThresholds = LabelThresholds(), master_seed: int = 0,
                     *, jobs: int = 1, sigmas=PARENT_SIGMAS) -> list:
    """Sample, capture and label parent scans along every path of every environment.

    Every parent pose gets its own seeds derived from ``master_seed`` and its
    position in the plan, so the output is independent of ``jobs``.
    """
    if sensor is None:
        from .lidar import preset
        sensor = preset("vlp16")
    if samples_per_path_point < 1:
        raise ValueError("samples_per_path_point must be >= 1")
    plan = plan_parents(envs, samples_per_path_point, master_seed, sigmas)
    tasks = [(env, prov, sensor, mc, icp, thresholds) for env, prov in plan]
    if jobs <= 1:
        out = []
        for t in tasks:
            out.append(_label_one(t))
            log.info("labelled %s d=%s", t[1].key, out[-1].target.tolist())
        return out
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_label_one, tasks))


# --------------------------------------------------------------------------
# balancing and splitting


def class_census(samples) -> Counter:
    return Counter(s.code for s in samples)


def balance_powerset(samples, max_factor: int = 100, seed: int = 0) -> list:
    """Up-sample rare power-set classes by seeded duplication.

    The two most common classes are left alone. Every other class is
    duplicated toward the most common count, but never beyond ``max_factor``
    times its original size. Originals keep their order; duplicates follow,
    grouped by class code.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("cannot balance an empty sample list")
    if max_factor < 1:
        raise ValueError("max_factor must be >= 1")
    by_code = {}
    for i, s in enumerate(samples):
        by_code.setdefault(s.code, []).append(i)
    ranked = sorted(by_code, key=lambda c: (-len(by_code[c]), c))
    if len(ranked) < 3:
        return samples
    top = len(by_code[ranked[0]])
    rng = np.random.default_rng(seed)
    out = list(samples)
    for code in sorted(ranked[2:]):
        members = by_code[code]
        target = min(top, max_factor * len(members))
        extra = target - len(members)
        if extra > 0:
            out.extend(samples[i] for i in rng.choice(members, size=extra, replace=True))
    return out


def split(samples, ratios=(0.8, 0.2), seed: int = 0):
    """Split by parent pose so that duplicates never straddle the split."""
    ratios = np.asarray(ratios, dtype=float)
    if len(ratios) != 2 or np.any(ratios < 0) or abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError("ratios must be two non-negative numbers summing to 1")
    keys = sorted({s.id for s in samples})
    perm = np.random.default_rng(seed).permutation(len(keys))
    n_train = int(round(ratios[0] * len(keys)))
    train_keys = {keys[i] for i in perm[:n_train]}
    train = [s for s in samples if s.id in train_keys]
    valid = [s for s in samples if s.id not in train_keys]
    return train, valid


# --------------------------------------------------------------------------
# persistence


def write_dataset(samples, directory, metadata: dict | None = None) -> Path:
    """``manifest.json`` plus one ``clouds/<id>.pcdbin`` per distinct parent."""
    directory = Path(directory)
    (directory / "clouds").mkdir(parents=True, exist_ok=True)
    records, written = [], set()
    thresholds = samples[0].thresholds.to_json() if samples else LabelThresholds().to_json()
    for s in samples:
        rel = f"clouds/{s.id}.pcdbin"
        if s.id not in written:
            write_cloud(directory / rel, s.cloud)
            written.add(s.id)
        records.append({"id": s.id, "cloud": rel, "target": np.asarray(s.target).tolist(),
                        "error": np.asarray(s.error).tolist(), "code": s.code,
                        "thresholds": s.thresholds.to_json(),
                        "provenance": s.provenance.to_json()})
    manifest = {"schema_version": MANIFEST_VERSION, "thresholds": thresholds,
                **(metadata or {}), "samples": records}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def read_dataset(directory):
    """Returns ``(samples, manifest)``; clouds are float32 as stored."""
    directory = Path(directory)
    mpath = directory / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"{mpath}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{mpath}: {exc}") from None
    if manifest.get("schema_version") != MANIFEST_VERSION:
        raise DatasetFormatError(f"{mpath}: unsupported schema version "
                                 f"{manifest.get('schema_version')}")
    cache, samples = {}, []
    for k, r in enumerate(manifest.get("samples", [])):
        try:
            if r["cloud"] not in cache:
                cache[r["cloud"]] = read_cloud(directory / r["cloud"])
            samples.append(LabeledSample(
                cache[r["cloud"]], np.asarray(r["target"], dtype=np.int64),
                np.asarray(r["error"], dtype=float), Provenance.from_json(r["provenance"]),
                LabelThresholds(**r["thresholds"])))
        except CloudFormatError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{mpath}: sample {k}: {exc!r}") from None
    return samples, manifest
