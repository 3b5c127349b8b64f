"""Command line entry point: label, gen-dataset, train, eval, detect.

Exit codes: 0 ok, 2 configuration error, 3 environment error, 4 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (DatasetFormatError, EnvironmentUnusableError, balance_powerset,
                      generate_dataset, read_dataset, split, write_dataset)
from .environments import (EnvironmentFormatError, EnvironmentValidationError, fixtures_dir,
                           is_collision_free, load_environment, waypoint_pose)
from .evaluation import compare_methods, compute_metrics, pr_curve, write_csv, write_report
from .labeling import (DegenerateParentError, LabelThresholds, MonteCarloParams, capture_parent,
                       expected_registration_error, localizability_from_error)
from .lidar import CloudFormatError, preset, read_cloud, write_cloud
from .net import (DEFAULT_DECISION_THRESHOLDS, EmptyGridError, NetworkConfig, TrainConfig,
                  decide, evaluate_probabilities, init_params, load_checkpoint, save_checkpoint,
                  train)
from .registration import AXES, ICPConfig
from .se3 import PerturbationSigmas, Pose6, from_euler_pose

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_CONFIG, EXIT_ENV, EXIT_DATA = 0, 2, 3, 4

log = logging.getLogger("localizability")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class EnvError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    environments: list = field(default_factory=list)
    sensor: str = "vlp16"
    sensor_overrides: dict = field(default_factory=dict)
    seed: int = 0
    samples_per_path_point: int = 1
    mc: MonteCarloParams = field(default_factory=MonteCarloParams)
    icp: ICPConfig = field(default_factory=ICPConfig)
    thresholds: LabelThresholds = field(default_factory=LabelThresholds)
    net: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decision_thresholds: tuple = DEFAULT_DECISION_THRESHOLDS
    max_factor: int = 100
    split: tuple = (0.8, 0.2)
    balance: bool = True

    def make_sensor(self):
        try:
            return preset(self.sensor, **self.sensor_overrides)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"sensor: {exc}") from None

    def to_json(self) -> dict:
        return {
            "environments": list(self.environments), "sensor": self.sensor,
            "sensor_overrides": dict(self.sensor_overrides), "seed": self.seed,
            "samples_per_path_point": self.samples_per_path_point,
            "mc": self.mc.to_json(), "icp": self.icp.to_json(),
            "thresholds": self.thresholds.to_json(), "net": self.net.to_json(),
            "train": self.train.to_json(),
            "decision_thresholds": list(self.decision_thresholds),
            "max_factor": self.max_factor, "split": list(self.split), "balance": self.balance,
        }


_SCALARS = {"environments", "sensor", "seed", "samples_per_path_point", "decision_thresholds",
            "max_factor", "split", "balance"}


def _build(cls, table: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {sorted(unknown)}")
    try:
        return cls(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def config_from_dict(data: dict, base: Path = Path(".")) -> RunConfig:
    data = dict(data)
    cfg = RunConfig()
    unknown = set(data) - _SCALARS - {"mc", "icp", "thresholds", "net", "train", "sensor_overrides"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    for key in _SCALARS & set(data):
        setattr(cfg, key, data[key])
    cfg.environments = [str(resolve_env_path(e, base)) for e in cfg.environments]
    if "sensor_overrides" in data:
        cfg.sensor_overrides = dict(data["sensor_overrides"])
        if "name" in cfg.sensor_overrides:
            raise ConfigError("sensor_overrides may not rename the preset")
    if "mc" in data:
        mc = dict(data["mc"])
        sig = mc.pop("sigmas", {})
        cfg.mc = _build(MonteCarloParams, {**mc, "sigmas": _build(PerturbationSigmas, sig, "mc.sigmas")}, "mc")
    if "icp" in data:
        cfg.icp = _build(ICPConfig, data["icp"], "icp")
    if "thresholds" in data:
        cfg.thresholds = _build(LabelThresholds, data["thresholds"], "thresholds")
    if "net" in data:
        cfg.net = _build(NetworkConfig, data["net"], "net")
    if "train" in data:
        t = dict(data["train"])
        if "decision_thresholds" in t:
            t["decision_thresholds"] = tuple(t["decision_thresholds"])
        cfg.train = _build(TrainConfig, t, "train")
    cfg.decision_thresholds = tuple(float(v) for v in cfg.decision_thresholds)
    if len(cfg.decision_thresholds) != 6 or not all(0 < v < 1 for v in cfg.decision_thresholds):
        raise ConfigError("decision_thresholds must be six values in (0, 1)")
    cfg.split = tuple(float(v) for v in cfg.split)
    if cfg.max_factor < 1:
        raise ConfigError("max_factor must be >= 1")
    if cfg.sensor not in ("vlp16", "os0_128"):
        raise ConfigError(f"unknown sensor preset {cfg.sensor!r}")
    cfg.make_sensor()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: config file not found")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data, path.parent)


def resolve_env_path(name, base: Path = Path(".")) -> Path:
    """A path as given, relative to ``base``, or the name of a shipped fixture."""
    for cand in (Path(name), base / name, fixtures_dir() / name, fixtures_dir() / f"{name}.json"):
        if cand.is_file():
            return cand
    raise ConfigError(f"environment file not found: {name}")


def _load_env(path):
    try:
        return load_environment(path)
    except (EnvironmentFormatError, EnvironmentValidationError) as exc:
        raise EnvError(str(exc)) from None


# --------------------------------------------------------------------------
# output helpers


class JsonLineFormatter(logging.Formatter):
    def __init__(self):
        super().__init__()
        self.t0 = time.monotonic()

    def format(self, record):
        return json.dumps({"level": record.levelname.lower(), "stage": getattr(record, "stage", record.name),
                           "elapsed_s": round(time.monotonic() - self.t0, 3),
                           "message": record.getMessage()})


def setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger("localizability")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def write_run_manifest(directory: Path, command: str, cfg: RunConfig, inputs: dict) -> None:
    manifest = {"tool": "localizability", "version": __version__, "command": command,
                "seed": cfg.seed, "config": cfg.to_json(), "inputs": inputs}
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "run_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _floats(text: str, n: int | None = None, what: str = "values") -> list:
    try:
        vals = [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise ConfigError(f"could not parse {what}: {text!r}") from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"expected {n} comma-separated {what}, got {len(vals)}")
    return vals


def _base_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "sensor", None):
        cfg.sensor = args.sensor
    if getattr(args, "samples", None) is not None:
        cfg.mc = MonteCarloParams(args.samples, cfg.mc.sigmas, cfg.mc.initial_guess)
    if getattr(args, "initial_guess", None):
        cfg.mc = MonteCarloParams(cfg.mc.samples, cfg.mc.sigmas, args.initial_guess)
    return cfg


# --------------------------------------------------------------------------
# subcommands


def cmd_label(args) -> int:
    cfg = _base_config(args)
    env_path = resolve_env_path(args.env)
    env = _load_env(env_path)
    if args.pose:
        x, y, z, r, p, w = _floats(args.pose, 6, "pose values")
        pose = Pose6.from_degrees(x, y, z, r, p, w)
    else:
        if not 0 <= args.path_index < len(env.paths):
            raise ConfigError(f"{env_path}: no path with index {args.path_index}")
        path = env.paths[args.path_index]
        if not 0 <= args.waypoint < len(path):
            raise ConfigError(f"{env_path}: path {args.path_index} has no waypoint {args.waypoint}")
        pose = waypoint_pose(path, args.waypoint)
    if not is_collision_free(env, pose.as_array()[:3]):
        raise EnvError(f"pose {pose.to_json()} is not collision free in {env.name}")
    sensor = cfg.make_sensor()
    T = from_euler_pose(pose)
    cloud = capture_parent(env, T, sensor, cfg.seed)
    try:
        e, children = expected_registration_error(env, T, sensor, cfg.mc, cfg.icp, cfg.seed,
                                                  parent_cloud=cloud, jobs=args.jobs)
    except DegenerateParentError as exc:
        raise EnvError(str(exc)) from None
    d = localizability_from_error(e, cfg.thresholds)
    record = {"env": env.name, "pose": pose.to_json(), "seed": cfg.seed, "sensor": cfg.sensor,
              "d": d.tolist(), "e": e.tolist(), "points": int(len(cloud))}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_cloud(out / "cloud.pcdbin", cloud)
        record["cloud"] = "cloud.pcdbin"
        (out / "labels.jsonl").write_text(json.dumps(record, sort_keys=True) + "\n")
        write_run_manifest(out, "label", cfg, {"env": str(args.env), "pose": pose.to_json()})
        if args.dump_icp:
            with open(out / "icp_dump.jsonl", "w") as fh:
                for c in children:
                    fh.write(json.dumps(c.to_json(), sort_keys=True) + "\n")
    elif args.dump_icp:
        for c in children:
            print(json.dumps(c.to_json(), sort_keys=True), file=sys.stderr)
    print(json.dumps(record, sort_keys=True))
    log.info("labelled d=%s", d.tolist(), extra={"stage": "label"})
    return EXIT_OK


def cmd_gen_dataset(args) -> int:
    cfg = _base_config(args)
    if not cfg.environments:
        raise ConfigError("config lists no environments")
    envs = [_load_env(p) for p in cfg.environments]
    sensor = cfg.make_sensor()
    try:
        samples = generate_dataset(envs, cfg.samples_per_path_point, sensor, cfg.mc, cfg.icp,
                                   cfg.thresholds, cfg.seed, jobs=args.jobs)
    except (EnvironmentUnusableError, DegenerateParentError) as exc:
        raise EnvError(str(exc)) from None
    out = Path(args.out_dir)
    write_dataset(samples, out, {"sensor": sensor.to_json(), "mc": cfg.mc.to_json(),
                                 "icp": cfg.icp.to_json(), "seed": cfg.seed})
    write_run_manifest(out, "gen-dataset", cfg, {"config": str(args.config)})
    log.info("wrote %d samples to %s", len(samples), out, extra={"stage": "gen-dataset"})
    return EXIT_OK


def _read_dataset(path):
    try:
        return read_dataset(path)
    except (DatasetFormatError, CloudFormatError) as exc:
        raise DataError(str(exc)) from None


def cmd_train(args) -> int:
    cfg = _base_config(args)
    if args.epochs is not None:
        t = cfg.train
        cfg.train = TrainConfig(t.batch_size, args.epochs, t.initial_lr, t.lr_decay, t.seed,
                                t.decision_thresholds)
    samples, _ = _read_dataset(args.dataset)
    if not samples:
        raise DataError(f"{args.dataset}: dataset is empty")
    train_set, valid_set = split(samples, cfg.split, cfg.seed)
    if not train_set:
        raise DataError("training split is empty")
    if cfg.balance:
        train_set = balance_powerset(train_set, cfg.max_factor, cfg.seed)
    out = Path(args.out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    split_info = {"seed": cfg.seed, "ratios": list(cfg.split)}

    def on_epoch(epoch, params, record):
        save_checkpoint(ckpt_dir / f"epoch_{epoch}.l3enet", params, cfg.net, epoch,
                        {**record, "split": split_info})
        log.info("epoch %d train_loss=%.5f valid_loss=%s", epoch, record["train_loss"],
                 record.get("valid_loss"), extra={"stage": "train"})

    try:
        params, history = train(train_set, valid_set, cfg.net, cfg.train, on_epoch)
    except EmptyGridError as exc:
        raise DataError(str(exc)) from None
    if not history:
        params = init_params(cfg.net)
    save_checkpoint(ckpt_dir / "best.l3enet", params, cfg.net, len(history),
                    {"history": history, "split": split_info})
    (out / "history.json").write_text(json.dumps(history, indent=1, sort_keys=True))
    write_run_manifest(out, "train", cfg, {"dataset": str(args.dataset),
                                           "train_samples": len(train_set),
                                           "valid_samples": len(valid_set)})
    return EXIT_OK


def _load_ckpt(path):
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def cmd_eval(args) -> int:
    cfg = _base_config(args)
    samples, manifest = _read_dataset(args.dataset)
    params, net_cfg, header = _load_ckpt(args.checkpoint)
    split_info = header.get("metrics", {}).get("split")
    if args.subset == "valid" and split_info:
        _, samples = split(samples, split_info["ratios"], split_info["seed"])
    if not samples:
        raise DataError("no samples to evaluate")
    tau = _floats(args.decision_thresholds, 6, "decision thresholds") \
        if args.decision_thresholds else list(cfg.decision_thresholds)
    probs = _probabilities(params, [s.cloud for s in samples], net_cfg, cfg.seed, args.jobs)
    truths = np.array([s.target for s in samples])
    pred = decide(probs, tau)
    metrics = compute_metrics(pred, truths)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = {"network": metrics.to_json(), "decision_thresholds": tau, "subset": args.subset,
              "samples": len(samples)}
    for i, axis in enumerate(AXES):
        write_csv(out / f"pr_curve_{axis}.csv", ("tau", "precision", "recall"),
                  [(f"{t:.4f}", f"{p:.6f}", f"{r:.6f}") for t, p, r in pr_curve(probs, truths, i)])
    if args.eigen_thresholds:
        thr = _floats(args.eigen_thresholds, None, "eigen thresholds")
        sensor = manifest.get("sensor", {}).get("name", cfg.sensor)
        report = compare_methods(samples, thr, pred,
                                 sensor_sets={sensor: [s.cloud for s in samples]},
                                 normal_neighbors=cfg.icp.normal_neighbors)
        write_report(report, out)
        result["baseline"] = {f"{t:g}": m.to_json() for t, m in zip(thr, report.baseline)}
    (out / "metrics.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    write_run_manifest(out, "eval", cfg, {"dataset": str(args.dataset),
                                          "checkpoint": str(args.checkpoint),
                                          "eigen_thresholds": args.eigen_thresholds})
    print(json.dumps(result["network"]["macro"], sort_keys=True))
    return EXIT_OK


def _prob_chunk(args):
    params, clouds, net_cfg, seed, offset = args
    from .voxel import prepare_input
    from .net import forward
    from .se3 import derive_rng
    return [forward(params, prepare_input(c, derive_rng(seed, offset + i), net_cfg.points,
                                          net_cfg.voxel_size, net_cfg.features), net_cfg)[0]
            for i, c in enumerate(clouds)]


def _probabilities(params, clouds, net_cfg, seed, jobs):
    try:
        if jobs <= 1:
            return evaluate_probabilities(params, clouds, net_cfg, seed)
        from concurrent.futures import ProcessPoolExecutor
        bounds = np.array_split(np.arange(len(clouds)), jobs)
        tasks = [(params, [clouds[i] for i in b], net_cfg, seed, int(b[0])) for b in bounds if len(b)]
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(_prob_chunk, tasks))
        return np.array([p for part in parts for p in part]).reshape(-1, 6)
    except EmptyGridError as exc:
        raise DataError(str(exc)) from None


def cmd_detect(args) -> int:
    cfg = _base_config(args)
    params, net_cfg, _ = _load_ckpt(args.checkpoint)
    if args.cloud_file:
        files = [Path(args.cloud_file)]
    else:
        d = Path(args.cloud_dir)
        if not d.is_dir():
            raise ConfigError(f"cloud directory not found: {d}")
        files = sorted(d.glob("*.pcdbin"))
    tau = _floats(args.decision_thresholds, 6, "decision thresholds") \
        if args.decision_thresholds else list(cfg.decision_thresholds)
    status = EXIT_OK
    for i, f in enumerate(files):
        if not f.is_file():
            raise ConfigError(f"cloud file not found: {f}")
        try:
            cloud = read_cloud(f)
        except CloudFormatError as exc:
            raise DataError(str(exc)) from None
        if len(cloud) == 0:
            log.error("%s: cloud is empty", f, extra={"stage": "detect"})
            status = EXIT_DATA
            continue
        p = evaluate_probabilities(params, [cloud], net_cfg, cfg.seed)[0]
        d = decide(p, tau)
        print(f"{f.name} d=[{','.join(str(int(v)) for v in d)}] "
              f"p=[{','.join(f'{v:.4f}' for v in p)}]")
    return status


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="localizability",
                                 description="LiDAR scan localizability labelling and detection.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="TOML run configuration")
        if seed:
            p.add_argument("--seed", type=int, help="master seed (overrides config)")

    p = sub.add_parser("label", help="Monte Carlo label a single scan")
    common(p)
    p.add_argument("--env", required=True, help="environment JSON file or fixture name")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--pose", help="x,y,z,roll_deg,pitch_deg,yaw_deg")
    g.add_argument("--path-index", type=int, help="use a waypoint of this sampling path")
    p.add_argument("--waypoint", type=int, default=0, help="waypoint index on the path")
    p.add_argument("--sensor", choices=("vlp16", "os0_128"))
    p.add_argument("--samples", type=int, help="Monte Carlo sample count M")
    p.add_argument("--initial-guess", choices=("identity", "truth"))
    p.add_argument("--out", help="output directory for cloud, labels and manifest")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--dump-icp", action="store_true", help="write per-child ICP diagnostics")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("gen-dataset", help="generate a labelled dataset")
    common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--samples", type=int, help="Monte Carlo sample count M")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="train the classifier on a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint and the eigenvalue baseline")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eigen-thresholds", help="comma-separated baseline thresholds")
    p.add_argument("--decision-thresholds", help="six comma-separated probability thresholds")
    p.add_argument("--subset", choices=("valid", "all"), default="valid")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="predict localizability of stored clouds")
    common(p)
    p.add_argument("--checkpoint", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--cloud-file")
    g.add_argument("--cloud-dir")
    p.add_argument("--decision-thresholds", help="six comma-separated probability thresholds")
    p.set_defaults(func=cmd_detect)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    setup_logging(args.verbose)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error(str(exc), extra={"stage": args.command})
        return EXIT_CONFIG
    except EnvError as exc:
        log.error(str(exc), extra={"stage": args.command})
        return EXIT_ENV
    except DataError as exc:
        log.error(str(exc), extra={"stage": args.command})
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
