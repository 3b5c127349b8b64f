import json

import numpy as np
import pytest

from toy import NET, TRAIN, toy_samples

from localizability import __version__
from localizability.cli import EXIT_CONFIG, EXIT_DATA, EXIT_ENV, EXIT_OK, build_parser, main
from localizability.lidar import write_cloud
from localizability.net import init_params, load_checkpoint, save_checkpoint, train

FAST = """\
environments = ["plane_flat", "room_small"]
seed = 3

[sensor_overrides]
azimuth_steps = 300

[mc]
samples = 3

[train]
epochs = 1
"""


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "run.toml").write_text(FAST)
    assert main(["gen-dataset", "--config", str(d / "run.toml"), "--out-dir", str(d / "ds")]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def toy_checkpoint(tmp_path_factory):
    samples = toy_samples("plane_flat", 40, 1) + toy_samples("room_small", 40, 2)
    params, _ = train(samples, [], NET, TRAIN)
    path = tmp_path_factory.mktemp("ckpt") / "toy.l3enet"
    save_checkpoint(path, params, NET, TRAIN.epochs)
    return path


def test_every_subcommand_has_help(capsys):
    for cmd in ("label", "gen-dataset", "train", "eval", "detect"):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args([cmd, "--help"])
        assert exc.value.code == 0
        assert "--config" in capsys.readouterr().out


def test_label_tunnel_waypoint(tmp_path, capsys):
    cfg = tmp_path / "t.toml"
    cfg.write_text("[sensor_overrides]\nazimuth_steps = 450\n")
    code = main(["label", "--env", "tunnel_square_10x5.json", "--path-index", "0", "--sensor", "vlp16",
                 "--seed", "7", "--samples", "40", "--config", str(cfg), "--out", str(tmp_path / "out")])
    assert code == EXIT_OK
    rec = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert rec["d"] == [1, 0, 0, 0, 0, 0]
    line = json.loads((tmp_path / "out" / "labels.jsonl").read_text())
    assert line == rec
    man = json.loads((tmp_path / "out" / "run_manifest.json").read_text())
    assert man["seed"] == 7 and man["version"] == __version__


def test_label_missing_env_is_config_error(tmp_path):
    assert main(["label", "--env", str(tmp_path / "nope.json"), "--path-index", "0"]) == EXIT_CONFIG


def test_label_pose_in_wall_is_environment_error():
    assert main(["label", "--env", "room_small", "--pose", "50,0,1,0,0,0", "--samples", "2"]) == EXIT_ENV


def test_label_bad_waypoint_and_pose_text():
    assert main(["label", "--env", "room_small", "--path-index", "3"]) == EXIT_CONFIG
    assert main(["label", "--env", "room_small", "--pose", "1,2,3"]) == EXIT_CONFIG


def test_unknown_config_key(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("colour = 3\n")
    assert main(["gen-dataset", "--config", str(p), "--out-dir", str(tmp_path / "o")]) == EXIT_CONFIG
    p.write_text("[icp]\nmax_iterations = 0\n")
    assert main(["gen-dataset", "--config", str(p), "--out-dir", str(tmp_path / "o")]) == EXIT_CONFIG
    p.write_text("[sensor_overrides]\nazimuth_steps = 2\n")
    assert main(["gen-dataset", "--config", str(p), "--out-dir", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["gen-dataset", "--config", str(tmp_path / "missing.toml"),
                 "--out-dir", str(tmp_path / "o")]) == EXIT_CONFIG


def test_manifests_are_byte_identical(dataset, tmp_path):
    assert main(["gen-dataset", "--config", str(dataset / "run.toml"), "--out-dir", str(tmp_path / "ds")]) == 0
    a = (dataset / "ds" / "run_manifest.json").read_bytes()
    b = (tmp_path / "ds" / "run_manifest.json").read_bytes()
    assert a == b
    man = json.loads(a)
    assert man["seed"] == 3 and man["config"]["sensor_overrides"] == {"azimuth_steps": 300}
    assert (dataset / "ds" / "manifest.json").read_bytes() == (tmp_path / "ds" / "manifest.json").read_bytes()


def test_train_zero_epochs_keeps_initialization(dataset, tmp_path):
    out = tmp_path / "tr"
    assert main(["train", "--config", str(dataset / "run.toml"), "--dataset", str(dataset / "ds"),
                 "--out-dir", str(out), "--epochs", "0"]) == EXIT_OK
    params, net_cfg, _ = load_checkpoint(out / "checkpoints" / "best.l3enet")
    init = init_params(net_cfg)
    assert all(np.array_equal(params[k], init[k]) for k in init)
    assert (out / "run_manifest.json").is_file()


def test_train_and_eval_write_artifacts(dataset, tmp_path, capsys):
    tr, ev = tmp_path / "tr", tmp_path / "ev"
    assert main(["train", "--config", str(dataset / "run.toml"), "--dataset", str(dataset / "ds"),
                 "--out-dir", str(tr)]) == EXIT_OK
    assert (tr / "checkpoints" / "epoch_0.l3enet").is_file()
    assert main(["eval", "--config", str(dataset / "run.toml"), "--dataset", str(dataset / "ds"),
                 "--checkpoint", str(tr / "checkpoints" / "best.l3enet"), "--eigen-thresholds", "1,100",
                 "--out-dir", str(ev)]) == EXIT_OK
    m = json.loads((ev / "metrics.json").read_text())
    assert set(m["network"]["per_axis"]) == {"x", "y", "z", "roll", "pitch", "yaw"}
    assert set(m["baseline"]) == {"1", "100"}
    for f in ("comparison.json", "pr_curve_yaw.csv", "run_manifest.json"):
        assert (ev / f).is_file()


def test_eval_errors(dataset, tmp_path):
    assert main(["eval", "--dataset", str(dataset / "ds"), "--checkpoint", str(tmp_path / "none.l3enet"),
                 "--out-dir", str(tmp_path / "ev")]) == EXIT_CONFIG
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "manifest.json").write_text("{not json")
    ckpt = tmp_path / "c.l3enet"
    save_checkpoint(ckpt, init_params(NET), NET)
    assert main(["eval", "--dataset", str(broken), "--checkpoint", str(ckpt),
                 "--out-dir", str(tmp_path / "ev")]) == EXIT_DATA


def test_detect_plane_scan(toy_checkpoint, tmp_path, capsys):
    cloud = toy_samples("plane_flat", 1, 99)[0].cloud
    write_cloud(tmp_path / "plane.pcdbin", cloud)
    assert main(["detect", "--checkpoint", str(toy_checkpoint), "--cloud-file",
                 str(tmp_path / "plane.pcdbin")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "d=[1,1,0,0,0,1]" in out and "p=[" in out


def test_detect_empty_cloud_exits_4(toy_checkpoint, tmp_path, capsys):
    write_cloud(tmp_path / "a_plane.pcdbin", toy_samples("plane_flat", 1, 98)[0].cloud)
    write_cloud(tmp_path / "b_empty.pcdbin", np.zeros((0, 3)))
    assert main(["detect", "--checkpoint", str(toy_checkpoint), "--cloud-dir", str(tmp_path)]) == EXIT_DATA
    assert "a_plane.pcdbin d=[" in capsys.readouterr().out
    (tmp_path / "c_bad.pcdbin").write_bytes(b"garbage")
    assert main(["detect", "--checkpoint", str(toy_checkpoint), "--cloud-file",
                 str(tmp_path / "c_bad.pcdbin")]) == EXIT_DATA
