import numpy as np
import pytest

from localizability.environments import BoxRoom, Cylinder, EnvironmentSpec, Plane, load_fixture
from localizability.lidar import (CloudFormatError, SensorModel, capture_scan, preset, read_cloud,
                                  write_cloud)
from localizability.se3 import Pose6, RigidTransform, compose, from_euler_pose, rot_y


def test_presets():
    v = preset("vlp16")
    assert (v.beam_count, v.vertical_fov) == (16, 30.0)
    o = preset("os0_128")
    assert (o.beam_count, o.vertical_fov) == (128, 90.0)
    with pytest.raises(KeyError):
        preset("vlp32")


def test_sensor_validation():
    with pytest.raises(ValueError):
        SensorModel(0, 30.0)
    with pytest.raises(ValueError):
        SensorModel(16, 30.0, azimuth_steps=3)
    with pytest.raises(ValueError):
        SensorModel(16, 30.0, range_noise_sigma=-0.1)


def test_elevations_span_the_field_of_view():
    el = np.degrees(preset("vlp16").elevations())
    assert el[0] == pytest.approx(-15) and el[-1] == pytest.approx(15) and len(el) == 16


def test_equatorial_beams_inside_cylinder_return_radius():
    # cylinder axis along the sensor z axis
    cyl = Cylinder(pose=RigidTransform(rot_y(np.pi / 2), np.zeros(3)), radius=5.0, length=100.0)
    env = EnvironmentSpec("c", (cyl,))
    s = SensorModel(1, 0.0, azimuth_steps=360, range_noise_sigma=0.0)
    pts = capture_scan(env, s, RigidTransform.identity(), np.random.default_rng(0))
    assert len(pts) == 360
    assert np.allclose(np.linalg.norm(pts, axis=1), 5.0, atol=1e-9)


def test_parallel_sensor_over_far_plane_sees_nothing():
    env = EnvironmentSpec("p", (Plane(),))
    s = SensorModel(1, 0.0, azimuth_steps=64)
    pts = capture_scan(env, s, from_euler_pose(Pose6(0, 0, 5.0)), np.random.default_rng(0))
    assert pts.shape == (0, 3)


def test_same_seed_is_bit_identical():
    env = load_fixture("room_cornered")
    T = from_euler_pose(Pose6(0.3, 0.2, 1.2, 0.1, 0.0, 0.4))
    a = capture_scan(env, preset("vlp16"), T, np.random.default_rng(5))
    b = capture_scan(env, preset("vlp16"), T, np.random.default_rng(5))
    assert a.tobytes() == b.tobytes()
    c = capture_scan(env, preset("vlp16"), T, np.random.default_rng(6))
    assert not np.array_equal(a, c)


def test_counts_and_ranges_bounded():
    env = load_fixture("tunnel_square_6x4")
    s = preset("os0_128", azimuth_steps=256)
    pts = capture_scan(env, s, from_euler_pose(Pose6(0, 0, 2.0)), np.random.default_rng(0))
    assert len(pts) <= s.beam_count * s.azimuth_steps
    assert np.all(np.isfinite(pts))
    assert np.all(np.linalg.norm(pts, axis=1) <= s.max_range + 6 * s.range_noise_sigma)


def test_noiseless_points_lie_on_room_walls():
    env = EnvironmentSpec("r", (BoxRoom(size=(10.0, 8.0, 3.0)),))
    T = from_euler_pose(Pose6(1.0, -0.5, 1.5, 0.2, -0.1, 0.9))
    s = preset("vlp16", range_noise_sigma=0.0)
    pts = T.apply(capture_scan(env, s, T, np.random.default_rng(0)))
    gap = np.min(np.abs(np.column_stack([pts[:, 0] - 5, pts[:, 0] + 5, pts[:, 1] - 4,
                                         pts[:, 1] + 4, pts[:, 2], pts[:, 2] - 3])), axis=1)
    assert gap.max() < 1e-6


def test_frame_consistency():
    G = from_euler_pose(Pose6(3.0, -1.0, 0.5, 0.2, 0.1, -0.8))
    base = Cylinder(radius=3.0, length=80.0)
    moved = Cylinder(pose=G, radius=3.0, length=80.0)
    T = from_euler_pose(Pose6(1.0, 0.5, -0.3, 0.05, -0.1, 0.6))
    s = preset("vlp16", range_noise_sigma=0.0, azimuth_steps=300)
    a = capture_scan(EnvironmentSpec("a", (base,)), s, T, np.random.default_rng(0))
    b = capture_scan(EnvironmentSpec("b", (moved,)), s, compose(G, T), np.random.default_rng(0))
    assert a.shape == b.shape
    assert np.allclose(a, b, atol=1e-9)


def test_cloud_file_roundtrip(tmp_path):
    pts = np.random.default_rng(0).normal(size=(50, 3)).astype(np.float32)
    write_cloud(tmp_path / "c.pcdbin", pts)
    assert np.array_equal(read_cloud(tmp_path / "c.pcdbin"), pts)
    write_cloud(tmp_path / "e.pcdbin", np.zeros((0, 3)))
    assert read_cloud(tmp_path / "e.pcdbin").shape == (0, 3)


def test_cloud_file_errors(tmp_path):
    p = tmp_path / "c.pcdbin"
    write_cloud(p, np.ones((4, 3)))
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(CloudFormatError, match="expected 4 points"):
        read_cloud(p)
    p.write_bytes(b"garbage!")
    with pytest.raises(CloudFormatError):
        read_cloud(p)
