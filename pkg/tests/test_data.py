import json
import subprocess
import sys

import numpy as np
import pytest

from potlift.data import (
    CameraModel,
    PoseSample,
    SynthConfig,
    load_dataset,
    normalize,
    project,
    save_dataset,
    synth_camera_points,
    synth_generate,
    to_arrays,
)
from potlift.errors import ConfigError, JointCountMismatch, NonPositiveDepth, SchemaViolation
from potlift.numerics import Rng
from potlift.skeleton import h36m_skeleton


def test_project_on_axis_and_depth_scaling():
    cam = CameraModel(fx=1000, fy=900, cx=320, cy=240)
    np.testing.assert_array_equal(project(np.array([[0.0, 0.0, 3000.0]]), cam), [[320.0, 240.0]])
    p = np.array([[150.0, -80.0, 2000.0]])
    near = project(p, cam)[0] - [320, 240]
    far = project(p * [1, 1, 2], cam)[0] - [320, 240]
    np.testing.assert_allclose(far, near / 2, rtol=1e-15)


def test_project_matches_scalar_formula():
    cam = CameraModel(fx=1145.0, fy=1143.0, cx=512.5, cy=515.0)
    pts = np.random.default_rng(0).uniform([-800, -800, 1000], [800, 800, 7000], (50, 3))
    got = project(pts, cam)
    for (x, y, z), (u, v) in zip(pts, got):
        assert u == cam.fx * x / z + cam.cx
        assert v == cam.fy * y / z + cam.cy


def test_project_rejects_nonpositive_depth():
    with pytest.raises(NonPositiveDepth):
        project(np.array([[0.0, 0.0, 1.0], [1.0, 1.0, 0.0]]), CameraModel())


def test_camera_rejects_bad_focal():
    with pytest.raises(ConfigError):
        CameraModel(fx=0.0)


def test_normalize_center_root_and_idempotence():
    cam = CameraModel(width=1000, height=800)
    j2d = np.array([[500.0, 400.0], [0.0, 0.0], [1000.0, 800.0]])
    j3d = np.array([[10.0, 20.0, 5000.0], [110.0, 20.0, 5000.0], [10.0, -80.0, 5100.0]])
    s = normalize(PoseSample(j2d, j3d, normalized=False), cam)
    np.testing.assert_array_equal(s.joints_2d, [[0, 0], [-1, -1], [1, 1]])
    np.testing.assert_array_equal(s.joints_3d[0], [0, 0, 0])
    again = normalize(s, cam)
    np.testing.assert_array_equal(again.joints_2d, s.joints_2d)
    np.testing.assert_array_equal(again.joints_3d, s.joints_3d)


def test_forward_kinematics_respects_bone_lengths():
    cfg = SynthConfig(count=1)
    cam_pts, _ = synth_camera_points(cfg, 64, Rng(3))
    sk = h36m_skeleton()
    parent = sk.parents()
    for j in range(sk.num_joints):
        if j == sk.root:
            continue
        length = np.linalg.norm(cam_pts[:, j] - cam_pts[:, parent[j]], axis=-1)
        assert np.max(np.abs(length - cfg.bone_lengths[sk.names[j]])) <= 1e-9
    assert np.all(cam_pts[..., 2] > 0)


def test_zero_noise_reprojects_exactly():
    cfg = SynthConfig(count=20, noise_px=0.0, seed=4)
    train, _ = synth_generate(cfg)
    cam_pts, _ = synth_camera_points(cfg, 20, Rng(4).split(0))
    uv = project(cam_pts, cfg.camera)
    x, y = to_arrays(train)
    expect = np.stack([2 * uv[..., 0] / cfg.camera.width - 1, 2 * uv[..., 1] / cfg.camera.height - 1], -1)
    np.testing.assert_array_equal(x, expect)
    np.testing.assert_array_equal(y, cam_pts - cam_pts[:, :1])


def test_generated_samples_are_root_relative():
    train, test = synth_generate(SynthConfig(count=10, seed=1))
    assert len(train) == 10 and len(test) == 2
    for s in train + test:
        np.testing.assert_array_equal(s.joints_3d[0], 0.0)
        assert s.joints_2d.shape == (17, 2)


def test_noise_scale_targets_one_joint():
    base = SynthConfig(count=200, seed=2, noise_px=0.0)
    noisy = SynthConfig(count=200, seed=2, noise_px=2.0, joint_noise_scale={5: 10.0})
    x0, _ = to_arrays(synth_generate(base)[0])
    x1, _ = to_arrays(synth_generate(noisy)[0])
    px = (x1 - x0) * 500.0  # back to pixels for a 1000 px image
    std = px.std(axis=(0, 2))
    assert abs(std[5] / 20.0 - 1) < 0.1
    assert np.all(np.abs(np.delete(std, 5) / 2.0 - 1) < 0.15)


def test_jsonl_round_trip_is_lossless(tmp_path):
    train, _ = synth_generate(SynthConfig(count=12, seed=5))
    path = tmp_path / "d.jsonl"
    save_dataset(train, path)
    back = load_dataset(path, num_joints=17)
    assert len(back) == 12
    for a, b in zip(train, back):
        np.testing.assert_array_equal(a.joints_2d, b.joints_2d)
        np.testing.assert_array_equal(a.joints_3d, b.joints_3d)
        assert (a.subject, a.action) == (b.subject, b.action)


def test_schema_errors(tmp_path):
    good = {"j2d": [[0, 0]] * 17, "j3d": [[0, 0, 0]] * 17, "subject": "s", "action": "a"}
    cases = {
        "not json": "{oops\n",
        "list": "[1, 2]\n",
        "missing": json.dumps({"j2d": good["j2d"]}) + "\n",
        "width": json.dumps({**good, "j2d": [[0, 0, 0]] * 17}) + "\n",
    }
    for name, text in cases.items():
        p = tmp_path / f"{name.replace(' ', '_')}.jsonl"
        p.write_text(text)
        with pytest.raises(SchemaViolation):
            load_dataset(p)
    p = tmp_path / "short.jsonl"
    p.write_text(json.dumps({**good, "j2d": [[0, 0]] * 16, "j3d": [[0, 0, 0]] * 16}) + "\n")
    assert len(load_dataset(p)) == 1
    with pytest.raises(JointCountMismatch):
        load_dataset(p, num_joints=17)
    p.write_text(json.dumps({**good, "j2d": [[0, 0]] * 16}) + "\n")
    with pytest.raises(JointCountMismatch):
        load_dataset(p)


def test_bad_synth_config_rejected():
    lengths = dict(SynthConfig().bone_lengths, r_knee=0.0)
    with pytest.raises(ConfigError):
        SynthConfig(bone_lengths=lengths).validate()
    with pytest.raises(ConfigError):
        SynthConfig(noise_px=-1).validate()
    with pytest.raises(ConfigError):
        SynthConfig.from_dict({"bogus": 1})
    cfg = SynthConfig(count=3, joint_noise_scale={2: 4.0}, camera=CameraModel(fx=900, fy=900))
    assert SynthConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_same_seed_gives_identical_bytes_across_processes(tmp_path):
    code = (
        "import sys; from potlift.data import SynthConfig, synth_generate, save_dataset;"
        "save_dataset(synth_generate(SynthConfig(count=25, seed=9))[0], sys.argv[1])"
    )
    paths = [tmp_path / "a.jsonl", tmp_path / "b.jsonl"]
    for p in paths:
        subprocess.run([sys.executable, "-c", code, str(p)], check=True)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    other = tmp_path / "c.jsonl"
    save_dataset(synth_generate(SynthConfig(count=25, seed=10))[0], other)
    assert other.read_bytes() != paths[0].read_bytes()
