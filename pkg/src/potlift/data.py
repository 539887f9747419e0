"""Pose records, JSONL I/O, pinhole projection and a synthetic kinematic generator."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, JointCountMismatch, NonPositiveDepth, SchemaViolation
from .numerics import Rng
from .skeleton import H36M_JOINT_NAMES, Skeleton, h36m_skeleton


@dataclass
class PoseSample:
    joints_2d: np.ndarray
    joints_3d: np.ndarray
    subject: str = ""
    action: str = ""
    normalized: bool = True

    def to_record(self) -> dict:
        return {
            "j2d": self.joints_2d.tolist(),
            "j3d": self.joints_3d.tolist(),
            "subject": self.subject,
            "action": self.action,
        }


@dataclass(frozen=True)
class CameraModel:
    fx: float = 1145.0
    fy: float = 1145.0
    cx: float = 500.0
    cy: float = 500.0
    width: int = 1000
    height: int = 1000

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive")


def project(p3d: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Pinhole projection of camera-space points (..., 3) in mm to pixels (..., 2)."""
    p3d = np.asarray(p3d, dtype=np.float64)
    z = p3d[..., 2]
    if np.any(z <= 0):
        raise NonPositiveDepth("all points must lie in front of the camera")
    u = cam.fx * p3d[..., 0] / z + cam.cx
    v = cam.fy * p3d[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1)


def normalize(sample: PoseSample, cam: CameraModel | None = None, image_size: tuple[int, int] | None = None, root: int = 0) -> PoseSample:
    """Map pixels to [-1, 1] by image size and re-center 3D on the root joint.

    Already-normalized samples keep their 2D coordinates, so the operation is
    idempotent.
    """
    j3d = np.asarray(sample.joints_3d, dtype=np.float64)
    j3d = j3d - j3d[root]
    j2d = np.asarray(sample.joints_2d, dtype=np.float64)
    if not sample.normalized:
        if image_size is None:
            cam = cam or CameraModel()
            image_size = (cam.width, cam.height)
        w, h = image_size
        j2d = np.stack([2.0 * j2d[:, 0] / w - 1.0, 2.0 * j2d[:, 1] / h - 1.0], axis=-1)
    return replace(sample, joints_2d=j2d, joints_3d=j3d, normalized=True)


# ---------------------------------------------------------------- JSONL I/O


def save_dataset(samples: Iterable[PoseSample], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record()) + "\n")


def _matrix(rec: dict, key: str, width: int, lineno: int) -> np.ndarray:
    try:
        arr = np.asarray(rec[key], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaViolation(f"line {lineno}: bad or missing '{key}'") from exc
    if arr.ndim != 2 or arr.shape[1] != width:
        raise SchemaViolation(f"line {lineno}: '{key}' must be a list of {width}-vectors")
    return arr


def load_dataset(path: str | Path, num_joints: int | None = None) -> list[PoseSample]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaViolation(f"line {lineno}: invalid JSON") from exc
            if not isinstance(rec, dict):
                raise SchemaViolation(f"line {lineno}: record must be an object")
            j2d = _matrix(rec, "j2d", 2, lineno)
            j3d = _matrix(rec, "j3d", 3, lineno)
            if len(j2d) != len(j3d):
                raise JointCountMismatch(f"line {lineno}: {len(j2d)} 2D vs {len(j3d)} 3D joints")
            if num_joints is not None and len(j2d) != num_joints:
                raise JointCountMismatch(f"line {lineno}: {len(j2d)} joints, expected {num_joints}")
            out.append(PoseSample(j2d, j3d, str(rec.get("subject", "")), str(rec.get("action", ""))))
    return out


def to_arrays(samples: list[PoseSample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into (N, J, 2) inputs and (N, J, 3) millimeter targets."""
    if not samples:
        return np.zeros((0, 0, 2)), np.zeros((0, 0, 3))
    return np.stack([s.joints_2d for s in samples]), np.stack([s.joints_3d for s in samples])


# ------------------------------------------------------------ synthetic data

_DOWN, _UP = (0.0, -1.0, 0.0), (0.0, 1.0, 0.0)
_LEFT, _RIGHT = (1.0, 0.0, 0.0), (-1.0, 0.0, 0.0)

# Body frame: x toward the subject's left, y up, z forward.
REST_DIRECTIONS = {
    "r_hip": _RIGHT, "r_knee": _DOWN, "r_ankle": _DOWN,
    "l_hip": _LEFT, "l_knee": _DOWN, "l_ankle": _DOWN,
    "spine": _UP, "thorax": _UP, "neck": _UP, "head": _UP,
    "l_shoulder": _LEFT, "l_elbow": _DOWN, "l_wrist": _DOWN,
    "r_shoulder": _RIGHT, "r_elbow": _DOWN, "r_wrist": _DOWN,
}  # fmt: skip

DEFAULT_BONE_LENGTHS = {
    "r_hip": 130.0, "r_knee": 440.0, "r_ankle": 440.0,
    "l_hip": 130.0, "l_knee": 440.0, "l_ankle": 440.0,
    "spine": 230.0, "thorax": 250.0, "neck": 110.0, "head": 115.0,
    "l_shoulder": 150.0, "l_elbow": 280.0, "l_wrist": 250.0,
    "r_shoulder": 150.0, "r_elbow": 280.0, "r_wrist": 250.0,
}  # fmt: skip

# Local Euler ranges in degrees (x, y, z) for the rotation at each bone.
# Knees and elbows only flex one way, so limbs never fold through themselves.
DEFAULT_ANGLE_RANGES = {
    "r_hip": [[-10, 10], [-10, 10], [-10, 10]],
    "l_hip": [[-10, 10], [-10, 10], [-10, 10]],
    "r_knee": [[-70, 30], [-20, 20], [-20, 20]],
    "l_knee": [[-70, 30], [-20, 20], [-20, 20]],
    "r_ankle": [[0, 80], [0, 0], [0, 0]],
    "l_ankle": [[0, 80], [0, 0], [0, 0]],
    "spine": [[-20, 30], [-20, 20], [-15, 15]],
    "thorax": [[-15, 15], [-15, 15], [-15, 15]],
    "neck": [[-20, 20], [-20, 20], [-20, 20]],
    "head": [[-30, 30], [-40, 40], [-20, 20]],
    "l_shoulder": [[-10, 10], [-10, 10], [-10, 10]],
    "r_shoulder": [[-10, 10], [-10, 10], [-10, 10]],
    "l_elbow": [[-90, 90], [-30, 30], [-10, 80]],
    "r_elbow": [[-90, 90], [-30, 30], [-80, 10]],
    "l_wrist": [[-110, 0], [0, 0], [0, 0]],
    "r_wrist": [[-110, 0], [0, 0], [0, 0]],
}


@dataclass(frozen=True)
class SynthConfig:
    count: int = 1024
    test_count: int | None = None
    seed: int = 0
    noise_px: float = 1.0
    joint_noise_scale: dict = field(default_factory=dict)
    bone_lengths: dict = field(default_factory=lambda: dict(DEFAULT_BONE_LENGTHS))
    angle_ranges: dict = field(default_factory=lambda: {k: [list(r) for r in v] for k, v in DEFAULT_ANGLE_RANGES.items()})
    root_yaw_deg: tuple = (-180.0, 180.0)
    root_tilt_deg: float = 10.0
    lateral_mm: float = 300.0
    vertical_mm: float = 200.0
    depth_mm: tuple = (4000.0, 6000.0)
    camera: CameraModel = CameraModel()
    subject: str = "synth"

    def validate(self) -> "SynthConfig":
        if self.count < 0 or (self.test_count is not None and self.test_count < 0):
            raise ConfigError("sample counts must be non-negative")
        if self.noise_px < 0:
            raise ConfigError("noise_px must be non-negative")
        missing = set(REST_DIRECTIONS) - set(self.bone_lengths)
        if missing:
            raise ConfigError(f"missing bone lengths for {sorted(missing)}")
        for name, length in self.bone_lengths.items():
            if not float(length) > 0:
                raise ConfigError(f"bone length for {name} must be positive, got {length}")
        for name, rng in self.angle_ranges.items():
            if len(rng) != 3 or any(lo > hi for lo, hi in rng):
                raise ConfigError(f"bad angle range for {name}")
        for j, s in self.joint_noise_scale.items():
            if not 0 <= int(j) < len(H36M_JOINT_NAMES) or s < 0:
                raise ConfigError(f"bad joint noise scale {j}: {s}")
        if not 0 < self.depth_mm[0] <= self.depth_mm[1]:
            raise ConfigError("depth range must be positive")
        return self

    @property
    def n_test(self) -> int:
        return self.test_count if self.test_count is not None else max(1, self.count // 4)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["joint_noise_scale"] = {str(k): v for k, v in self.joint_noise_scale.items()}
        d["root_yaw_deg"] = list(self.root_yaw_deg)
        d["depth_mm"] = list(self.depth_mm)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        d = dict(d)
        if "camera" in d and isinstance(d["camera"], dict):
            d["camera"] = CameraModel(**d["camera"])
        if "joint_noise_scale" in d:
            d["joint_noise_scale"] = {int(k): float(v) for k, v in d["joint_noise_scale"].items()}
        for key in ("root_yaw_deg", "depth_mm"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d).validate()


def _rotations(angles: np.ndarray) -> np.ndarray:
    """(..., 3) Euler angles in radians -> (..., 3, 3) matrices Rz @ Ry @ Rx."""
    cx, cy, cz = np.cos(angles[..., 0]), np.cos(angles[..., 1]), np.cos(angles[..., 2])
    sx, sy, sz = np.sin(angles[..., 0]), np.sin(angles[..., 1]), np.sin(angles[..., 2])
    r = np.empty(angles.shape[:-1] + (3, 3))
    r[..., 0, 0] = cz * cy
    r[..., 0, 1] = cz * sy * sx - sz * cx
    r[..., 0, 2] = cz * sy * cx + sz * sx
    r[..., 1, 0] = sz * cy
    r[..., 1, 1] = sz * sy * sx + cz * cx
    r[..., 1, 2] = sz * sy * cx - cz * sx
    r[..., 2, 0] = -sy
    r[..., 2, 1] = cy * sx
    r[..., 2, 2] = cy * cx
    return r


def _bfs_order(sk: Skeleton) -> list[int]:
    parent = sk.parents()
    order, frontier = [sk.root], [sk.root]
    while frontier:
        frontier = [j for p in frontier for j in range(sk.num_joints) if parent[j] == p]
        order += frontier
    return order


def forward_kinematics(local: np.ndarray, root_rot: np.ndarray, cfg: SynthConfig, sk: Skeleton | None = None) -> np.ndarray:
    """Body-frame joint positions (N, J, 3) from per-joint local rotations (N, J, 3, 3)."""
    sk = sk or h36m_skeleton()
    names = sk.names
    parent = sk.parents()
    n = local.shape[0]
    pos = np.zeros((n, sk.num_joints, 3))
    glob = np.empty((n, sk.num_joints, 3, 3))
    glob[:, sk.root] = root_rot
    for j in _bfs_order(sk)[1:]:
        glob[:, j] = glob[:, parent[j]] @ local[:, j]
        bone = float(cfg.bone_lengths[names[j]]) * np.asarray(REST_DIRECTIONS[names[j]])
        pos[:, j] = pos[:, parent[j]] + glob[:, j] @ bone
    return pos


def synth_camera_points(cfg: SynthConfig, n: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Camera-space joints (N, J, 3) in mm and their noise-free projections (N, J, 2)."""
    sk = h36m_skeleton()
    lo = np.zeros((sk.num_joints, 3))
    hi = np.zeros((sk.num_joints, 3))
    for name, ranges in cfg.angle_ranges.items():
        j = sk.names.index(name)
        lo[j], hi[j] = np.radians(np.asarray(ranges, dtype=np.float64)).T
    local = _rotations(lo + (hi - lo) * rng.uniform((n, sk.num_joints, 3)))

    u = rng.uniform((n, 3))
    tilt = np.radians(cfg.root_tilt_deg)
    yaw_lo, yaw_hi = np.radians(cfg.root_yaw_deg)
    root_angles = np.stack(
        [(2 * u[:, 0] - 1) * tilt, yaw_lo + (yaw_hi - yaw_lo) * u[:, 1], (2 * u[:, 2] - 1) * tilt], axis=-1
    )
    body = forward_kinematics(local, _rotations(root_angles), cfg, sk)

    # body (y up, z toward camera) -> camera (y down, z forward): rotate pi about x
    cam_pts = body * np.array([1.0, -1.0, -1.0])
    t = rng.uniform((n, 3))
    offset = np.stack(
        [
            (2 * t[:, 0] - 1) * cfg.lateral_mm,
            (2 * t[:, 1] - 1) * cfg.vertical_mm,
            cfg.depth_mm[0] + (cfg.depth_mm[1] - cfg.depth_mm[0]) * t[:, 2],
        ],
        axis=-1,
    )
    cam_pts = cam_pts + offset[:, None, :]
    return cam_pts, project(cam_pts, cfg.camera)


def _generate_split(cfg: SynthConfig, n: int, rng: Rng, tag: str) -> list[PoseSample]:
    cam_pts, uv = synth_camera_points(cfg, n, rng)
    scale = np.ones(uv.shape[1])
    for j, s in cfg.joint_noise_scale.items():
        scale[int(j)] = s
    noise = rng.normal(uv.shape) * cfg.noise_px * scale[None, :, None]
    uv = uv + noise
    cam = cfg.camera
    return [
        normalize(PoseSample(uv[i], cam_pts[i], cfg.subject, tag, normalized=False), cam, (cam.width, cam.height))
        for i in range(n)
    ]


def synth_generate(cfg: SynthConfig) -> tuple[list[PoseSample], list[PoseSample]]:
    """Deterministic (train, test) splits for ``cfg.seed``."""
    cfg.validate()
    root = Rng(cfg.seed)
    train = _generate_split(cfg, cfg.count, root.split(0), "train")
    test = _generate_split(cfg, cfg.n_test, root.split(1), "test")
    return train, test
