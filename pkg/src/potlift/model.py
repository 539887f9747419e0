"""Pose-oriented transformer (stage I) and uncertainty-guided refiner (stage II).

Both networks operate in "model units": 3D coordinates divided by
``ModelConfig.unit_mm`` (200 mm by default, close to the spread of
root-relative joint positions). Inputs are normalized 2D joints.
Everything accepts a single pose (J, k) or a batch (B, J, k).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .attention import ATTENTION_KINDS, EncoderLayer
from .errors import ConfigError, NonPositiveSigma, ShapeMismatch
from .modules import LayerNorm, Linear, Module
from .numerics import Rng, Tensor, add, as_tensor, concat_last_dim, exp, mul, take_rows
from .skeleton import Skeleton, assign_groups, build_skeleton, distance_matrix, h36m_skeleton

EMBED_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    num_joints: int = 17
    dim: int = 96
    heads: int = 6
    pot_layers: int = 12
    ugrn_layers: int = 3
    num_groups: int = 5
    dropout: float = 0.25
    ffn_ratio: float = 1.5
    pot_attention: str = "posa"
    ugrn_attention: str = "ugsa"
    group_embedding: bool = True
    unit_mm: float = 200.0

    @classmethod
    def our_l(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def our_s(cls, **kw) -> "ModelConfig":
        return cls(**{"dim": 48, **kw})

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**{"dim": 32, "pot_layers": 4, "ugrn_layers": 2, "heads": 4, **kw})

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        return cls(**{"num_joints": 5, "dim": 8, "heads": 2, "pot_layers": 2, "ugrn_layers": 1, **kw})

    def validate(self) -> "ModelConfig":
        if self.dim <= 0 or self.heads <= 0 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.num_joints < 2 or self.num_groups < 1:
            raise ConfigError("need at least 2 joints and 1 group")
        if self.pot_layers < 0 or self.ugrn_layers < 0:
            raise ConfigError("layer counts must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.pot_attention not in ATTENTION_KINDS[:2]:
            raise ConfigError("pot_attention must be 'mhsa' or 'posa'")
        if self.ugrn_attention not in ATTENTION_KINDS:
            raise ConfigError(f"ugrn_attention must be one of {ATTENTION_KINDS}")
        if self.ffn_ratio <= 0 or self.unit_mm <= 0:
            raise ConfigError("ffn_ratio and unit_mm must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def default_skeleton(num_joints: int) -> Skeleton:
    """H36M tree for 17 joints; otherwise a star of chains hanging off joint 0."""
    if num_joints == 17:
        return h36m_skeleton()
    if num_joints == 5:
        return build_skeleton(5, [(0, 1), (1, 2), (0, 3), (3, 4)], 0)
    return build_skeleton(num_joints, [(i - 1, i) for i in range(1, num_joints)], 0)


class Head(Module):
    """LayerNorm followed by a single linear map C -> 3."""

    def __init__(self, dim: int, rng: Rng):
        self.norm = LayerNorm(dim)
        self.fc = Linear(dim, 3, rng)

    def __call__(self, z: Tensor) -> Tensor:
        return self.fc(self.norm(z))


def embed(x: Tensor, proj: Linear, keypoint: Tensor, group: Tensor | None, phi: np.ndarray) -> Tensor:
    """Per-joint projection plus keypoint embedding plus group embedding of phi(i)."""
    x = as_tensor(x)
    if x.shape[-2] != keypoint.shape[0] or x.shape[-1] != proj.weight.shape[1]:
        raise ShapeMismatch(f"input {x.shape} does not fit ({keypoint.shape[0]}, {proj.weight.shape[1]})")
    z = add(proj(x), keypoint)
    if group is not None:
        z = add(z, take_rows(group, phi))
    return z


class _PoseNet(Module):
    def _init_common(self, cfg: ModelConfig, skeleton: Skeleton, in_dim: int, n_layers: int, kind: str, rng: Rng):
        if skeleton.num_joints != cfg.num_joints:
            raise ShapeMismatch(f"skeleton has {skeleton.num_joints} joints, config {cfg.num_joints}")
        self.cfg = cfg
        self.skeleton = skeleton
        self.dist = distance_matrix(skeleton)
        self.groups = assign_groups(self.dist, skeleton.root, cfg.num_groups)
        self.input_proj = Linear(in_dim, cfg.dim, rng)
        self.param("keypoint_embed", EMBED_STD * rng.normal((cfg.num_joints, cfg.dim)))
        if cfg.group_embedding:
            self.param("group_embed", EMBED_STD * rng.normal((cfg.num_groups, cfg.dim)))
        self.layers = [
            EncoderLayer(cfg.dim, cfg.heads, kind, rng, cfg.ffn_ratio, cfg.dropout) for _ in range(n_layers)
        ]

    def _embed(self, x: Tensor) -> Tensor:
        return embed(x, self.input_proj, self.keypoint_embed, getattr(self, "group_embed", None), self.groups)


class PotModel(_PoseNet):
    def __init__(self, cfg: ModelConfig, skeleton: Skeleton | None = None, rng: Rng | None = None):
        cfg.validate()
        rng = rng or Rng(0)
        self._init_common(cfg, skeleton or default_skeleton(cfg.num_joints), 2, cfg.pot_layers, cfg.pot_attention, rng)
        self.head = Head(cfg.dim, rng)
        self.uncertainty_head = Head(cfg.dim, rng)

    def encoder_parameters(self) -> list[tuple[str, Tensor]]:
        """Everything except the uncertainty head: the part frozen in stage II."""
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("uncertainty_head.")]


class UgrnModel(_PoseNet):
    def __init__(self, cfg: ModelConfig, skeleton: Skeleton | None = None, rng: Rng | None = None):
        cfg.validate()
        rng = rng or Rng(1)
        self._init_common(cfg, skeleton or default_skeleton(cfg.num_joints), 5, cfg.ugrn_layers, cfg.ugrn_attention, rng)
        self.head = Head(cfg.dim, rng)


def pot_forward(m: PotModel, x, rng: Rng | None = None, training: bool = False) -> tuple[Tensor, Tensor]:
    """Return (final encoder features, first-stage 3D pose)."""
    z = m._embed(as_tensor(x))
    for layer in m.layers:
        z = layer(z, rng, training, dist=m.dist)
    return z, m.head(z)


def uncertainty(m: PotModel, z: Tensor) -> Tensor:
    """sigma = exp(s / 2) where s is the head's log-variance output."""
    return exp(mul(m.uncertainty_head(z), 0.5))


def ugrn_forward(u: UgrnModel, x, y_bar, sigma, rng: Rng | None = None, training: bool = False) -> Tensor:
    """Refine a (sampled) 3D pose given the 2D input and per-joint sigma."""
    x, y_bar, sigma = as_tensor(x), as_tensor(y_bar), as_tensor(sigma)
    if y_bar.shape[-1] != 3 or y_bar.shape[:-1] != x.shape[:-1]:
        raise ShapeMismatch(f"3D pose {y_bar.shape} does not match 2D input {x.shape}")
    if np.any(sigma.data <= 0):
        raise NonPositiveSigma("sigma must be strictly positive")
    z = u._embed(concat_last_dim([y_bar, x]))
    for layer in u.layers:
        z = layer(z, rng, training, dist=u.dist, sigma=sigma)
    return u.head(z)


def infer(pot: PotModel, ugrn: UgrnModel | None, x) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Deterministic two-stage prediction; the refiner sees Y~ directly (no sampling)."""
    z, y_tilde = pot_forward(pot, x, None, False)
    sigma = uncertainty(pot, z)
    y_hat = ugrn_forward(ugrn, x, y_tilde, sigma, None, False).data if ugrn is not None else None
    return y_tilde.data, sigma.data, y_hat


def param_count(pot: PotModel | None = None, ugrn: UgrnModel | None = None) -> dict[str, int]:
    """Trainable scalars per top-level submodule, plus ``total``."""
    counts: dict[str, int] = {}
    for prefix, model in (("pot", pot), ("ugrn", ugrn)):
        if model is None:
            continue
        for name, p in model.named_parameters():
            head = name.split(".")[0]
            key = f"{prefix}.{head}"
            counts[key] = counts.get(key, 0) + p.size
    counts["total"] = sum(counts.values())
    return counts


def build_models(cfg: ModelConfig, seed: int = 0, skeleton: Skeleton | None = None) -> tuple[PotModel, UgrnModel]:
    root = Rng(seed)
    sk = skeleton or default_skeleton(cfg.num_joints)
    return PotModel(cfg, sk, root.split(0)), UgrnModel(cfg, sk, root.split(1))


def with_overrides(cfg: ModelConfig, **kw) -> ModelConfig:
    return replace(cfg, **kw).validate()
