"""Checkpoints: a JSON manifest plus a flat little-endian blob.

``<stem>.json`` declares the tensors in blob order as ``{name, shape, offset}``
(offset counted in scalars); ``<stem>.bin`` holds the raw values. Optimizer
moments are stored as ordinary tensors under ``opt.m.*`` / ``opt.v.*``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointMismatch
from .model import ModelConfig, PotModel, UgrnModel
from .numerics import Rng
from .skeleton import build_skeleton
from .training import OptimizerState

FORMAT = "potlift-checkpoint-v1"


def model_state(pot: PotModel, ugrn: UgrnModel) -> dict[str, np.ndarray]:
    out = {f"pot.{n}": p.data for n, p in pot.named_parameters()}
    out.update({f"ugrn.{n}": p.data for n, p in ugrn.named_parameters()})
    return out


def state_hash(arrays: dict[str, np.ndarray], prefix: str = "") -> str:
    """SHA-256 over names and raw bytes of the selected tensors."""
    h = hashlib.sha256()
    for name, arr in arrays.items():
        if name.startswith(prefix):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def pot_encoder_hash(pot: PotModel) -> str:
    return state_hash({n: p.data for n, p in pot.encoder_parameters()})


def module_hash(module) -> str:
    return state_hash({n: p.data for n, p in module.named_parameters()})


@dataclass
class Checkpoint:
    manifest: dict
    arrays: dict[str, np.ndarray]

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.manifest["config"]["model"])

    def skeleton(self):
        sk = self.manifest["skeleton"]
        return build_skeleton(sk["num_joints"], sk["edges"], sk["root"])

    def build_models(self) -> tuple[PotModel, UgrnModel]:
        cfg = self.model_config
        sk = self.skeleton()
        pot, ugrn = PotModel(cfg, sk), UgrnModel(cfg, sk)
        for prefix, model in (("pot.", pot), ("ugrn.", ugrn)):
            for name, p in model.named_parameters():
                arr = self.arrays.get(prefix + name)
                if arr is None or arr.shape != p.shape:
                    raise CheckpointMismatch(f"checkpoint lacks a matching tensor for {prefix}{name}")
                p.data[...] = arr
        return pot, ugrn

    def optimizer_state(self) -> OptimizerState | None:
        opt = self.manifest.get("optimizer")
        if not opt:
            return None
        names = opt["names"]
        return OptimizerState(
            names=list(names),
            m=[self.arrays[f"opt.m.{n}"].copy() for n in names],
            v=[self.arrays[f"opt.v.{n}"].copy() for n in names],
            constrained=list(opt["constrained"]),
            step=int(opt["step"]),
        )

    def rng(self) -> Rng | None:
        st = self.manifest.get("rng_state")
        return Rng.from_state(st) if st else None

    def check_config(self, cfg: ModelConfig) -> None:
        if cfg.digest() != self.manifest["config_hash"]:
            raise CheckpointMismatch(
                f"model config hash {cfg.digest()} differs from checkpoint {self.manifest['config_hash']}"
            )


def save_checkpoint(
    stem: str | Path,
    pot: PotModel,
    ugrn: UgrnModel,
    *,
    train_config: dict | None = None,
    stage: int = 0,
    epoch: int = 0,
    step: int = 0,
    rng: Rng | None = None,
    opt_state: OptimizerState | None = None,
    extra: dict | None = None,
) -> Path:
    stem = Path(stem)
    arrays = model_state(pot, ugrn)
    opt_manifest = None
    if opt_state is not None:
        for n, m, v in zip(opt_state.names, opt_state.m, opt_state.v):
            arrays[f"opt.m.{n}"] = m
            arrays[f"opt.v.{n}"] = v
        opt_manifest = {"names": opt_state.names, "constrained": opt_state.constrained, "step": opt_state.step}
    dtype = np.dtype(pot.keypoint_embed.dtype).newbyteorder("<")
    entries, offset, chunks = [], 0, []
    for name, arr in arrays.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    blob = b"".join(chunks)
    cfg = pot.cfg
    manifest = {
        "format": FORMAT,
        "config": {"model": cfg.to_dict(), "train": train_config},
        "config_hash": cfg.digest(),
        "skeleton": pot.skeleton.to_json(),
        "stage": stage,
        "epoch": epoch,
        "step": step,
        "rng_state": rng.get_state() if rng is not None else None,
        "optimizer": opt_manifest,
        "dtype": dtype.str,
        "blob": stem.name + ".bin",
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "tensors": entries,
        **(extra or {}),
    }
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".bin").write_bytes(blob)
    path = stem.with_suffix(".json")
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointMismatch(f"{path} is not a {FORMAT} manifest")
    blob = (path.parent / manifest["blob"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointMismatch("blob checksum does not match manifest")
    flat = np.frombuffer(blob, dtype=np.dtype(manifest["dtype"]))
    arrays = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = flat[e["offset"] : e["offset"] + n].reshape(e["shape"]).astype(flat.dtype.newbyteorder("="))
    return Checkpoint(manifest, arrays)
