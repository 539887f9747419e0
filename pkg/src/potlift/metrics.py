"""MPJPE, 3D-PCK, AUC and per-group error, all after root (pelvis) alignment."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch

PCK_THRESHOLD_MM = 150.0
AUC_THRESHOLDS_MM = np.arange(5.0, 150.0 + 1e-9, 5.0)


def _aligned_errors(pred, gt, root: int = 0) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    pred = pred - pred[:, root : root + 1]
    gt = gt - gt[:, root : root + 1]
    return np.linalg.norm(pred - gt, axis=-1)


def joint_errors(pred, gt, root: int = 0) -> np.ndarray:
    """N x J Euclidean errors after root alignment."""
    return _aligned_errors(pred, gt, root)


def mpjpe(pred, gt, root: int = 0) -> float:
    return float(_aligned_errors(pred, gt, root).mean())


def pck(pred, gt, threshold_mm: float = PCK_THRESHOLD_MM, root: int = 0) -> float:
    """Percentage of (sample, joint) pairs with error strictly below the threshold."""
    return float(100.0 * (_aligned_errors(pred, gt, root) < threshold_mm).mean())


def auc(pred, gt, root: int = 0, thresholds=AUC_THRESHOLDS_MM) -> float:
    err = _aligned_errors(pred, gt, root)
    return float(np.mean([(err < t).mean() for t in thresholds]))


def per_group_error(pred, gt, groups, num_groups: int | None = None, root: int = 0) -> np.ndarray:
    """Mean aligned error of the joints in each group; NaN for empty groups."""
    err = _aligned_errors(pred, gt, root)
    groups = np.asarray(groups)
    if groups.shape != (err.shape[1],):
        raise ShapeMismatch(f"groups {groups.shape} for {err.shape[1]} joints")
    g = int(groups.max()) + 1 if num_groups is None else num_groups
    out = np.full(g, np.nan)
    for k in range(g):
        mask = groups == k
        if mask.any():
            out[k] = err[:, mask].mean()
    return out


@dataclass
class EvalReport:
    mpjpe_mm: float
    pck: float
    auc: float
    per_joint_mm: list[float]
    per_group_mm: list[float]

    @classmethod
    def compute(cls, pred, gt, groups, num_groups: int | None = None, root: int = 0) -> "EvalReport":
        err = _aligned_errors(pred, gt, root)
        return cls(
            mpjpe_mm=float(err.mean()),
            pck=pck(pred, gt, root=root),
            auc=auc(pred, gt, root=root),
            per_joint_mm=[float(v) for v in err.mean(axis=0)],
            per_group_mm=[float(v) for v in per_group_error(pred, gt, groups, num_groups, root)],
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def write(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(self.to_json() + "\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["group", "mpjpe_mm"])
                for k, v in enumerate(self.per_group_mm):
                    w.writerow([k, repr(v)])
