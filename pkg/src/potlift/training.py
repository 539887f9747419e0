"""Losses, uncertainty-guided sampling, Adam with max-norm, and the two training stages."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, EmptyDataset, NonPositiveSigma, ShapeMismatch
from .metrics import mpjpe
from .model import PotModel, UgrnModel, pot_forward, ugrn_forward, uncertainty
from .numerics import (
    Rng,
    Tape,
    Tensor,
    add,
    as_tensor,
    clamp_min,
    div,
    log,
    mean,
    mul,
    square,
    sub,
    sum as tsum,
)

logger = logging.getLogger(__name__)

SIGMA_MIN = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    decay: float = 0.96
    decay_every: int = 4
    epochs_per_stage: int = 25
    batch_size: int = 256
    lam: float = 1e-3
    maxnorm_cap: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    sigma_min: float = SIGMA_MIN
    max_steps_per_stage: int | None = None
    ug_sampling: bool = True
    checkpoint_every: int = 1
    loss_unit_mm: float = 1000.0
    # When False the sampler sees a detached sigma, so the uncertainty head is
    # shaped by the sigma loss and UG-SA only, not by "less noise helps refining".
    sigma_grad_via_sample: bool = False

    def validate(self) -> "TrainConfig":
        positive = (
            "lr0", "decay", "decay_every", "epochs_per_stage", "batch_size",
            "lam", "maxnorm_cap", "adam_eps", "sigma_min", "loss_unit_mm",
        )  # fmt: skip
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must be in [0, 1)")
        if self.max_steps_per_stage is not None and self.max_steps_per_stage < 1:
            raise ConfigError("max_steps_per_stage must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d).validate()


# --------------------------------------------------------------------- losses


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape or a.shape[-1] != 3:
        raise ShapeMismatch(f"pose shapes {a.shape} vs {b.shape}")


def stage1_loss(y_tilde, y) -> Tensor:
    """Mean over joints (and batch) of the squared Euclidean residual."""
    y_tilde, y = as_tensor(y_tilde), as_tensor(y)
    _check_pair(y_tilde, y)
    return mean(tsum(square(sub(y_tilde, y)), axis=-1))


refine_loss = stage1_loss


def sigma_loss(y_tilde, y, sigma, sigma_min: float = SIGMA_MIN) -> Tensor:
    """Heteroscedastic loss ``|r / sigma|^2 + log |sigma|^2`` averaged over joints.

    The residual ``r`` is treated as a constant: only ``sigma`` receives
    gradient. ``sigma`` is floored at ``sigma_min``.
    """
    y_tilde, y, sigma = as_tensor(y_tilde), as_tensor(y), as_tensor(sigma)
    _check_pair(y_tilde, y)
    if sigma.shape != y.shape:
        raise ShapeMismatch(f"sigma {sigma.shape} vs pose {y.shape}")
    if not np.all(sigma.data > 0):
        raise NonPositiveSigma("sigma must be strictly positive")
    resid = Tensor(y_tilde.data - y.data)
    s = clamp_min(sigma, sigma_min)
    per_joint = add(tsum(square(div(resid, s)), axis=-1), log(tsum(square(s), axis=-1)))
    return mean(per_joint)


def stage2_loss(y_hat, y, y_tilde, sigma, lam: float = 1e-3, sigma_min: float = SIGMA_MIN) -> Tensor:
    return add(refine_loss(y_hat, y), mul(sigma_loss(y_tilde, y, sigma, sigma_min), lam))


def ug_sample(y_tilde, sigma, rng: Rng | None, training: bool, sigma_min: float = SIGMA_MIN) -> Tensor:
    """Reparameterized draw ``y_tilde + sigma * eps`` in training; ``y_tilde`` itself in eval."""
    y_tilde, sigma = as_tensor(y_tilde), as_tensor(sigma)
    if y_tilde.shape != sigma.shape:
        raise ShapeMismatch(f"sigma {sigma.shape} vs pose {y_tilde.shape}")
    if not np.all(sigma.data >= 0) or not np.all(np.isfinite(sigma.data)):
        raise NonPositiveSigma("sigma must be finite and non-negative")
    if not training:
        return y_tilde
    eps = Tensor(rng.normal(sigma.shape), dtype=sigma.dtype)
    return add(y_tilde, mul(clamp_min(sigma, sigma_min), eps))


# ------------------------------------------------------------------ optimizer


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.decay ** (epoch // cfg.decay_every)


def _is_constrained(name: str, p: Tensor) -> bool:
    return p.ndim == 2 and name.rsplit(".", 1)[-1] == "weight"


@dataclass
class OptimizerState:
    names: list[str]
    m: list[np.ndarray]
    v: list[np.ndarray]
    constrained: list[bool]
    step: int = 0

    @classmethod
    def create(cls, named: Sequence[tuple[str, Tensor]]) -> "OptimizerState":
        return cls(
            names=[n for n, _ in named],
            m=[np.zeros_like(p.data) for _, p in named],
            v=[np.zeros_like(p.data) for _, p in named],
            constrained=[_is_constrained(n, p) for n, p in named],
        )


def max_norm_(w: np.ndarray, cap: float) -> None:
    """Rescale in place every row whose L2 norm exceeds ``cap``."""
    norms = np.sqrt((w * w).sum(axis=1))
    over = norms > cap
    if np.any(over):
        w[over] *= (cap / norms[over])[:, None]


def adam_step(
    params: Sequence[Tensor],
    grads: dict[Tensor, np.ndarray] | Sequence[np.ndarray | None],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig = TrainConfig(),
) -> None:
    """Bias-corrected Adam update in place, then max-norm on weight-matrix rows.

    Parameters without a gradient are skipped entirely.
    """
    if len(params) != len(state.names):
        raise ShapeMismatch("parameter list does not match optimizer state")
    if isinstance(grads, dict):
        grads = [grads.get(p) for p in params]
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient {g.shape} for parameter {p.shape}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if state.constrained[i]:
            max_norm_(p.data, cfg.maxnorm_cap)


# --------------------------------------------------------------------- driver


@dataclass
class LogRow:
    epoch: int
    step: int
    stage: int
    lr: float
    loss: float
    mpjpe: float

    def csv(self) -> str:
        return f"{self.epoch},{self.step},{self.stage},{self.lr!r},{self.loss!r},{self.mpjpe!r}"


LOG_HEADER = "epoch,step,stage,lr,loss,mpjpe"


@dataclass
class StageResult:
    rows: list[LogRow] = field(default_factory=list)
    epochs_done: int = 0
    steps_done: int = 0
    opt_state: OptimizerState | None = None
    rng: Rng | None = None

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.rows]


def _batches(n: int, batch_size: int, rng: Rng) -> Iterator[np.ndarray]:
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def stage_rng(cfg: TrainConfig, stage: int) -> Rng:
    return Rng(cfg.seed).split(100 + stage)


def _run_stage(
    stage: int,
    named: list[tuple[str, Tensor]],
    step_fn: Callable[[np.ndarray, np.ndarray, Rng], tuple[Tensor, Tensor]],
    x: np.ndarray,
    y: np.ndarray,
    unit_mm: float,
    cfg: TrainConfig,
    *,
    start_epoch: int = 0,
    start_step: int = 0,
    opt_state: OptimizerState | None = None,
    rng: Rng | None = None,
    on_row: Callable[[LogRow], None] | None = None,
    on_epoch_end: Callable[[int, StageResult], None] | None = None,
) -> StageResult:
    n = len(x)
    if n == 0:
        raise EmptyDataset("training set is empty")
    cfg.validate()
    params = [p for _, p in named]
    res = StageResult(
        epochs_done=start_epoch,
        steps_done=start_step,
        opt_state=opt_state or OptimizerState.create(named),
        rng=rng or stage_rng(cfg, stage),
    )
    max_steps = cfg.max_steps_per_stage
    y_model = y / unit_mm
    for epoch in range(start_epoch, cfg.epochs_per_stage if max_steps is None else 1 << 62):
        if max_steps is not None and res.steps_done >= max_steps:
            break
        lr = lr_at(epoch, cfg)
        for idx in _batches(n, cfg.batch_size, res.rng):
            if max_steps is not None and res.steps_done >= max_steps:
                break
            with Tape() as tape:
                loss, pred = step_fn(x[idx], y_model[idx], res.rng)
            grads = tape.backward(loss)
            adam_step(params, grads, res.opt_state, lr, cfg)
            res.steps_done += 1
            row = LogRow(epoch, res.steps_done, stage, lr, loss.item(), mpjpe(pred.data * unit_mm, y[idx]))
            res.rows.append(row)
            if on_row:
                on_row(row)
        res.epochs_done = epoch + 1
        logger.info("stage %d epoch %d loss %.6g", stage, epoch, res.rows[-1].loss if res.rows else float("nan"))
        if on_epoch_end:
            on_epoch_end(epoch + 1, res)
    return res


def train_stage1(pot: PotModel, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, **kw) -> StageResult:
    """Fit the pose-oriented transformer on the first-stage L2 loss (targets in mm)."""
    named = pot.encoder_parameters()
    g = pot.cfg.unit_mm / cfg.loss_unit_mm

    def step(xb, yb, rng):
        _, y_tilde = pot_forward(pot, xb, rng, True)
        return stage1_loss(mul(y_tilde, g), yb * g), y_tilde

    return _run_stage(1, named, step, x, y, pot.cfg.unit_mm, cfg, **kw)


def train_stage2(pot: PotModel, ugrn: UgrnModel, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, **kw) -> StageResult:
    """Freeze POT, train the refiner plus the uncertainty head on refine + lam * sigma loss.

    The frozen POT runs in eval mode every step, so its features and Y~ are
    deterministic and carry no tape records.
    """
    frozen = pot.encoder_parameters()
    named = [(f"pot.{n}", p) for n, p in pot.uncertainty_head.named_parameters("uncertainty_head.")]
    named += [(f"ugrn.{n}", p) for n, p in ugrn.named_parameters()]
    saved = [p.requires_grad for _, p in frozen]
    g = pot.cfg.unit_mm / cfg.loss_unit_mm

    def step(xb, yb, rng):
        z, y_tilde = pot_forward(pot, xb, None, False)
        sigma = uncertainty(pot, z)
        s_draw = sigma if cfg.sigma_grad_via_sample else Tensor(sigma.data)
        y_bar = ug_sample(y_tilde, s_draw, rng, cfg.ug_sampling, cfg.sigma_min)
        y_hat = ugrn_forward(ugrn, xb, y_bar, sigma, rng, True)
        loss = stage2_loss(mul(y_hat, g), yb * g, mul(y_tilde, g), mul(sigma, g), cfg.lam, cfg.sigma_min * g)
        return loss, y_hat

    for _, p in frozen:
        p.requires_grad = False
    try:
        return _run_stage(2, named, step, x, y, pot.cfg.unit_mm, cfg, **kw)
    finally:
        for (_, p), flag in zip(frozen, saved):
            p.requires_grad = flag
