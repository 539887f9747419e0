"""Self-attention variants, the position-wise FFN and the pre-LN encoder layer.

Three attention modes share one code path and differ only in how the
pre-softmax logits are formed:

* ``Standard``           logits = Q K^T / sqrt(d)
* ``PoseOriented``       logits += Phi(hop distance) per head
* ``UncertaintyGuided``  logits column j divided by max(sum(sigma_j), eps_u)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteInput, ShapeMismatch
from .modules import LayerNorm, Linear, Module
from .numerics import (
    Rng,
    Tensor,
    add,
    clamp_min,
    div,
    dropout,
    gelu,
    matmul,
    mul,
    reshape,
    softmax_lastdim,
    sum as tsum,
    swap_last,
    take_rows,
    transpose,
)

UG_EPS = 1e-3
BIAS_HIDDEN = 16
ATTENTION_KINDS = ("mhsa", "posa", "ugsa")


class AttentionParams(Module):
    def __init__(self, dim: int, num_heads: int, rng: Rng):
        if dim % num_heads:
            raise ShapeMismatch(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)


class DistanceBiasNet(Module):
    """Maps a scalar hop distance to one bias per head (1 -> 16 -> H, GELU)."""

    def __init__(self, num_heads: int, rng: Rng, hidden: int = BIAS_HIDDEN):
        self.fc1 = Linear(1, hidden, rng)
        self.fc2 = Linear(hidden, num_heads, rng)

    def __call__(self, d: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(d)))


class FfnParams(Module):
    def __init__(self, dim: int, ratio: float, rng: Rng):
        hidden = int(math.floor(ratio * dim))
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def branch(self, z: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(z)))


@dataclass(frozen=True)
class Standard:
    pass


@dataclass(frozen=True)
class PoseOriented:
    dist: np.ndarray
    net: DistanceBiasNet


@dataclass(frozen=True)
class UncertaintyGuided:
    sigma: Tensor
    eps: float = UG_EPS


def po_bias_table(d: np.ndarray, net: DistanceBiasNet) -> Tensor:
    """H x J x J table with ``table[h, i, j] = Phi(d[i, j])[h]``.

    Phi is evaluated once per distinct distance and gathered, so gradients
    reach the net through every pair that uses a given distance.
    """
    d = np.asarray(d)
    uniq, inv = np.unique(d, return_inverse=True)
    per_dist = net(Tensor(uniq.reshape(-1, 1).astype(float), dtype=net.fc1.weight.dtype))
    j = d.shape[0]
    table = reshape(take_rows(per_dist, inv.reshape(-1)), (j, j, -1))
    return transpose(table, (2, 0, 1))


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    *lead, j, c = x.shape
    x = reshape(x, (*lead, j, num_heads, c // num_heads))
    n = len(lead)
    return transpose(x, (*range(n), n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, j, d = x.shape
    n = len(lead)
    x = transpose(x, (*range(n), n + 1, n, n + 2))
    return reshape(x, (*lead, j, h * d))


def attention_logits(z: Tensor, p: AttentionParams, mode) -> tuple[Tensor, Tensor]:
    """Pre-softmax logits (..., H, J, J) and per-head values (..., H, J, d)."""
    q = _split_heads(p.q(z), p.num_heads)
    k = _split_heads(p.k(z), p.num_heads)
    v = _split_heads(p.v(z), p.num_heads)
    scores = mul(matmul(q, swap_last(k)), 1.0 / math.sqrt(p.head_dim))
    j = z.shape[-2]
    if isinstance(mode, PoseOriented):
        if mode.dist.shape != (j, j):
            raise ShapeMismatch(f"distance matrix {mode.dist.shape} for {j} joints")
        scores = add(scores, po_bias_table(mode.dist, mode.net))
    elif isinstance(mode, UncertaintyGuided):
        sigma = mode.sigma
        if sigma.shape[-2:] != (j, 3):
            raise ShapeMismatch(f"sigma {sigma.shape} for {j} joints")
        denom = clamp_min(tsum(sigma, axis=-1), mode.eps)
        lead = denom.shape[:-1]
        scores = div(scores, reshape(denom, (*lead, 1, 1, j)))
    elif not isinstance(mode, Standard):
        raise TypeError(f"unknown attention mode {mode!r}")
    return scores, v


def attend(
    z: Tensor,
    p: AttentionParams,
    mode,
    rng: Rng | None = None,
    training: bool = False,
    dropout_rate: float = 0.0,
    return_probs: bool = False,
):
    """Multi-head self-attention over joints, output-projected back to C."""
    if not np.all(np.isfinite(z.data)):
        raise NonFiniteInput("attention input contains NaN or Inf")
    scores, v = attention_logits(z, p, mode)
    probs = softmax_lastdim(scores)
    out = p.o(_merge_heads(matmul(dropout(probs, dropout_rate, rng, training), v)))
    return (out, probs) if return_probs else out


def ffn(z: Tensor, p: FfnParams) -> Tensor:
    """Position-wise FFN with its own residual: MLP(GELU(MLP(z))) + z."""
    return add(p.branch(z), z)


class EncoderLayer(Module):
    """Pre-LN transformer layer; one residual per sublayer."""

    def __init__(self, dim: int, num_heads: int, kind: str, rng: Rng, ffn_ratio: float = 1.5, dropout: float = 0.0):
        if kind not in ATTENTION_KINDS:
            raise ValueError(f"attention kind must be one of {ATTENTION_KINDS}")
        self.kind = kind
        self.dropout = dropout
        self.ln1 = LayerNorm(dim)
        self.attn = AttentionParams(dim, num_heads, rng)
        if kind == "posa":
            self.bias_net = DistanceBiasNet(num_heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ffn = FfnParams(dim, ffn_ratio, rng)

    def mode(self, dist: np.ndarray | None = None, sigma: Tensor | None = None):
        if self.kind == "posa":
            return PoseOriented(dist, self.bias_net)
        if self.kind == "ugsa":
            return UncertaintyGuided(sigma)
        return Standard()

    def __call__(
        self,
        z: Tensor,
        rng: Rng | None = None,
        training: bool = False,
        dist: np.ndarray | None = None,
        sigma: Tensor | None = None,
    ) -> Tensor:
        return encoder_layer(z, self, self.mode(dist, sigma), rng, training)


def encoder_layer(z: Tensor, layer: EncoderLayer, mode, rng: Rng | None, training: bool) -> Tensor:
    rate = layer.dropout
    h = attend(layer.ln1(z), layer.attn, mode, rng, training, rate)
    z = add(z, dropout(h, rate, rng, training))
    h = layer.ffn.branch(layer.ln2(z))
    return add(z, dropout(h, rate, rng, training))
