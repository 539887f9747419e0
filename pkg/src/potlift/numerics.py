"""Dense tensors with tape-based reverse-mode differentiation, plus a seeded RNG.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Outside a tape every op is a plain
numpy computation, which is how inference and frozen sub-networks run.

    with Tape() as tape:
        loss = mean(square(matmul(x, w)))
    grads = tape.backward(loss)   # {w: ndarray}
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Sequence

import numpy as np

from ._accel import kernels
from .errors import NonFiniteInput, NonScalarLoss, ShapeMismatch, TapeConsumed

_DEFAULT_DTYPE = np.float32 if os.environ.get("POTLIFT_FAST", "") in ("1", "true") else np.float64


def default_dtype() -> np.dtype:
    return np.dtype(_DEFAULT_DTYPE)


def set_default_dtype(dtype) -> None:
    """Switch between double (verification) and single (fast) precision."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}")
    _DEFAULT_DTYPE = dt.type


# --------------------------------------------------------------------- Tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_recorded", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._recorded = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._recorded

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ----------------------------------------------------------------------- Tape


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive ops; single use.

    Nodes are appended in execution order, which is a topological order of
    the graph, so the backward sweep is a plain reverse iteration.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeConsumed("tape already used; record a fresh forward pass")
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Return ``{leaf: gradient}`` for every leaf that influenced ``loss``.

        Leaf ``.grad`` attributes are overwritten. The tape is cleared and
        cannot be replayed.
        """
        if self._consumed:
            raise TapeConsumed("backward already called on this tape")
        if loss.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        self._consumed = True
        leaves: dict[Tensor, np.ndarray] = {}
        if not loss._recorded:
            self._nodes.clear()
            return leaves
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.shape)
                if parent._recorded:
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg
                else:
                    leaves[parent] = leaves[parent] + pg if parent in leaves else pg
        self._nodes.clear()
        for leaf, g in leaves.items():
            leaf.grad = g
        return leaves


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], bwd: Callable) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._recorded = True
        _TAPES[-1]._nodes.append(_Node(out, tuple(parents), bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc
    return a, b


# ----------------------------------------------------------- elementwise ops


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, (a, b), lambda g: (g / bd, -g * out / bd))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) with zero gradient where the floor is active."""
    ad = a.data
    keep = ad > floor
    return _record(np.where(keep, ad, floor).astype(ad.dtype), (a,), lambda g: (g * keep,))


def gelu(a: Tensor) -> Tensor:
    """Exact erf-based GELU."""
    ad = a.data
    return _record(kernels.gelu(ad), (a,), lambda g: (g * kernels.gelu_grad(ad),))


# --------------------------------------------------------- structural ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}") from exc
    return _record(
        out,
        (a, b),
        lambda g: (np.matmul(g, np.swapaxes(bd, -1, -2)), np.matmul(np.swapaxes(ad, -1, -2), g)),
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[1]:
        raise ShapeMismatch(f"linear input {x.shape} vs weight {weight.shape}")
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bwd(g):
        g2 = g.reshape(-1, wd.shape[0])
        gw = g2.T @ xd.reshape(-1, wd.shape[1])
        gb = g2.sum(axis=0) if bias is not None else None
        return (g @ wd, gw, gb)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, parents, bwd)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _record(out, (a,), lambda g: (g.reshape(src),))


def concat_last_dim(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    lead = parts[0].shape[:-1]
    if any(p.shape[:-1] != lead for p in parts):
        raise ShapeMismatch("concat_last_dim needs matching leading shapes")
    splits = np.cumsum([p.shape[-1] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=-1)
    return _record(out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=-1)))


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``table[index]`` along axis 0; repeated indices accumulate."""
    index = np.asarray(index, dtype=np.int64)
    shape = table.shape

    def bwd(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return _record(table.data[index], (table,), bwd)


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bwd)


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------ fused kernels


def softmax_lastdim(a: Tensor) -> Tensor:
    ad = a.data
    if not np.all(np.isfinite(ad)):
        raise NonFiniteInput("softmax input contains NaN or Inf")
    shape = ad.shape
    y = kernels.softmax_rows(np.ascontiguousarray(ad.reshape(-1, shape[-1]))).reshape(shape)

    def bwd(g):
        gy = np.ascontiguousarray(g.reshape(-1, shape[-1]))
        return (kernels.softmax_rows_backward(y.reshape(-1, shape[-1]), gy).reshape(shape),)

    return _record(y, (a,), bwd)


def layernorm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last dimension, then apply ``gamma``/``beta``."""
    shape = a.shape
    c = shape[-1]
    xhat, rstd = kernels.layernorm_rows(np.ascontiguousarray(a.data.reshape(-1, c)), eps)
    gd = gamma.data
    out = (xhat * gd + beta.data).reshape(shape)

    def bwd(g):
        g2 = g.reshape(-1, c)
        ggamma = (g2 * xhat).sum(axis=0)
        gbeta = g2.sum(axis=0)
        gx = kernels.layernorm_rows_backward(np.ascontiguousarray(g2 * gd), xhat, rstd)
        return (gx.reshape(shape), ggamma, gbeta)

    return _record(out, (a, gamma, beta), bwd)


def dropout(a: Tensor, rate: float, rng: "Rng | None", training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    keep = rng.uniform(a.shape) >= rate
    scale = (keep / (1.0 - rate)).astype(a.dtype)
    return _record(a.data * scale, (a,), lambda g: (g * scale,))


# ------------------------------------------------------------------------ RNG


_TWO_PI = 2.0 * np.pi
_MASK64 = (1 << 64) - 1


class Rng:
    """Philox-4x64-10 counter-based stream keyed directly by a 64-bit seed.

    Uniforms take the top 53 bits of each raw 64-bit output times 2**-53,
    giving values in [0, 1). Normals use the Box-Muller transform on pairs
    of uniforms ``(u1, u2)``: ``r = sqrt(-2 ln(1 - u1))``, emitting
    ``r cos(2 pi u2)`` then ``r sin(2 pi u2)``. Philox and these transforms
    are integer/IEEE exact, so a seed yields the same stream everywhere.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._bg = np.random.Philox(key=self.seed)

    def raw(self, n: int) -> np.ndarray:
        return self._bg.random_raw(n)

    def uniform(self, shape) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        return ((self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53).reshape(shape)

    def normal(self, shape) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = _TWO_PI * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return z.reshape(-1)[:n].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def split(self, index: int) -> "Rng":
        """Independent child stream, a pure function of (seed, index)."""
        key = np.random.SeedSequence([self.seed, int(index)]).generate_state(1, np.uint64)[0]
        return Rng(int(key))

    def get_state(self) -> dict:
        st = self._bg.state
        return {
            "seed": self.seed,
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self._bg.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"])
        rng.set_state(state)
        return rng


def gaussian(rng: Rng, shape, dtype=None) -> Tensor:
    return Tensor(rng.normal(shape), dtype=dtype or _DEFAULT_DTYPE)


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
