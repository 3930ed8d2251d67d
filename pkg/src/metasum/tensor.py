"""Minimal dense-tensor arithmetic with reverse-mode automatic differentiation.

Tensors wrap 64-bit numpy arrays. Operations optionally record onto an
explicit ComputationTape (activated as a context manager); backward() replays
the tape in reverse, accumulating gradients additively so shared
subexpressions are handled correctly. Everything is deterministic: no op
consumes random state.

The op set is exactly what a small encoder-decoder transformer needs - 2-D
matmul, row-broadcast adds, gelu, layer norm, masked row softmax, embedding
lookup, slicing/concatenation and padded cross entropy. No general
broadcasting, which keeps every backward rule short enough to audit.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DegenerateRowError(ValueError):
    """A softmax row had every entry masked out."""


class EmptyLossError(ValueError):
    """Cross entropy was asked to average over zero non-pad positions."""


class NonScalarRootError(ValueError):
    """backward() requires a scalar (single-element) root tensor."""


_tensor_ids = itertools.count()


class Tensor:
    """A dense float64 array plus an optional accumulated gradient.

    ``tid`` is a monotonically increasing creation id; tape entries always
    reference input tensors with smaller tids than their output, which is the
    topological-order invariant backward() relies on.
    """

    __slots__ = ("data", "grad", "tid")

    def __init__(self, data) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.tid = next(_tensor_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tid={self.tid})"


class TapeEntry:
    """One recorded op: kind, inputs, output and its backward rule.

    ``backward`` maps the output gradient to one gradient (or None) per
    input, in input order.
    """

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple, output: Tensor,
                 backward: Callable[[np.ndarray], tuple]) -> None:
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class ComputationTape:
    """Ordered record of operations; a context manager that activates itself.

    While active, every op in this module appends an entry. Ops executed with
    no active tape run forward-only (no recording), which is how inference
    and finite-difference probes stay cheap.
    """

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []

    def record(self, op: str, inputs: tuple, output: Tensor,
               backward: Callable[[np.ndarray], tuple]) -> None:
        self.entries.append(TapeEntry(op, inputs, output, backward))

    def __enter__(self) -> "ComputationTape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.pop()

    def __len__(self) -> int:
        return len(self.entries)


_active: list[ComputationTape] = []


def _record(op: str, inputs: tuple, output: Tensor,
            backward: Callable[[np.ndarray], tuple]) -> None:
    if _active:
        _active[-1].record(op, inputs, output, backward)


def backward(tape: ComputationTape, root: Tensor) -> None:
    """Accumulate gradients of a scalar ``root`` into every tensor on the tape.

    Entries are visited exactly once, in reverse order. Because the tape is
    topologically ordered, all consumers of a tensor run before its producer,
    so gradient contributions from shared subexpressions sum correctly.
    """
    if root.data.size != 1:
        raise NonScalarRootError(
            f"backward root must be scalar, got shape {root.shape}")
    root.accumulate_grad(np.ones_like(root.data))
    for entry in reversed(tape.entries):
        out_grad = entry.output.grad
        if out_grad is None:
            continue
        grads = entry.backward(out_grad)
        for tensor, g in zip(entry.inputs, grads):
            if g is not None:
                tensor.accumulate_grad(g)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D matrix product. dA = dC @ B^T, dB = A^T @ dC."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    a_data, b_data = a.data, b.data

    def bwd(g):
        return g @ b_data.T, a_data.T @ g

    _record("matmul", (a, b), out, bwd)
    return out


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    out = Tensor(x.data.T.copy())
    _record("transpose", (x,), out, lambda g: (g.T,))
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    _record("add", (a, b), out, lambda g: (g, g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    a_data, b_data = a.data, b.data
    _record("mul", (a, b), out, lambda g: (g * b_data, g * a_data))
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)
    _record("scale", (x,), out, lambda g: (g * c,))
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast add: x[n,d] + b where b is shape (d,) or (1,d)."""
    if x.data.ndim != 2 or b.data.shape[-1] != x.shape[1]:
        raise ShapeError(f"add_bias shapes incompatible: {x.shape} + {b.shape}")
    if b.data.ndim not in (1, 2) or (b.data.ndim == 2 and b.data.shape[0] != 1):
        raise ShapeError(f"bias must be (d,) or (1,d), got {b.shape}")
    out = Tensor(x.data + b.data)
    keepdims = b.data.ndim == 2
    _record("add_bias", (x, b), out,
            lambda g: (g, g.sum(axis=0, keepdims=keepdims)))
    return out


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated gelu; smooth, so finite-difference checks are clean."""
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    out = Tensor(0.5 * x.data * (1.0 + t))
    x_data = x.data

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x_data ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * x_data * (1.0 - t * t) * du
        return (g * local,)

    _record("gelu", (x,), out, bwd)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to mean 0 / variance 1, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")
    d = x.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = Tensor(xhat * gain.data + bias.data)
    g_data = gain.data

    def bwd(g):
        # d/dx of (x - mean)/sqrt(var + eps): the usual three-term rule
        gy = g * g_data
        m1 = gy.mean(axis=-1, keepdims=True)
        m2 = (gy * xhat).mean(axis=-1, keepdims=True)
        dx = (gy - m1 - xhat * m2) * inv
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        return dx, dgain, dbias

    _record("layer_norm", (x, gain, bias), out, bwd)
    return out


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row softmax with optional boolean keep-mask; masked entries are exactly 0.

    Stabilized by subtracting the per-row max over unmasked entries. A fully
    masked row has no valid distribution and raises DegenerateRowError.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {x.shape}")
    if mask is not None:
        if isinstance(mask, Tensor):
            mask = mask.data
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.data.shape:
            raise ShapeError(f"mask shape {mask.shape} != input {x.shape}")
        if not mask.any(axis=1).all():
            bad = int(np.flatnonzero(~mask.any(axis=1))[0])
            raise DegenerateRowError(f"softmax row {bad} is fully masked")
        z = np.where(mask, x.data, -np.inf)
    else:
        z = x.data
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p)

    def bwd(g):
        # dS = P * (g - sum(g * P)); masked entries have P == 0, so they
        # contribute nothing and receive nothing.
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    _record("softmax_rows", (x,), out, bwd)
    return out


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table``; backward scatter-adds into the table grad."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-D, got shape {idx.shape}")
    n_rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ValueError(
            f"embedding id out of range [0, {n_rows}): "
            f"min={idx.min() if idx.size else None}, max={idx.max() if idx.size else None}")
    out = Tensor(table.data[idx])

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return (dt,)

    _record("embedding", (table,), out, bwd)
    return out


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(x.data[start:stop].copy())
    shape = x.data.shape

    def bwd(g):
        dx = np.zeros(shape)
        dx[start:stop] = g
        return (dx,)

    _record("slice_rows", (x,), out, bwd)
    return out


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"slice_cols expects a matrix, got {x.shape}")
    out = Tensor(x.data[:, start:stop].copy())
    shape = x.data.shape

    def bwd(g):
        dx = np.zeros(shape)
        dx[:, start:stop] = g
        return (dx,)

    _record("slice_cols", (x,), out, bwd)
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts or any(p.data.ndim != 2 for p in parts):
        raise ShapeError("concat_cols needs >= 1 matrix inputs")
    widths = [p.shape[1] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    edges = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(widths)))

    _record("concat_cols", tuple(parts), out, bwd)
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows needs >= 1 inputs")
    heights = [p.shape[0] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    edges = np.cumsum([0] + heights)

    def bwd(g):
        return tuple(g[edges[i]:edges[i + 1]] for i in range(len(heights)))

    _record("concat_rows", tuple(parts), out, bwd)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum()))
    shape = x.data.shape
    _record("sum_all", (x,), out, lambda g: (np.broadcast_to(g, shape) * 1.0,))
    return out


def cross_entropy(logits: Tensor, targets: Sequence[int], pad_id: int) -> Tensor:
    """Mean negative log-likelihood over non-pad positions.

    logits is [n, v]; pad positions contribute nothing to loss or gradient.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy logits must be [n, v], got {logits.shape}")
    tgt = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if tgt.shape != (n,):
        raise ShapeError(f"targets shape {tgt.shape} != ({n},)")
    keep = tgt != pad_id
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise EmptyLossError("all target positions are padding")
    if tgt[keep].min() < 0 or tgt[keep].max() >= v:
        raise ValueError(f"target id outside [0, {v})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp_tgt = z[np.arange(n), np.clip(tgt, 0, v - 1)] - lse
    loss = -(logp_tgt[keep].mean())
    out = Tensor(np.asarray(loss))

    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)

    def bwd(g):
        d = probs.copy()
        d[np.arange(n), np.clip(tgt, 0, v - 1)] -= 1.0
        d[~keep] = 0.0
        return (d * (float(g) / n_keep),)

    _record("cross_entropy", (logits,), out, bwd)
    return out
