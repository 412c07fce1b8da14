"""Dense f32 tensors with tape-based reverse-mode automatic differentiation.

Every operation records its inputs and a backward closure on the output
tensor; ``Tensor.backward()`` traces the graph into a topologically ordered
tape and replays it in reverse, accumulating gradients into ``.grad``.
Forward outputs are checked for NaN/Inf: overflow raises instead of
propagating silently. All reductions use numpy's sequential order, so
gradients are bit-reproducible run to run.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import (
    DimensionError,
    EmptyMaskError,
    NumericError,
    RankError,
    VocabError,
)

DTYPE = np.float32

# Toggled off only by benchmarks; tests rely on the checks being on.
FINITE_CHECKS = True


def _check_finite(arr: np.ndarray, op: str) -> None:
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """A dense float array plus optional gradient, node in the autograd graph.

    Leaf tensors are created directly; op outputs carry ``_parents`` and a
    ``_backward`` closure that adds into the parents' ``.grad``. dtype is
    float32 in the production path; float64 is allowed so finite-difference
    oracles can run the same kernels at higher precision.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=DTYPE):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...],
                 backward: Callable[[np.ndarray], None], op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``.grad`` on every reachable tensor with requires_grad."""
        if self.data.shape != ():
            raise RankError(
                f"backward requires a scalar loss, got shape {self.data.shape}")
        Graph.trace(self).run_backward()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _accum(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad``, allocating zeros on first touch."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


class Graph:
    """Topologically ordered tape of recorded operations.

    ``nodes`` lists every tensor reachable from the root with inputs before
    users; the reverse sweep therefore visits each node exactly once with its
    output gradient fully accumulated.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def run_backward(self) -> None:
        root = self.nodes[-1]
        _accum(root, np.ones_like(root.data))
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


# ---------------------------------------------------------------------------
# Elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add: shapes {a.data.shape} != {b.data.shape}")
    with np.errstate(over="ignore"):
        out_data = a.data + b.data

    def backward(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, g)

    return Tensor._from_op(out_data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul: shapes {a.data.shape} != {b.data.shape}")
    with np.errstate(over="ignore"):
        out_data = a.data * b.data

    def backward(g: np.ndarray) -> None:
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return Tensor._from_op(out_data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant (no gradient for ``c``)."""
    out_data = a.data * a.data.dtype.type(c)

    def backward(g: np.ndarray) -> None:
        _accum(a, g * a.data.dtype.type(c))

    return Tensor._from_op(out_data, (a,), backward, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with dA = g.Bᵀ, dB = Aᵀ.g.

    Forward uses einsum, whose per-row accumulation order is independent of
    the number of rows; BLAS blocks by shape, which would break the bitwise
    prefix-stability the causal decoder guarantees. Backward keeps BLAS.
    """
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul requires 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: inner dims {a.data.shape} x {b.data.shape}")
    out_data = np.einsum("ij,jk->ik", a.data, b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return Tensor._from_op(out_data, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose requires 2-D, got {a.data.shape}")
    out_data = np.ascontiguousarray(a.data.T)

    def backward(g: np.ndarray) -> None:
        _accum(a, g.T)

    return Tensor._from_op(out_data, (a,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat of empty sequence")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray) -> None:
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accum(t, piece)

    return Tensor._from_op(out_data, tuple(tensors), backward, "concat")


def sum_all(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(g: np.ndarray) -> None:
        _accum(a, np.full_like(a.data, g))

    return Tensor._from_op(out_data, (a,), backward, "sum")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: ids (length T) -> [T, d]. Gradient scatter-adds by id."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError(f"embedding ids must be 1-D, got {ids.shape}")
    vocab = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise VocabError(f"token id out of range [0, {vocab})")
    out_data = table.data[ids]

    def backward(g: np.ndarray) -> None:
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return Tensor._from_op(out_data, (table,), backward, "embedding")


def index_rows(x: Tensor, idx) -> Tensor:
    """Gather rows x[idx]; backward scatter-adds into the source rows."""
    idx = np.asarray(idx, dtype=np.int64)
    out_data = x.data[idx]

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, idx, g)

    return Tensor._from_op(out_data, (x,), backward, "index_rows")


def scatter_rows(y: Tensor, idx, n_rows: int) -> Tensor:
    """Place rows of y at positions idx in a zero [n_rows, d] tensor.

    idx must be unique (each destination written once).
    """
    idx = np.asarray(idx, dtype=np.int64)
    out_data = np.zeros((n_rows,) + y.data.shape[1:], dtype=y.data.dtype)
    out_data[idx] = y.data

    def backward(g: np.ndarray) -> None:
        _accum(y, g[idx])

    return Tensor._from_op(out_data, (y,), backward, "scatter_rows")


def gather_column(x: Tensor, row_idx, col: int) -> Tensor:
    """Pick x[row_idx, col] as an [n, 1] column tensor."""
    row_idx = np.asarray(row_idx, dtype=np.int64)
    out_data = x.data[row_idx, col][:, None].copy()

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, (row_idx, col), g[:, 0])

    return Tensor._from_op(out_data, (x,), backward, "gather_column")


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each row of x [n, d] by the scalar s[i] from s [n, 1]."""
    if s.data.shape != (x.data.shape[0], 1):
        raise DimensionError(
            f"scale_rows: scales {s.data.shape} vs rows {x.data.shape}")
    out_data = x.data * s.data

    def backward(g: np.ndarray) -> None:
        _accum(x, g * s.data)
        if s.requires_grad:
            _accum(s, (g * x.data).sum(axis=1, keepdims=True))

    return Tensor._from_op(out_data, (x, s), backward, "scale_rows")


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with a caller-supplied generator (training only)."""
    if not 0.0 <= p < 1.0:
        raise DimensionError(f"dropout p must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype)
    factor = x.data.dtype.type(1.0 / (1.0 - p))
    out_data = x.data * keep * factor

    def backward(g: np.ndarray) -> None:
        _accum(x, g * keep * factor)

    return Tensor._from_op(out_data, (x,), backward, "dropout")


# ---------------------------------------------------------------------------
# Activations and normalization


def _sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function (no overflow at either tail)."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: Tensor) -> Tensor:
    sig = _sigmoid(x.data)
    out_data = x.data * sig

    def backward(g: np.ndarray) -> None:
        _accum(x, g * sig * (1.0 + x.data * (1.0 - sig)))

    return Tensor._from_op(out_data, (x,), backward, "silu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GeLU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out_data = (x.data * cdf).astype(x.data.dtype)

    def backward(g: np.ndarray) -> None:
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        _accum(x, g * (cdf + x.data * pdf).astype(x.data.dtype))

    return Tensor._from_op(out_data, (x,), backward, "gelu")


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise RMS normalization with learned gain: y = x / rms(x) * w."""
    if x.data.ndim != 2 or weight.data.shape != (x.data.shape[1],):
        raise DimensionError(
            f"rms_norm: x {x.data.shape} vs weight {weight.data.shape}")
    d = x.data.shape[1]
    # accumulate in f64: squaring near-f32-max activations must not overflow
    x64 = x.data.astype(np.float64)
    ms = (x64 * x64).mean(axis=1, keepdims=True)
    inv = (1.0 / np.sqrt(ms + eps)).astype(x.data.dtype)
    xhat = x.data * inv
    out_data = xhat * weight.data

    def backward(g: np.ndarray) -> None:
        if weight.requires_grad:
            _accum(weight, (g * xhat).sum(axis=0))
        if x.requires_grad:
            gw = g * weight.data
            # d/dx of x*inv: inv*gw - x * inv^3/d * sum(gw*x)
            dot = (gw * x.data).sum(axis=1, keepdims=True)
            _accum(x, inv * gw - x.data * (inv ** 3) * dot / d)

    return Tensor._from_op(out_data, (x, weight), backward, "rms_norm")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise LayerNorm: y = (x - mean) / sqrt(var + eps) * w + b."""
    if x.data.ndim != 2 or weight.data.shape != (x.data.shape[1],):
        raise DimensionError(
            f"layer_norm: x {x.data.shape} vs weight {weight.data.shape}")
    d = x.data.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    xc64 = xc.astype(np.float64)
    var = (xc64 * xc64).mean(axis=1, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = xc * inv
    out_data = xhat * weight.data + bias.data

    def backward(g: np.ndarray) -> None:
        if weight.requires_grad:
            _accum(weight, (g * xhat).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=0))
        if x.requires_grad:
            gw = g * weight.data
            s1 = gw.sum(axis=1, keepdims=True)
            s2 = (gw * xhat).sum(axis=1, keepdims=True)
            _accum(x, inv * (gw - s1 / d - xhat * s2 / d))

    return Tensor._from_op(out_data, (x, weight, bias), backward, "layer_norm")


# ---------------------------------------------------------------------------
# Softmax family


def _stable_softmax(rows: np.ndarray) -> np.ndarray:
    shifted = rows - rows.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def row_softmax(x: Tensor) -> Tensor:
    """Softmax over each row, computed with max-subtraction."""
    if x.data.ndim != 2:
        raise DimensionError(f"row_softmax requires 2-D, got {x.data.shape}")
    s = _stable_softmax(x.data)

    def backward(g: np.ndarray) -> None:
        dot = (g * s).sum(axis=1, keepdims=True)
        _accum(x, s * (g - dot))

    return Tensor._from_op(s, (x,), backward, "row_softmax")


def masked_row_softmax(x: Tensor, select_mask: np.ndarray) -> Tensor:
    """Softmax restricted per row to entries where select_mask is 1.

    Unselected entries come out exactly 0 and receive zero gradient; each row
    must select at least one entry. The mask is a constant, not a tensor.
    """
    if x.data.ndim != 2 or select_mask.shape != x.data.shape:
        raise DimensionError(
            f"masked_row_softmax: x {x.data.shape} vs mask {select_mask.shape}")
    if not np.all(select_mask.sum(axis=1) >= 1):
        raise EmptyMaskError("masked_row_softmax: a row selects no entries")
    sel = select_mask.astype(bool)
    neg = np.where(sel, x.data, -np.inf)
    shifted = neg - neg.max(axis=1, keepdims=True)
    e = np.where(sel, np.exp(shifted), 0.0)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        dot = (g * s).sum(axis=1, keepdims=True)
        _accum(x, s * (g - dot))

    return Tensor._from_op(s.astype(x.data.dtype), (x,), backward,
                           "masked_row_softmax")


def masked_cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean of -log softmax(logits)[target] over positions where mask is 1.

    Fused log-sum-exp form; masked-out positions contribute nothing to the
    value or the gradient.
    """
    if logits.data.ndim != 2:
        raise DimensionError(
            f"masked_cross_entropy logits must be 2-D, got {logits.data.shape}")
    t_count, vocab = logits.data.shape
    targets = np.asarray(targets, dtype=np.int64)
    mask_arr = np.asarray(mask, dtype=logits.data.dtype)
    if targets.shape != (t_count,) or mask_arr.shape != (t_count,):
        raise DimensionError(
            f"targets/mask length must be {t_count}, got "
            f"{targets.shape} and {mask_arr.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise VocabError(f"target id out of range [0, {vocab})")
    n_masked = float(mask_arr.sum())
    if n_masked <= 0:
        raise EmptyMaskError("masked_cross_entropy: mask selects no positions")

    row_max = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - row_max
    lse = np.log(np.exp(shifted).sum(axis=1)) + row_max[:, 0]
    picked = logits.data[np.arange(t_count), targets]
    per_pos = lse - picked
    loss = (per_pos * mask_arr).sum() / n_masked
    out_data = np.asarray(loss, dtype=logits.data.dtype)

    def backward(g: np.ndarray) -> None:
        if logits.requires_grad:
            soft = _stable_softmax(logits.data)
            soft[np.arange(t_count), targets] -= 1.0
            coef = (mask_arr / n_masked)[:, None] * g
            _accum(logits, soft * coef)

    return Tensor._from_op(out_data, (logits,), backward, "masked_cross_entropy")


# ---------------------------------------------------------------------------
# Attention kernels


def rotary(x: Tensor, n_heads: int, base: float = 10000.0) -> Tensor:
    """Rotary position embedding applied per head to [T, d].

    Row index is the position; within each head, consecutive (even, odd)
    channel pairs are rotated by angle pos * base^(-2i/head_dim). The
    transform is orthogonal, so the backward pass applies the inverse
    rotation to the gradient.
    """
    t_len, d = x.data.shape
    if d % n_heads != 0:
        raise DimensionError(f"d_model {d} not divisible by n_heads {n_heads}")
    hd = d // n_heads
    if hd % 2 != 0:
        raise DimensionError(f"head_dim {hd} must be even for rotary pairs")
    inv_freq = base ** (-np.arange(0, hd, 2, dtype=np.float64) / hd)
    angles = np.arange(t_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(angles).astype(x.data.dtype)  # [T, hd/2]
    sin = np.sin(angles).astype(x.data.dtype)

    xh = x.data.reshape(t_len, n_heads, hd)
    x1 = xh[:, :, 0::2]
    x2 = xh[:, :, 1::2]
    y = np.empty_like(xh)
    y[:, :, 0::2] = x1 * cos[:, None, :] - x2 * sin[:, None, :]
    y[:, :, 1::2] = x1 * sin[:, None, :] + x2 * cos[:, None, :]
    out_data = y.reshape(t_len, d)

    def backward(g: np.ndarray) -> None:
        gh = g.reshape(t_len, n_heads, hd)
        g1 = gh[:, :, 0::2]
        g2 = gh[:, :, 1::2]
        gx = np.empty_like(gh)
        gx[:, :, 0::2] = g1 * cos[:, None, :] + g2 * sin[:, None, :]
        gx[:, :, 1::2] = -g1 * sin[:, None, :] + g2 * cos[:, None, :]
        _accum(x, gx.reshape(t_len, d))

    return Tensor._from_op(out_data, (x,), backward, "rotary")


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head softmax(QKᵀ/√hd + causal mask)·V over [T, d] inputs.

    Position t attends to positions <= t only. Heads are contiguous channel
    slices; outputs are concatenated back to [T, d].
    """
    t_len, d = q.data.shape
    if k.data.shape != (t_len, d) or v.data.shape != (t_len, d):
        raise DimensionError(
            f"attention shapes differ: {q.data.shape} {k.data.shape} {v.data.shape}")
    if d % n_heads != 0:
        raise DimensionError(f"d_model {d} not divisible by n_heads {n_heads}")
    hd = d // n_heads
    inv_sqrt = 1.0 / math.sqrt(hd)

    qh = q.data.reshape(t_len, n_heads, hd).transpose(1, 0, 2)  # [H, T, hd]
    kh = k.data.reshape(t_len, n_heads, hd).transpose(1, 0, 2)
    vh = v.data.reshape(t_len, n_heads, hd).transpose(1, 0, 2)

    scores = np.einsum("hid,hjd->hij", qh, kh) * inv_sqrt
    causal = np.tril(np.ones((t_len, t_len), dtype=bool))
    scores = np.where(causal[None, :, :], scores, -np.inf)
    shifted = scores - scores.max(axis=2, keepdims=True)
    e = np.where(causal[None, :, :], np.exp(shifted), 0.0)
    attn = e / e.sum(axis=2, keepdims=True)  # [H, T, T]

    out_h = np.einsum("hij,hjd->hid", attn, vh)
    out_data = out_h.transpose(1, 0, 2).reshape(t_len, d).astype(q.data.dtype)

    def backward(g: np.ndarray) -> None:
        gh = g.reshape(t_len, n_heads, hd).transpose(1, 0, 2)
        if v.requires_grad:
            gv = np.einsum("hij,hid->hjd", attn, gh)
            _accum(v, gv.transpose(1, 0, 2).reshape(t_len, d))
        da = np.einsum("hid,hjd->hij", gh, vh)
        # softmax backward; masked entries have attn == 0, so ds == 0 there
        dot = (da * attn).sum(axis=2, keepdims=True)
        ds = attn * (da - dot) * inv_sqrt
        if q.requires_grad:
            gq = np.einsum("hij,hjd->hid", ds, kh)
            _accum(q, gq.transpose(1, 0, 2).reshape(t_len, d))
        if k.requires_grad:
            gk = np.einsum("hij,hid->hjd", ds, qh)
            _accum(k, gk.transpose(1, 0, 2).reshape(t_len, d))

    return Tensor._from_op(out_data, (q, k, v), backward, "causal_attention")


# ---------------------------------------------------------------------------
# Gradient checking


def finite_difference_grad(loss_fn: Callable[[], Tensor], param: Tensor,
                           eps: float = 1e-3) -> np.ndarray:
    """Central finite differences of loss_fn w.r.t. every element of param."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(loss_fn().data)
        flat[i] = orig - eps
        down = float(loss_fn().data)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def gradient_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                   eps: float = 1e-3, rtol: float = 1e-3) -> float:
    """Compare analytic gradients against central finite differences.

    Relative error per parameter is ||g_analytic - g_fd|| / max(||g_fd||, tiny);
    returns the worst ratio and raises AssertionError if it exceeds rtol.
    Callers should build the graph in float64 for a clean oracle.
    """
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        numeric = finite_difference_grad(loss_fn, p, eps)
        denom = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-12)
        rel = float(np.linalg.norm(analytic - numeric) / denom)
        worst = max(worst, rel)
        if rel > rtol:
            raise AssertionError(
                f"gradient check failed: relative error {rel:.3e} > {rtol:.0e}")
    return worst
