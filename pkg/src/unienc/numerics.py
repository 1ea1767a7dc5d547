"""Dense float64 tensors with a taped reverse-mode gradient engine.

Everything a small two-pass transformer encoder needs: matmul, bias adds,
layer norm, GELU/ReLU, (log-)softmax, masked scaled-dot attention, strided
1-D convolution, plus the bookkeeping ops (reshape / transpose / concat /
slice / gather / reductions).  Ops compute eagerly on numpy arrays; when a
``GradTape`` is active they also record the primitive graph so ``backward``
can push adjoints to every trainable leaf.  ``finite_diff_grad`` is the
independent central-difference oracle used by the test suite and the
``gradcheck`` CLI subcommand.

All data is float64: at desk scale the memory cost is irrelevant and it
keeps gradient checks tight.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractViolation, DomainError, NumericalError

MASK_OFFSET = 1e30  # subtracted from masked attention scores

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_LN_VAR_FLOOR = 1e-12  # rows with variance below this normalize to zero


class Tensor:
    """A dense float64 array, optionally a trainable leaf of the graph.

    ``dims`` is the shape as a list; ``data`` is the row-major (C order)
    numpy buffer.  ``grad`` is populated by :func:`backward` for leaves
    created with ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = np.ascontiguousarray(arr) if arr.ndim else arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def dims(self) -> list:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad}{tag})"


def parameter(data, name: str) -> Tensor:
    """Create a named trainable leaf."""
    return Tensor(data, requires_grad=True, name=name)


class _Node:
    """One recorded primitive: output, parents, and the local vjp."""

    __slots__ = ("op", "out", "parents", "vjp")

    def __init__(self, op: str, out: Tensor, parents: tuple, vjp: Callable):
        self.op = op
        self.out = out
        self.parents = parents
        self.vjp = vjp


_tape_slot = threading.local()


def _active_tape() -> "GradTape | None":
    return getattr(_tape_slot, "tape", None)


class GradTape:
    """Records primitive ops (with parents) for one forward pass.

    Single-threaded by contract: a tape must not be shared across
    concurrent forward passes.  Use as a context manager::

        with GradTape() as tape:
            loss = ...
        grads = backward(tape, loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        if _active_tape() is not None:
            raise ContractViolation("GradTape contexts do not nest")
        _tape_slot.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_slot.tape = None
        return False


def record_op(op: str, parents: Sequence[Tensor], out_data: np.ndarray,
              vjp: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap ``out_data`` in a Tensor, recording the op if a tape is active.

    ``vjp(adjoint)`` must return one gradient array (or None) per parent.
    This is the extension point for custom loss primitives whose gradient
    is computed outside the engine (e.g. the CTC marginalizer).
    """
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(_Node(op, out, tuple(parents), vjp))
    return out


def backward(tape: GradTape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-sweep the tape from a scalar loss.

    Visits each recorded node exactly once in reverse topological order
    (creation order is already topological).  The adjoint of the loss node
    is 1.  Leaf tensors with ``requires_grad`` receive their gradient both
    in the returned dict and accumulated onto ``.grad``.
    """
    if loss.size != 1:
        raise ContractViolation(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if not np.isfinite(loss.data.reshape(())):
        raise NumericalError("loss is not finite")

    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    produced = {id(node.out) for node in tape.nodes}

    for node in reversed(tape.nodes):
        g = adjoints.pop(id(node.out), None)
        tensors.pop(id(node.out), None)
        if g is None:
            continue  # not on a path to the loss
        grads = node.vjp(g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoints:
                adjoints[key] = adjoints[key] + pg
            else:
                adjoints[key] = pg
                tensors[key] = parent

    result: dict[Tensor, np.ndarray] = {}
    for key, g in adjoints.items():
        t = tensors[key]
        if key in produced or not t.requires_grad:
            continue
        g = np.asarray(g, dtype=np.float64).reshape(t.shape)
        result[t] = g
        t.grad = g if t.grad is None else t.grad + g
    return result


# ---------------------------------------------------------------------------
# log-domain helper (plain numpy, used by the CTC recursions)
# ---------------------------------------------------------------------------

def log_sum_exp(values) -> float:
    """log(sum(exp(values))) with max-shift stabilization.

    Returns -inf for an all-(-inf) input; empty input is a domain error.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise DomainError("log_sum_exp of empty input")
    m = np.max(v)
    if not np.isfinite(m):
        if m == -np.inf:
            return -np.inf
        raise NumericalError("log_sum_exp input contains +inf or NaN")
    return float(m + np.log(np.sum(np.exp(v - m))))


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D or batched with identical leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] \
            or a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        return np.matmul(g, _swap_last(b.data)), np.matmul(_swap_last(a.data), g)

    return record_op("matmul", (a, b), out, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of same-shape tensors (residual connections)."""
    if a.shape != b.shape:
        raise ContractViolation(f"add shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return record_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d vector to every row of ``x`` (last axis)."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ContractViolation(f"add_bias shape mismatch: {tuple(x.shape)} + {tuple(b.shape)}")
    axes = tuple(range(x.ndim - 1))

    def vjp(g):
        return g, g.sum(axis=axes)

    return record_op("add_bias", (x, b), x.data + b.data, vjp)


def mul_const(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record_op("mul_const", (x,), x.data * c, lambda g: (g * c,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Row-wise layer normalization over the last axis.

    Rows whose variance is below 1e-12 normalize to exactly zero (avoiding
    a division blow-up on constant rows); the gradient on such rows is zero.
    """
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ContractViolation("layer_norm gain/bias must match the feature dim")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    live = var >= _LN_VAR_FLOOR
    inv = np.where(live, 1.0 / np.sqrt(np.where(live, var, 1.0)), 0.0)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
        mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
        axes = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record_op("layer_norm", (x, gain, bias), out, vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return record_op("gelu", (x,), out, vjp)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return record_op("relu", (x,), out, lambda g: (g * (x.data > 0.0),))


def softmax_rows(x: Tensor) -> Tensor:
    """Stable softmax along the last axis; each output row sums to 1."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return record_op("softmax_rows", (x,), out, vjp)


def log_softmax_rows(x: Tensor) -> Tensor:
    """Stable log-softmax along the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return record_op("log_softmax_rows", (x,), out, vjp)


def mask_scores(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Push masked attention scores down by 1e30 before the softmax.

    ``mask`` is boolean, broadcastable to the score shape; True keeps a
    score.  Kept scores are copied bit-exactly, so an all-pass mask is a
    bit-identical no-op.
    """
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, scores.data, scores.data - MASK_OFFSET)
    except ValueError as exc:
        raise ContractViolation(
            f"mask shape {mask.shape} does not broadcast to scores {tuple(scores.shape)}"
        ) from exc
    return record_op("mask_scores", (scores,), out, lambda g: (g,))


def masked_scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                                mask: np.ndarray | None = None) -> Tensor:
    """softmax(q kᵀ / sqrt(d_k)) v with optional boolean keep-mask.

    Shapes: q [..., Tq, dk], k [..., Tk, dk], v [..., Tk, dv], mask
    broadcastable to [..., Tq, Tk].  Masked positions get exactly zero
    attention weight (their shifted scores underflow the exp).
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ContractViolation(
            f"attention shape mismatch: q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    kt = transpose_last(k)
    scores = mul_const(matmul(q, kt), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = mask_scores(scores, mask)
    return matmul(softmax_rows(scores), v)


def transpose_last(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    out = _swap_last(x.data)
    return record_op("transpose_last", (x,), out, lambda g: (_swap_last(g),))


def transpose(x: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return record_op("transpose", (x,), out, lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = np.reshape(x.data, shape)
    return record_op("reshape", (x,), out, lambda g: (np.reshape(g, x.shape),))


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two matrices along axis 0."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractViolation(f"concat_rows mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    na = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)
    return record_op("concat_rows", (a, b), out, lambda g: (g[:na], g[na:]))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop) of a matrix."""
    if x.ndim != 2 or not (0 <= start <= stop <= x.shape[0]):
        raise ContractViolation(f"slice_rows [{start}, {stop}) of {tuple(x.shape)}")
    out = x.data[start:stop]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return record_op("slice_rows", (x,), out, vjp)


def gather_rows(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick x[rows[i], cols[i]] into a vector."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = x.data[rows, cols]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return record_op("gather_rows", (x,), out, vjp)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())
    return record_op("sum_all", (x,), out, lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    if n == 0:
        raise DomainError("mean of an empty tensor")
    out = np.asarray(x.data.mean())
    return record_op("mean_all", (x,), out,
                     lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Strided 1-D convolution over rows.

    x [T_in, C_in], w [K, C_in, C_out], b [C_out]; zero padding rows on both
    ends.  Output length is (T_in + 2*padding - K) // stride + 1.
    """
    if x.ndim != 2 or w.ndim != 3 or x.shape[1] != w.shape[1] or b.shape != (w.shape[2],):
        raise ContractViolation(
            f"conv1d shape mismatch: x{tuple(x.shape)} w{tuple(w.shape)} b{tuple(b.shape)}")
    kernel, _, c_out = w.shape
    t_in = x.shape[0]
    t_out = (t_in + 2 * padding - kernel) // stride + 1
    if t_out < 1:
        raise DomainError(f"conv1d input too short: {t_in} rows for kernel {kernel}")
    xp = np.pad(x.data, ((padding, padding), (0, 0)))
    out = np.tile(b.data, (t_out, 1))
    for j in range(kernel):
        out += xp[j:j + stride * (t_out - 1) + 1:stride] @ w.data[j]

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for j in range(kernel):
            sl = slice(j, j + stride * (t_out - 1) + 1, stride)
            gw[j] = xp[sl].T @ g
            gxp[sl] += g @ w.data[j].T
        gx = gxp[padding:padding + t_in] if padding else gxp
        return gx, gw, g.sum(axis=0)

    return record_op("conv1d", (x, w, b), out, vjp)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return x
    if rate >= 1.0:
        raise DomainError(f"dropout rate must be < 1, got {rate}")
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    out = x.data * keep * scale
    return record_op("dropout", (x,), out, lambda g: (g * keep * scale,))


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(loss_fn: Callable[[], float], params: Iterable[Tensor],
                     eps: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient estimate, one coordinate at a time.

    ``loss_fn`` re-runs the forward pass (no tape needed) and must be
    deterministic.  Parameters are perturbed in place and restored.
    """
    if eps <= 0:
        raise DomainError(f"eps must be positive, got {eps}")
    params = list(params)
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(loss_fn())
            flat[i] = orig - eps
            f_minus = float(loss_fn())
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                name = p.name or "<unnamed>"
                raise NumericalError(
                    f"non-finite loss while probing parameter {name} coordinate {i}")
            g[i] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(g.reshape(p.shape))
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Worst per-coordinate |a-b| / max(|a|+|b|, floor).

    The floor keeps finite-difference noise on near-zero coordinates from
    dominating the comparison.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(b), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
