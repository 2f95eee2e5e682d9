"""Reverse-mode automatic differentiation over dense numpy arrays.

The op set covers exactly what the encoder/decoder stack needs: matrix
products, elementwise arithmetic, activations, row gathers with optionally
sparse gradient accumulation for large embedding tables, segment sums for
message passing, and a two-row 1-D convolution. There is no general
broadcasting; the only shape-bending ``mul`` accepts is a scalar, an
(n, 1) column against (n, d), or a constant numpy operand.

Precision convention: float64 for verification (all finite-difference
checks run there), float32 for training throughput.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class ShapeMismatch(ValueError):
    """Operand shapes incompatible for an op."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(
            f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        )


class RowGradient:
    """Sparse row-indexed gradient accumulator for embedding tables.

    Gather backwards append (indices, rows) chunks; ``coalesce`` merges
    duplicates. Avoids materializing a full |N| x D zero matrix when only a
    sampled subgraph touches the table.
    """

    def __init__(self, shape, dtype):
        self.shape = tuple(shape)
        self.dtype = dtype
        self._chunks = []

    def add(self, idx, vals):
        vals2d = vals if vals.ndim == 2 else vals.reshape(-1, 1)
        self._chunks.append((np.asarray(idx, dtype=np.int64), vals2d))

    def __bool__(self):
        return bool(self._chunks)

    def clear(self):
        self._chunks = []

    def coalesce(self):
        """Unique touched rows and their summed gradients, as (rows, vals)."""
        cols = self.shape[1] if len(self.shape) == 2 else 1
        if not self._chunks:
            return (np.zeros(0, dtype=np.int64), np.zeros((0, cols), dtype=self.dtype))
        idx = np.concatenate([c[0] for c in self._chunks])
        vals = np.concatenate([c[1] for c in self._chunks])
        rows, inverse = np.unique(idx, return_inverse=True)
        out = np.zeros((rows.shape[0], cols), dtype=self.dtype)
        kernels.scatter_add_rows(out, inverse.astype(np.int64), vals)
        self._chunks = [(rows, out)]
        return rows, out

    def norm_squared(self):
        _, vals = self.coalesce()
        return float(np.sum(vals.astype(np.float64) ** 2))

    def scale(self, factor):
        for _, vals in self._chunks:
            vals *= factor

    def to_dense(self):
        dense = np.zeros(self.shape, dtype=self.dtype)
        rows, vals = self.coalesce()
        dense[rows] = vals if len(self.shape) == 2 else vals[:, 0]
        return dense


class Tensor:
    """A numpy array plus an accumulated gradient and a backward closure."""

    __slots__ = ("data", "requires_grad", "grad", "row_grad", "sparse_grad",
                 "_backward", "_parents", "op")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(),
                 sparse_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.sparse_grad = bool(sparse_grad)
        self.row_grad = RowGradient(arr.shape, arr.dtype) if sparse_grad else None
        self._backward = None
        self._parents = parents
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate(self, g):
        if self.sparse_grad:
            raise RuntimeError(
                f"dense gradient fed to sparse-grad tensor (op {self.op}); "
                "sparse tables may only be consumed through embedding_lookup"
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None
        if self.row_grad is not None:
            self.row_grad.clear()

    def backward(self, grad=None):
        run_backward(self, grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def run_backward(root, grad=None):
    """Backpropagate from ``root``, visiting each graph node exactly once."""
    if not root.requires_grad:
        raise ValueError("backward() on a tensor that does not require grad")
    if grad is None:
        if root.data.size != 1:
            raise ValueError("backward() without a gradient requires a scalar output")
        grad = np.ones_like(root.data)
    root.accumulate(np.asarray(grad, dtype=root.data.dtype))

    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


def _result(data, op, parents):
    grads_needed = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=grads_needed, op=op, parents=tuple(parents))


def _as_const(x, op, like):
    """Validate a non-Tensor operand (python scalar or ndarray constant)."""
    if np.isscalar(x):
        return x
    arr = np.asarray(x)
    try:
        np.broadcast_shapes(arr.shape, like.shape)
    except ValueError:
        raise ShapeMismatch(op, like.shape, arr.shape) from None
    return arr


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    if not isinstance(b, Tensor):
        const = _as_const(b, "add", a.data)
        data = a.data + const
        if data.shape != a.data.shape:
            raise ShapeMismatch("add", a.data.shape, np.asarray(const).shape)
        out = _result(data, "add", (a,))
        if out.requires_grad:
            def _bw():
                a.accumulate(out.grad)
            out._backward = _bw
        return out
    if a.data.shape != b.data.shape:
        raise ShapeMismatch("add", a.data.shape, b.data.shape)
    out = _result(a.data + b.data, "add", (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a.accumulate(out.grad)
            if b.requires_grad:
                b.accumulate(out.grad)
        out._backward = _bw
    return out


def mul(a, b):
    if not isinstance(b, Tensor):
        const = _as_const(b, "mul", a.data)
        data = a.data * const
        if data.shape != a.data.shape:
            raise ShapeMismatch("mul", a.data.shape, np.asarray(const).shape)
        out = _result(data, "mul", (a,))
        if out.requires_grad:
            def _bw():
                a.accumulate(out.grad * const)
            out._backward = _bw
        return out

    sa, sb = a.data.shape, b.data.shape
    column = sa != sb
    if column and not (len(sa) == 2 and sb == (sa[0], 1)):
        raise ShapeMismatch("mul", sa, sb)
    out = _result(a.data * b.data, "mul", (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a.accumulate(out.grad * b.data)
            if b.requires_grad:
                gb = out.grad * a.data
                b.accumulate(gb.sum(axis=1, keepdims=True) if column else gb)
        out._backward = _bw
    return out


def div(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeMismatch("div", a.data.shape, b.data.shape)
    out = _result(a.data / b.data, "div", (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a.accumulate(out.grad / b.data)
            if b.requires_grad:
                b.accumulate(-out.grad * a.data / (b.data * b.data))
        out._backward = _bw
    return out


def matmul(a, b, transpose_b=False):
    bd = b.data.T if transpose_b else b.data
    if a.data.ndim != 2 or bd.ndim != 2 or a.data.shape[1] != bd.shape[0]:
        raise ShapeMismatch("matmul", a.data.shape, b.data.shape)
    out = _result(a.data @ bd, "matmul", (a, b))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                a.accumulate(g @ bd.T)
            if b.requires_grad:
                gb = a.data.T @ g
                b.accumulate(gb.T if transpose_b else gb)
        out._backward = _bw
    return out


def reduce_sum(t, axis=None, keepdims=False):
    out = _result(np.sum(t.data, axis=axis, keepdims=keepdims), "reduce_sum", (t,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            t.accumulate(np.broadcast_to(g, t.data.shape).astype(t.data.dtype))
        out._backward = _bw
    return out


def rowdot(a, b):
    """Row-wise dot product of two equally-shaped 2-D tensors -> 1-D."""
    if a.data.ndim != 2 or a.data.shape != b.data.shape:
        raise ShapeMismatch("rowdot", a.data.shape, b.data.shape)
    out = _result(kernels.rowwise_dot(a.data, b.data), "rowdot", (a, b))
    if out.requires_grad:
        def _bw():
            g = out.grad[:, None]
            if a.requires_grad:
                a.accumulate(g * b.data)
            if b.requires_grad:
                b.accumulate(g * a.data)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(t, shape):
    out = _result(t.data.reshape(shape), "reshape", (t,))
    if out.requires_grad:
        def _bw():
            t.accumulate(out.grad.reshape(t.data.shape))
        out._backward = _bw
    return out


def cast(t, dtype):
    """Precision change; the gradient is cast back on the way down."""
    out = _result(t.data.astype(dtype), "cast", (t,))
    if out.requires_grad:
        def _bw():
            t.accumulate(out.grad.astype(t.data.dtype))
        out._backward = _bw
    return out


def concat(tensors, axis):
    out = _result(np.concatenate([t.data for t in tensors], axis=axis),
                  "concat", tensors)
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def _bw():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis] = slice(lo, hi)
                    t.accumulate(out.grad[tuple(sl)])
        out._backward = _bw
    return out


def stack(tensors, axis):
    first = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != first:
            raise ShapeMismatch("stack", first, t.data.shape)
    out = _result(np.stack([t.data for t in tensors], axis=axis), "stack", tensors)
    if out.requires_grad:
        def _bw():
            for pos, t in enumerate(tensors):
                if t.requires_grad:
                    t.accumulate(np.take(out.grad, pos, axis=axis))
        out._backward = _bw
    return out


def narrow(t, axis, start, length):
    """Contiguous slice along one axis (the only slicing the stack needs)."""
    if start < 0 or start + length > t.data.shape[axis]:
        raise ShapeMismatch("narrow", t.data.shape, (start, length))
    sl = [slice(None)] * t.data.ndim
    sl[axis] = slice(start, start + length)
    out = _result(t.data[tuple(sl)], "narrow", (t,))
    if out.requires_grad:
        def _bw():
            g = np.zeros_like(t.data)
            g[tuple(sl)] = out.grad
            t.accumulate(g)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# gathers and segment reductions
# ---------------------------------------------------------------------------

def embedding_lookup(table, idx):
    """Row gather. The backward scatter-adds; tables flagged ``sparse_grad``
    accumulate into a RowGradient instead of a dense array."""
    idx = np.asarray(idx, dtype=np.int64)
    n = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise IndexError(f"embedding_lookup: row {bad} out of range [0, {n})")
    out = _result(table.data[idx], "embedding_lookup", (table,))
    if out.requires_grad:
        def _bw():
            if table.sparse_grad:
                table.row_grad.add(idx, out.grad)
            else:
                if table.grad is None:
                    table.grad = np.zeros_like(table.data)
                if table.data.ndim == 1:
                    kernels.scatter_add_rows(
                        table.grad.reshape(-1, 1), idx, out.grad.reshape(-1, 1))
                else:
                    kernels.scatter_add_rows(table.grad, idx, out.grad)
        out._backward = _bw
    return out


def segment_sum(t, seg_ids, num_segments):
    """Sum rows (or scalars) of ``t`` into ``num_segments`` buckets."""
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    if seg_ids.shape[0] != t.data.shape[0]:
        raise ShapeMismatch("segment_sum", t.data.shape, seg_ids.shape)
    if t.data.ndim == 1:
        data = np.zeros(num_segments, dtype=t.data.dtype)
        kernels.scatter_add_rows(data.reshape(-1, 1), seg_ids, t.data.reshape(-1, 1))
    else:
        data = np.zeros((num_segments,) + t.data.shape[1:], dtype=t.data.dtype)
        kernels.scatter_add_rows(data, seg_ids, t.data)
    out = _result(data, "segment_sum", (t,))
    if out.requires_grad:
        def _bw():
            t.accumulate(out.grad[seg_ids])
        out._backward = _bw
    return out


def segment_normalize(t, seg_ids, num_segments):
    """Normalize 1-D values to sum to 1 within each segment.

    Segments whose values sum to exactly zero (e.g. every incoming edge
    gated off) yield zero coefficients with zero gradient: the neighborhood
    is treated as empty rather than dividing 0/0.
    """
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    if t.data.ndim != 1 or seg_ids.shape[0] != t.data.shape[0]:
        raise ShapeMismatch("segment_normalize", t.data.shape, seg_ids.shape)
    denom = np.zeros(num_segments, dtype=t.data.dtype)
    kernels.scatter_add_rows(denom.reshape(-1, 1), seg_ids, t.data.reshape(-1, 1))
    live = denom != 0.0
    inv = np.zeros_like(denom)
    inv[live] = 1.0 / denom[live]
    coef = t.data * inv[seg_ids]
    out = _result(coef, "segment_normalize", (t,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            inner = np.zeros(num_segments, dtype=g.dtype)
            kernels.scatter_add_rows(inner.reshape(-1, 1), seg_ids,
                                     (g * coef).reshape(-1, 1))
            t.accumulate((g - inner[seg_ids]) * inv[seg_ids])
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# activations and elementwise functions
# ---------------------------------------------------------------------------

def tanh(t):
    y = np.tanh(t.data)
    out = _result(y, "tanh", (t,))
    if out.requires_grad:
        def _bw():
            t.accumulate(out.grad * (1.0 - y * y))
        out._backward = _bw
    return out


def sigmoid(t):
    y = 1.0 / (1.0 + np.exp(-t.data))
    out = _result(y, "sigmoid", (t,))
    if out.requires_grad:
        def _bw():
            t.accumulate(out.grad * y * (1.0 - y))
        out._backward = _bw
    return out


def exp(t):
    y = np.exp(t.data)
    out = _result(y, "exp", (t,))
    if out.requires_grad:
        def _bw():
            t.accumulate(out.grad * y)
        out._backward = _bw
    return out


def log(t):
    out = _result(np.log(t.data), "log", (t,))
    if out.requires_grad:
        def _bw():
            t.accumulate(out.grad / t.data)
        out._backward = _bw
    return out


def clamp(t, lo, hi):
    """Clip values into [lo, hi]; gradient passes only where unclipped."""
    out = _result(np.clip(t.data, lo, hi), "clamp", (t,))
    if out.requires_grad:
        mask = ((t.data >= lo) & (t.data <= hi)).astype(t.data.dtype)

        def _bw():
            t.accumulate(out.grad * mask)
        out._backward = _bw
    return out


def softmax_rows(t):
    if t.data.ndim != 2:
        raise ShapeMismatch("softmax_rows", t.data.shape)
    shifted = t.data - t.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = _result(y, "softmax_rows", (t,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            t.accumulate(y * (g - (g * y).sum(axis=1, keepdims=True)))
        out._backward = _bw
    return out


def dropout(t, p, train, rng):
    """Inverted dropout: kept activations scale by 1/(1-p) at train time,
    eval mode is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return t
    keep = (rng.random(t.data.shape) >= p).astype(t.data.dtype)
    scale = np.asarray(1.0 / (1.0 - p), dtype=t.data.dtype)
    out = _result(t.data * keep * scale, "dropout", (t,))
    if out.requires_grad:
        def _bw():
            t.accumulate(out.grad * keep * scale)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# two-row convolution (decoder feature extractor)
# ---------------------------------------------------------------------------

def conv1d_two_row(x, k):
    """Same-length 1-D convolution of a (B, 2, n) stack with (C, 2, K)
    kernels, zero-padded by K//2 on both sides. K must be odd."""
    if x.data.ndim != 3 or x.data.shape[1] != 2 or k.data.ndim != 3 \
            or k.data.shape[1] != 2:
        raise ShapeMismatch("conv1d_two_row", x.data.shape, k.data.shape)
    width = k.data.shape[2]
    if width % 2 == 0:
        raise ValueError(f"conv1d_two_row: kernel width must be odd, got {width}")
    out = _result(kernels.conv_tworow_forward(x.data, k.data), "conv1d_two_row", (x, k))
    if out.requires_grad:
        def _bw():
            g = np.ascontiguousarray(out.grad)
            if k.requires_grad:
                k.accumulate(kernels.conv_tworow_grad_kernels(g, x.data, width))
            if x.requires_grad:
                x.accumulate(kernels.conv_tworow_grad_input(g, k.data))
        out._backward = _bw
    return out
