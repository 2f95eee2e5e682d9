"""Hot numeric kernels, each with a numba-compiled and a pure-numpy path.

The numba path is used when numba imports successfully, unless the
environment variable ``KGC_NUMBA`` is set to ``0``/``false``/``off``.
``benchmarks/bench_kernels.py`` times the two paths against each other.

Contract notes:

* The cosine-similarity kernels (``row_norms`` / ``sim_tile``) accumulate
  in float64 with a fixed k-sequential order in *both* backends, so blocked
  results are bit-identical to a plain double loop over pairs.
* Scatter adds process rows in input order in both backends (``np.add.at``
  is unbuffered), keeping runs reproducible.
* Everything is single-threaded; reproducibility beats parallel speedups
  at the scale this package targets.
"""

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap if not (args and callable(args[0])) else args[0]

_ENV_FLAG = os.environ.get("KGC_NUMBA", "1").strip().lower()
USE_NUMBA = HAS_NUMBA and _ENV_FLAG not in ("0", "false", "off")


def active_backend():
    """Name of the backend the dispatching wrappers call into."""
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# scatter add (embedding-gradient accumulation, segment sums)
# ---------------------------------------------------------------------------

def scatter_add_rows_numpy(out, idx, vals):
    np.add.at(out, idx, vals)


@njit(cache=True)
def scatter_add_rows_numba(out, idx, vals):
    for e in range(idx.shape[0]):
        r = idx[e]
        for d in range(vals.shape[1]):
            out[r, d] += vals[e, d]


# ---------------------------------------------------------------------------
# segment max over edge logits (per-destination, for stable exponentials)
# ---------------------------------------------------------------------------

def segment_max_numpy(vals, seg_ids, num_segments):
    out = np.full(num_segments, -np.inf, dtype=vals.dtype)
    np.maximum.at(out, seg_ids, vals)
    out[np.isneginf(out)] = 0.0  # empty segments contribute nothing
    return out


@njit(cache=True)
def segment_max_numba(vals, seg_ids, num_segments):
    out = np.full(num_segments, -np.inf, dtype=vals.dtype)
    for e in range(vals.shape[0]):
        s = seg_ids[e]
        if vals[e] > out[s]:
            out[s] = vals[e]
    for s in range(num_segments):
        if out[s] == -np.inf:
            out[s] = 0.0
    return out


# ---------------------------------------------------------------------------
# row-wise dot product (attention logits)
# ---------------------------------------------------------------------------

def rowwise_dot_numpy(a, b):
    return np.einsum("ij,ij->i", a, b)


@njit(cache=True)
def rowwise_dot_numba(a, b):
    out = np.zeros(a.shape[0], dtype=a.dtype)
    for i in range(a.shape[0]):
        s = a[i, 0] * b[i, 0]
        for k in range(1, a.shape[1]):
            s += a[i, k] * b[i, k]
        out[i] = s
    return out


# ---------------------------------------------------------------------------
# two-row 1-D convolution with symmetric zero padding ("same" output size)
# ---------------------------------------------------------------------------
# x: (B, 2, n) stacked source/relation rows, k: (C, 2, K), K odd.
# out[b, c, i] = sum_{s, t} k[c, s, t] * x[b, s, i + t - K//2]

def _padded_windows(x, width):
    pad = width // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    # (B, 2, n, K) view, no copy
    return np.lib.stride_tricks.sliding_window_view(xp, width, axis=2)


def conv_tworow_forward_numpy(x, k):
    win = _padded_windows(x, k.shape[2])
    return np.einsum("bsit,cst->bci", win, k)


def conv_tworow_grad_kernels_numpy(grad_out, x, width):
    win = _padded_windows(x, width)
    return np.einsum("bci,bsit->cst", grad_out, win)


def conv_tworow_grad_input_numpy(grad_out, k):
    # correlate grad with the flipped kernels, summed over channels
    gwin = _padded_windows(grad_out, k.shape[2])  # (B, C, n, K)
    kflip = np.ascontiguousarray(k[:, :, ::-1])
    return np.einsum("bcit,cst->bsi", gwin, kflip)


@njit(cache=True)
def conv_tworow_forward_numba(x, k):
    batch, _, n = x.shape
    channels, _, width = k.shape
    pad = width // 2
    out = np.zeros((batch, channels, n), dtype=x.dtype)
    for b in range(batch):
        for c in range(channels):
            for i in range(n):
                s = 0.0
                for t in range(width):
                    j = i + t - pad
                    if 0 <= j < n:
                        s += k[c, 0, t] * x[b, 0, j] + k[c, 1, t] * x[b, 1, j]
                out[b, c, i] = s
    return out


@njit(cache=True)
def conv_tworow_grad_kernels_numba(grad_out, x, width):
    batch, channels, n = grad_out.shape
    pad = width // 2
    dk = np.zeros((channels, 2, width), dtype=x.dtype)
    for b in range(batch):
        for c in range(channels):
            for i in range(n):
                g = grad_out[b, c, i]
                for t in range(width):
                    j = i + t - pad
                    if 0 <= j < n:
                        dk[c, 0, t] += g * x[b, 0, j]
                        dk[c, 1, t] += g * x[b, 1, j]
    return dk


@njit(cache=True)
def conv_tworow_grad_input_numba(grad_out, k):
    batch, channels, n = grad_out.shape
    width = k.shape[2]
    pad = width // 2
    dx = np.zeros((batch, 2, n), dtype=grad_out.dtype)
    for b in range(batch):
        for c in range(channels):
            for i in range(n):
                g = grad_out[b, c, i]
                for t in range(width):
                    j = i + t - pad
                    if 0 <= j < n:
                        dx[b, 0, j] += g * k[c, 0, t]
                        dx[b, 1, j] += g * k[c, 1, t]
    return dx


# ---------------------------------------------------------------------------
# cosine similarity: fixed-order float64 accumulation in both backends
# ---------------------------------------------------------------------------

def row_norms_numpy(x):
    n_rows, dim = x.shape
    ss = np.zeros(n_rows, dtype=np.float64)
    for k in range(dim):  # k-sequential, matches the numba loop bit-for-bit
        col = x[:, k].astype(np.float64)
        ss += col * col
    return np.sqrt(ss)


@njit(cache=True)
def row_norms_numba(x):
    n_rows, dim = x.shape
    out = np.zeros(n_rows, dtype=np.float64)
    for i in range(n_rows):
        s = 0.0
        for k in range(dim):
            v = np.float64(x[i, k])
            s += v * v
        out[i] = np.sqrt(s)
    return out


def sim_tile_numpy(a, b):
    tile = np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    for k in range(a.shape[1]):
        tile += a[:, k, None] * b[None, :, k]
    return tile


@njit(cache=True)
def sim_tile_numba(a, b):
    tile = np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[j, k]
            tile[i, j] = s
    return tile


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_IMPLS = {
    "numpy": {
        "scatter_add_rows": scatter_add_rows_numpy,
        "segment_max": segment_max_numpy,
        "rowwise_dot": rowwise_dot_numpy,
        "conv_tworow_forward": conv_tworow_forward_numpy,
        "conv_tworow_grad_kernels": conv_tworow_grad_kernels_numpy,
        "conv_tworow_grad_input": conv_tworow_grad_input_numpy,
        "row_norms": row_norms_numpy,
        "sim_tile": sim_tile_numpy,
    },
}
if HAS_NUMBA:
    _IMPLS["numba"] = {
        "scatter_add_rows": scatter_add_rows_numba,
        "segment_max": segment_max_numba,
        "rowwise_dot": rowwise_dot_numba,
        "conv_tworow_forward": conv_tworow_forward_numba,
        "conv_tworow_grad_kernels": conv_tworow_grad_kernels_numba,
        "conv_tworow_grad_input": conv_tworow_grad_input_numba,
        "row_norms": row_norms_numba,
        "sim_tile": sim_tile_numba,
    }

_ACTIVE = _IMPLS[active_backend()]

scatter_add_rows = _ACTIVE["scatter_add_rows"]
segment_max = _ACTIVE["segment_max"]
rowwise_dot = _ACTIVE["rowwise_dot"]
conv_tworow_forward = _ACTIVE["conv_tworow_forward"]
conv_tworow_grad_kernels = _ACTIVE["conv_tworow_grad_kernels"]
conv_tworow_grad_input = _ACTIVE["conv_tworow_grad_input"]
row_norms = _ACTIVE["row_norms"]
sim_tile = _ACTIVE["sim_tile"]


def implementations():
    """Backend name -> kernel dict, for tests and benchmarks."""
    return _IMPLS
