"""Node text embeddings: binary file I/O, blocked all-pairs cosine
similarity, threshold selection, and graph densification.

Similarity accumulates in float64 with a fixed summation order in both
kernel backends, so a blocked run reproduces a plain double loop over
pairs bit-for-bit (threshold decisions near 0.95-0.98 are sensitive to
rounding).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .graph import KnowledgeGraph

log = logging.getLogger(__name__)

EMBED_MAGIC = b"KGE1"
PHRASE_SIDECAR_SUFFIX = ".phrases"

# threshold grid: 0.00 .. 1.00 in steps of 0.01 ("two decimal points")
GRID_POINTS = 101


class EmbeddingFormatError(ValueError):
    pass


class VocabularyMismatch(ValueError):
    def __init__(self, kind, offenders, total):
        self.kind = kind
        self.offenders = offenders
        self.total = total
        shown = ", ".join(repr(p) for p in offenders)
        more = f" (+{total - len(offenders)} more)" if total > len(offenders) else ""
        super().__init__(f"{total} {kind} phrase(s): {shown}{more}")


@dataclass
class NodeEmbeddingTable:
    """Per-node text embeddings, row-aligned with the graph vocabulary."""
    vectors: np.ndarray  # (num_nodes, dim) float32

    @property
    def dim(self):
        return self.vectors.shape[1]

    @property
    def num_rows(self):
        return self.vectors.shape[0]


@dataclass
class SimEdgeSet:
    """Unordered node pairs whose cosine similarity cleared the threshold."""
    pairs: np.ndarray  # (P, 2) int64, i < j, lexicographically sorted
    scores: np.ndarray  # (P,) float64
    threshold: float
    criterion: str
    excluded_rows: int = 0

    def __len__(self):
        return self.pairs.shape[0]


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def sidecar_path(path):
    return Path(str(path) + PHRASE_SIDECAR_SUFFIX)


def write_embedding_file(path, vectors, phrases, phrases_path=None):
    """Write the binary table plus its phrase sidecar (one per row)."""
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    if vectors.ndim != 2:
        raise EmbeddingFormatError(f"expected a 2-D table, got shape {vectors.shape}")
    if vectors.shape[0] != len(phrases):
        raise EmbeddingFormatError(
            f"{vectors.shape[0]} rows but {len(phrases)} phrases")
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<II", vectors.shape[0], vectors.shape[1]))
        fh.write(vectors.tobytes())
    target = Path(phrases_path) if phrases_path else sidecar_path(path)
    target.write_text("".join(p + "\n" for p in phrases), encoding="utf-8")


def read_embedding_file(path, phrases_path=None):
    """Read a binary table in file order; returns (vectors, phrases)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != EMBED_MAGIC:
            raise EmbeddingFormatError(f"bad magic {magic!r}, expected {EMBED_MAGIC!r}")
        count, dim = struct.unpack("<II", fh.read(8))
        if dim == 0:
            raise EmbeddingFormatError("embedding dimension 0")
        payload = fh.read(4 * count * dim)
        if len(payload) != 4 * count * dim:
            raise EmbeddingFormatError("truncated embedding payload")
        vectors = np.frombuffer(payload, dtype="<f4").reshape(count, dim).copy()
    source = Path(phrases_path) if phrases_path else sidecar_path(path)
    phrases = source.read_text(encoding="utf-8").splitlines()
    if len(phrases) != count:
        raise EmbeddingFormatError(
            f"{count} rows but {len(phrases)} sidecar phrases in {source}")
    return vectors, phrases


def load_embeddings(path, graph: KnowledgeGraph, phrases_path=None):
    """Load and permute rows into graph-id order, validating the vocabulary
    matches exactly (first 10 offenders reported on mismatch)."""
    vectors, phrases = read_embedding_file(path, phrases_path)
    row_of = {}
    duplicates = []
    for row, phrase in enumerate(phrases):
        if phrase in row_of:
            duplicates.append(phrase)
        row_of[phrase] = row
    if duplicates:
        raise VocabularyMismatch("duplicate", duplicates[:10], len(duplicates))
    missing = [p for p in graph.phrases if p not in row_of]
    if missing:
        raise VocabularyMismatch("missing", missing[:10], len(missing))
    if len(phrases) > graph.num_nodes:
        surplus = [p for p in phrases if p not in graph.phrase_to_id]
        raise VocabularyMismatch("surplus", surplus[:10], len(surplus))
    perm = np.array([row_of[p] for p in graph.phrases], dtype=np.int64)
    aligned = vectors[perm]
    if not np.isfinite(aligned).all():
        bad = np.where(~np.isfinite(aligned).all(axis=1))[0][:10]
        raise EmbeddingFormatError(
            f"non-finite values in rows {bad.tolist()}")
    return NodeEmbeddingTable(vectors=aligned)


# ---------------------------------------------------------------------------
# all-pairs similarity
# ---------------------------------------------------------------------------

def _normalized_rows(table):
    """Float64 row-normalized copy plus the boolean mask of usable rows."""
    norms = kernels.row_norms(table.vectors)
    usable = norms > 0.0
    unit = table.vectors.astype(np.float64)
    unit[usable] /= norms[usable, None]
    unit[~usable] = 0.0
    return unit, usable


def pairwise_similarity_edges(table, threshold, block=1024):
    """All pairs (i < j) with cosine >= threshold, via a blocked product.

    Zero-norm rows are excluded (counted on the result); the output is
    independent of ``block``.
    """
    if block < 1:
        raise ValueError(f"block must be >= 1, got {block}")
    unit, usable = _normalized_rows(table)
    excluded = int((~usable).sum())
    if excluded:
        log.warning("excluding %d zero-norm embedding rows from similarity", excluded)
    n = unit.shape[0]
    pair_i, pair_j, pair_s = [], [], []
    for i0 in range(0, n, block):
        i1 = min(i0 + block, n)
        for j0 in range(i0, n, block):
            j1 = min(j0 + block, n)
            tile = kernels.sim_tile(unit[i0:i1], unit[j0:j1])
            ii, jj = np.nonzero(tile >= threshold)
            gi, gj = ii + i0, jj + j0
            keep = (gi < gj) & usable[gi] & usable[gj]
            pair_i.append(gi[keep])
            pair_j.append(gj[keep])
            pair_s.append(tile[ii[keep], jj[keep]])
    i = np.concatenate(pair_i) if pair_i else np.zeros(0, dtype=np.int64)
    j = np.concatenate(pair_j) if pair_j else np.zeros(0, dtype=np.int64)
    s = np.concatenate(pair_s) if pair_s else np.zeros(0, dtype=np.float64)
    order = np.lexsort((j, i))
    pairs = np.stack([i[order], j[order]], axis=1).astype(np.int64)
    return SimEdgeSet(pairs=pairs, scores=s[order], threshold=float(threshold),
                      criterion="explicit", excluded_rows=excluded)


def _grid_counts(table, block):
    """counts[k] = number of usable pairs (i < j) with cosine >= k/100."""
    unit, usable = _normalized_rows(table)
    n = unit.shape[0]
    counts = np.zeros(GRID_POINTS, dtype=np.int64)
    grid = np.array([k / 100 for k in range(GRID_POINTS)])
    for i0 in range(0, n, block):
        i1 = min(i0 + block, n)
        for j0 in range(i0, n, block):
            j1 = min(j0 + block, n)
            tile = kernels.sim_tile(unit[i0:i1], unit[j0:j1])
            gi = np.arange(i0, i1)[:, None]
            gj = np.arange(j0, j1)[None, :]
            valid = (gi < gj) & usable[i0:i1, None] & usable[None, j0:j1]
            sims = tile[valid]
            for k in range(GRID_POINTS):
                counts[k] += int((sims >= grid[k]).sum())
    return counts


def select_threshold_cap(table, max_new_edges, block=1024):
    """Smallest grid threshold (2-decimal steps) whose pair count stays at
    or under the cap, i.e. the one admitting the most edges within it."""
    if max_new_edges <= 0:
        raise ValueError(f"max_new_edges must be positive, got {max_new_edges}")
    counts = _grid_counts(table, block)
    for k in range(GRID_POINTS):
        if counts[k] <= max_new_edges:
            return k / 100
    log.warning("even threshold 1.00 admits %d pairs, over the cap of %d",
                counts[-1], max_new_edges)
    return 1.0


def threshold_from_sample(similarities, spread_multiplier):
    """Mean + multiplier * standard deviation of sampled similarities."""
    sims = np.asarray(similarities, dtype=np.float64)
    mean = float(sims.mean())
    std = float(sims.std())
    if std == 0.0:
        raise ValueError("degenerate similarity distribution (zero spread)")
    return mean + spread_multiplier * std

def select_threshold_tail(table, sample_pairs=10_000_000, seed=0,
                          spread_multiplier=4.0):
    """Threshold from the upper tail of the similarity distribution,
    estimated on a uniform random sample of node pairs (or all pairs when
    there are fewer than ``sample_pairs``)."""
    unit, usable = _normalized_rows(table)
    rows = np.nonzero(usable)[0]
    n = rows.shape[0]
    total = n * (n - 1) // 2
    if total == 0:
        raise ValueError("need at least two usable rows")
    if total <= sample_pairs:
        iu, ju = np.triu_indices(n, k=1)
        a, b = rows[iu], rows[ju]
    else:
        rng = np.random.default_rng(seed)
        a = rows[rng.integers(0, n, size=sample_pairs)]
        b = rows[rng.integers(0, n, size=sample_pairs)]
        keep = a != b
        a, b = a[keep], b[keep]
    sims = kernels.rowwise_dot(unit[a], unit[b])
    return threshold_from_sample(sims, spread_multiplier)


def densify(graph, sim_edges):
    """Attach similarity pairs to the graph. They feed the encoder's
    message passing only; the set of scoreable edges is untouched."""
    pairs = sim_edges.pairs
    if pairs.size and (pairs.min() < 0 or pairs.max() >= graph.num_nodes):
        raise ValueError("similarity pair references an unknown node id")
    return graph.replace(sim_pairs=pairs.copy())
