"""Tuple scorers: the convolutional decoder plus two bilinear baselines.

The convolutional decoder stacks the source-node representation with a
learned relation embedding of the same width, runs a bank of two-row 1-D
kernels over the stack (zero-padded so the feature maps keep the input
width), flattens, projects back to representation width, and scores every
candidate with a dot product through a sigmoid. Scoring all candidates is
a single matrix product.
"""

from __future__ import annotations

import numpy as np

from .encoder import glorot
from .tensor import (Tensor, ShapeMismatch, conv1d_two_row, dropout,
                     embedding_lookup, matmul, mul, narrow, reshape, sigmoid,
                     stack)


class ConvTransEParams:
    """Relation table, convolution kernel bank, and output projection.

    Relation embeddings share the node-representation width so the two can
    be stacked; the kernel width must be odd so feature maps keep that
    width under symmetric zero padding.
    """

    def __init__(self, relation_table, kernels, proj, dropout_rate):
        if kernels.data.shape[2] % 2 == 0:
            raise ValueError(
                f"kernel width must be odd, got {kernels.data.shape[2]}")
        if relation_table.data.shape[1] != proj.data.shape[1]:
            raise ShapeMismatch("convtranse_params", relation_table.data.shape,
                                proj.data.shape)
        self.relation_table = relation_table
        self.kernels = kernels
        self.proj = proj
        self.dropout_rate = dropout_rate

    @property
    def dim(self):
        return self.relation_table.data.shape[1]

    @property
    def channels(self):
        return self.kernels.data.shape[0]

    @classmethod
    def create(cls, num_relations, dim, channels, width, dropout_rate, rng,
               dtype=np.float32):
        rel = Tensor(glorot(rng, (num_relations, dim), dtype), requires_grad=True)
        kern = Tensor(glorot(rng, (channels, 2, width), dtype,
                             fans=(2 * width, channels * width)),
                      requires_grad=True)
        proj = Tensor(glorot(rng, (channels * dim, dim), dtype), requires_grad=True)
        return cls(rel, kern, proj, dropout_rate)

    def named_parameters(self):
        return {"decoder/relation_table": self.relation_table,
                "decoder/kernels": self.kernels,
                "decoder/proj": self.proj}

    def projection_parameters(self):
        return [self.kernels, self.proj]


def convtranse_score_all(e1_repr, rel_ids, candidates, params, train=False,
                         rng=None):
    """Probability of every candidate completing each (source, relation)
    prefix: shape (batch, num_candidates), sigmoid already applied.

    Dropout (train mode only) hits the stacked input, the feature maps,
    and the projected query.
    """
    if e1_repr.data.shape[1] != params.dim:
        raise ShapeMismatch("convtranse_score_all", e1_repr.data.shape,
                            params.relation_table.data.shape)
    if candidates.data.shape[1] != params.dim:
        raise ShapeMismatch("convtranse_score_all", candidates.data.shape,
                            params.relation_table.data.shape)
    rel = embedding_lookup(params.relation_table, rel_ids)
    grid = stack([e1_repr, rel], axis=1)  # (B, 2, dim)
    grid = dropout(grid, params.dropout_rate, train, rng)
    feature_maps = conv1d_two_row(grid, params.kernels)  # (B, C, dim)
    feature_maps = dropout(feature_maps, params.dropout_rate, train, rng)
    flat = reshape(feature_maps,
                   (e1_repr.data.shape[0], params.channels * params.dim))
    query = matmul(flat, params.proj)  # (B, dim)
    query = dropout(query, params.dropout_rate, train, rng)
    return sigmoid(matmul(query, candidates, transpose_b=True))


class BilinearParams:
    """Entity and relation embedding tables for the bilinear baselines."""

    def __init__(self, entities, relations):
        self.entities = entities
        self.relations = relations

    @property
    def dim(self):
        return self.entities.data.shape[1]

    @classmethod
    def create(cls, num_entities, num_relations, dim, rng, dtype=np.float32):
        ent = Tensor(glorot(rng, (num_entities, dim), dtype), requires_grad=True)
        rel = Tensor(glorot(rng, (num_relations, dim), dtype), requires_grad=True)
        return cls(ent, rel)

    def named_parameters(self):
        return {"decoder/entities": self.entities,
                "decoder/relations": self.relations}

    def projection_parameters(self):
        return []


def distmult_score_all(e1_repr, rel_ids, candidates, params):
    """Bilinear score with a diagonal relation matrix, one matrix product
    over all candidates. Raw scores; the loss applies the sigmoid."""
    rel = embedding_lookup(params.relations, rel_ids)
    return matmul(mul(e1_repr, rel), candidates, transpose_b=True)


def complex_score_all(e1_repr, rel_ids, candidates, params):
    """Tri-linear product over complex-valued embeddings stored as
    (real half, imaginary half) along the feature axis."""
    dim = e1_repr.data.shape[1]
    if dim % 2:
        raise ValueError(f"complex embeddings need an even dimension, got {dim}")
    half = dim // 2
    rel = embedding_lookup(params.relations, rel_ids)

    def halves(t):
        return narrow(t, 1, 0, half), narrow(t, 1, half, half)

    e1r, e1i = halves(e1_repr)
    wr, wi = halves(rel)
    cr, ci = halves(candidates)
    # Re(sum e1 * w * conj(e2)) expanded into four real products
    out = matmul(mul(e1r, wr), cr, transpose_b=True)
    out = out + matmul(mul(e1i, wr), ci, transpose_b=True)
    out = out + matmul(mul(e1r, wi), ci, transpose_b=True)
    return out + mul(matmul(mul(e1i, wi), cr, transpose_b=True), -1.0)
