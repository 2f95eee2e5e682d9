"""Relation-gated attentive graph convolution.

Each layer updates a node from its incoming messages:

    h_i' = tanh( sum_j c_ij * (W h_j)  +  W0 h_i )

where the coefficient c_ij normalizes exp(h_i . h_j) weighted by a learned
per-relation gate over the full incoming neighbor multiset (all relations
pooled, parallel edges counted separately). Folding the gate into the
normalization rather than applying it afterwards means a relation gated to
exactly zero drops out of the aggregation entirely: graphs densified with
similarity edges reproduce the undensified embeddings bit-for-bit when the
similarity gate is zero.

Messages flow along stored edge direction; inverse edges supply the
reverse direction. No dropout is applied inside the encoder.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels
from .graph import KnowledgeGraph
from .tensor import (Tensor, add, embedding_lookup, exp, matmul, mul, reshape,
                     rowdot, segment_normalize, segment_sum, tanh)


class EncoderNumericsError(RuntimeError):
    """Non-finite values appeared in an encoder layer."""

    def __init__(self, layer):
        self.layer = layer
        super().__init__(f"non-finite node states after encoder layer {layer}")


def glorot(rng, shape, dtype=np.float32, fans=None):
    """Glorot/Xavier uniform initialization."""
    if fans is None:
        fans = (shape[0], int(np.prod(shape[1:])))
    limit = math.sqrt(6.0 / sum(fans))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class GcnParams:
    """Trainable state of the encoder.

    ``node_table`` is the initial per-node embedding (sparse-gradient,
    since only sampled rows are touched per step); ``layer_proj`` and
    ``self_proj`` are the per-layer message/self projections; and
    ``relation_gate`` holds one scalar per directed relation including
    inverses and the similarity relation, initialized to 1.
    """

    def __init__(self, node_table, layer_proj, self_proj, relation_gate):
        if len(layer_proj) != len(self_proj):
            raise ValueError("layer_proj and self_proj must pair up")
        self.node_table = node_table
        self.layer_proj = list(layer_proj)
        self.self_proj = list(self_proj)
        self.relation_gate = relation_gate

    @property
    def num_layers(self):
        return len(self.layer_proj)

    @property
    def dim(self):
        return self.node_table.data.shape[1]

    @classmethod
    def create(cls, graph: KnowledgeGraph, dim, layers, rng, dtype=np.float32):
        node_table = Tensor(glorot(rng, (graph.num_nodes, dim), dtype),
                            requires_grad=True, sparse_grad=True)
        layer_proj = [Tensor(glorot(rng, (dim, dim), dtype), requires_grad=True)
                      for _ in range(layers)]
        self_proj = [Tensor(glorot(rng, (dim, dim), dtype), requires_grad=True)
                     for _ in range(layers)]
        gate = Tensor(np.ones(graph.num_message_relations, dtype=dtype),
                      requires_grad=True)
        return cls(node_table, layer_proj, self_proj, gate)

    def named_parameters(self):
        named = {"encoder/node_table": self.node_table,
                 "encoder/relation_gate": self.relation_gate}
        for i, (w, w0) in enumerate(zip(self.layer_proj, self.self_proj)):
            named[f"encoder/layer{i}/proj"] = w
            named[f"encoder/layer{i}/self_proj"] = w0
        return named

    def projection_parameters(self):
        """Weights subject to L2 regularization (tables and gates excluded)."""
        return list(self.layer_proj) + list(self.self_proj)


class GraphView:
    """A node subset with local ids, message edges, and scoreable edges.

    Message edges include inverse and similarity arcs; scoreable edges are
    the sampled base edges plus their inverses (similarity arcs are never
    scored).
    """

    def __init__(self, node_ids, message_arcs, scoreable, num_graph_nodes):
        self.node_ids = np.asarray(node_ids, dtype=np.int64)
        self.num_nodes = self.node_ids.shape[0]
        self._local = np.full(num_graph_nodes, -1, dtype=np.int64)
        self._local[self.node_ids] = np.arange(self.num_nodes)

        arcs = np.asarray(message_arcs, dtype=np.int64).reshape(-1, 3)
        src = self._local[arcs[:, 0]]
        dst = self._local[arcs[:, 2]]
        rel = arcs[:, 1]
        if arcs.size and (src.min() < 0 or dst.min() < 0):
            raise ValueError("message arc references a node outside the view")
        order = np.lexsort((src, rel, dst))
        self.src, self.rel, self.dst = src[order], rel[order], dst[order]

        sc = np.asarray(scoreable, dtype=np.int64).reshape(-1, 3)
        self.scoreable_e1 = self._local[sc[:, 0]]
        self.scoreable_rel = sc[:, 1]
        self.scoreable_e2 = self._local[sc[:, 2]]
        if sc.size and (self.scoreable_e1.min() < 0 or self.scoreable_e2.min() < 0):
            raise ValueError("scoreable edge references a node outside the view")

    @property
    def num_message_arcs(self):
        return self.src.shape[0]

    def local_ids(self, global_ids):
        local = self._local[np.asarray(global_ids, dtype=np.int64)]
        if local.size and local.min() < 0:
            missing = np.asarray(global_ids)[local < 0][:5]
            raise KeyError(f"nodes {missing.tolist()} are not in this view")
        return local

    def local_ids_or_skip(self, global_ids):
        """Local ids with -1 for nodes outside the view."""
        return self._local[np.asarray(global_ids, dtype=np.int64)]


def full_view(graph: KnowledgeGraph, include_sim=True):
    """View over every node with all directed training (+sim) arcs."""
    return GraphView(
        node_ids=np.arange(graph.num_nodes),
        message_arcs=graph.message_edges(include_sim=include_sim),
        scoreable=graph.directed_training_edges(),
        num_graph_nodes=graph.num_nodes,
    )


def sample_subgraph(graph: KnowledgeGraph, edge_budget, rng, include_sim=True):
    """Uniform random sample of base training edges plus their inverses;
    nodes restrict to sample endpoints, and similarity arcs are kept for
    every retained node pair that cleared the threshold. A budget at or
    above the base edge count returns the full view."""
    if edge_budget < 1:
        raise ValueError(f"edge_budget must be >= 1, got {edge_budget}")
    base = graph.splits["train"]
    if edge_budget >= base.shape[0]:
        return full_view(graph, include_sim=include_sim)
    pick = np.sort(rng.choice(base.shape[0], size=edge_budget, replace=False))
    sampled = base[pick]
    inv = np.stack([sampled[:, 2], sampled[:, 1] + graph.num_base_relations,
                    sampled[:, 0]], axis=1)
    directed = np.concatenate([sampled, inv], axis=0)
    node_ids = np.unique(np.concatenate([sampled[:, 0], sampled[:, 2]]))

    arcs = directed
    if include_sim and graph.sim_pairs.shape[0]:
        in_view = np.zeros(graph.num_nodes, dtype=bool)
        in_view[node_ids] = True
        p = graph.sim_pairs
        keep = in_view[p[:, 0]] & in_view[p[:, 1]]
        kept = p[keep]
        if kept.shape[0]:
            rel = np.full(kept.shape[0], graph.sim_relation_id, dtype=np.int64)
            sim_arcs = np.concatenate([
                np.stack([kept[:, 0], rel, kept[:, 1]], axis=1),
                np.stack([kept[:, 1], rel, kept[:, 0]], axis=1),
            ], axis=0)
            arcs = np.concatenate([directed, sim_arcs], axis=0)

    return GraphView(node_ids=node_ids, message_arcs=arcs, scoreable=directed,
                     num_graph_nodes=graph.num_nodes)


def encode(view: GraphView, params: GcnParams, train_flag=False,
           return_attention=False):
    """Run the stacked graph convolution over a view.

    Returns the final node-state tensor (num_view_nodes, dim); with
    ``return_attention`` also the list of per-layer (coefficients, dst)
    pairs. ``train_flag`` is accepted for interface symmetry; the encoder
    has no stochastic behavior.
    """
    del train_flag
    h = embedding_lookup(params.node_table, view.node_ids)
    attention = []
    gate_vals = params.relation_gate.data
    has_arcs = view.num_message_arcs > 0
    if has_arcs:
        live = gate_vals[view.rel] != 0.0

    for layer in range(params.num_layers):
        self_term = matmul(h, params.self_proj[layer])
        if has_arcs:
            projected = matmul(h, params.layer_proj[layer])
            msg = embedding_lookup(projected, view.src)
            logits = rowdot(embedding_lookup(h, view.dst),
                            embedding_lookup(h, view.src))
            # stability shift from gate-active arcs only; any finite shift
            # cancels in the normalization and carries no gradient
            shift = kernels.segment_max(logits.data[live], view.dst[live],
                                        view.num_nodes)
            weight = exp(add(logits, -shift[view.dst]))
            gated = mul(embedding_lookup(params.relation_gate, view.rel), weight)
            coef = segment_normalize(gated, view.dst, view.num_nodes)
            weighted = mul(msg, reshape(coef, (view.num_message_arcs, 1)))
            agg = segment_sum(weighted, view.dst, view.num_nodes)
            h = tanh(add(agg, self_term))
            if return_attention:
                attention.append((coef.data.copy(), view.dst))
        else:
            h = tanh(self_term)
            if return_attention:
                attention.append((np.zeros(0, dtype=h.data.dtype), view.dst))
        if not np.isfinite(h.data).all():
            raise EncoderNumericsError(layer)

    return (h, attention) if return_attention else h
