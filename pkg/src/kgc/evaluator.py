"""Filtered ranking evaluation, the random-permutation diagnostic, and the
density-ablation harness.

A scorer is anything with ``num_candidates`` and a
``scores(e1_ids, rel_ids, graph_perm=None) -> (batch, num_candidates)``
method over all graph nodes (``trainer.ModelScorer`` adapts a trained
model; tests plug in synthetic scorers). Ranking follows the filtered
protocol: every other entity known to complete the same (entity, relation)
pair anywhere in train/dev/test is removed before the gold target is
ranked. Ties get the mean rank of their tie group, so constant scorers
cannot inflate the metrics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .graph import KnowledgeGraph, compute_stats, drop_edges_to_density

logger = logging.getLogger(__name__)


class FilterIndex:
    """(entity, directed relation) -> all valid targets across every split."""

    def __init__(self, graph: KnowledgeGraph):
        num_base = graph.num_base_relations
        index = {}
        for split in ("train", "dev", "test"):
            for e1, rel, e2 in graph.splits[split]:
                index.setdefault((int(e1), int(rel)), set()).add(int(e2))
                index.setdefault((int(e2), int(rel) + num_base), set()).add(int(e1))
        self._index = {k: np.array(sorted(v), dtype=np.int64)
                       for k, v in index.items()}

    def valid_targets(self, entity, relation):
        return self._index.get((int(entity), int(relation)),
                               np.zeros(0, dtype=np.int64))


def filtered_rank(scores, gold_id, filter_ids):
    """Rank of the gold candidate once the filtered ids are removed.

    rank = 1 + |better| + |ties|/2 (mean rank over the tie group). The
    filter set must not contain the gold id itself.
    """
    scores = np.asarray(scores)
    filter_ids = np.asarray(filter_ids, dtype=np.int64)
    if not 0 <= gold_id < scores.shape[0]:
        raise ValueError(f"gold id {gold_id} outside candidate set "
                         f"of {scores.shape[0]}")
    if filter_ids.size and (filter_ids == gold_id).any():
        raise ValueError("filter set contains the gold id")
    keep = np.ones(scores.shape[0], dtype=bool)
    keep[filter_ids] = False
    gold_score = scores[gold_id]
    kept = scores[keep]
    better = int((kept > gold_score).sum())
    ties = int((kept == gold_score).sum()) - 1  # gold itself always kept
    return 1.0 + better + ties / 2.0


@dataclass
class Metrics:
    mrr: float
    hits1: float
    hits3: float
    hits10: float

    @classmethod
    def from_ranks(cls, ranks):
        ranks = np.asarray(ranks, dtype=np.float64)
        return cls(mrr=float((1.0 / ranks).mean()),
                   hits1=float((ranks <= 1).mean()),
                   hits3=float((ranks <= 3).mean()),
                   hits10=float((ranks <= 10).mean()))


@dataclass
class RankingReport:
    forward: Metrics
    backward: Metrics
    averaged: Metrics
    forward_ranks: np.ndarray
    backward_ranks: np.ndarray

    def table_row(self):
        """Percent-scaled MRR / HITS@1 / @3 / @10, as results tables print."""
        m = self.averaged
        return (f"MRR {100 * m.mrr:6.2f} | HITS@1 {100 * m.hits1:6.2f} | "
                f"HITS@3 {100 * m.hits3:6.2f} | HITS@10 {100 * m.hits10:6.2f}")


def _direction_ranks(scorer, queries, filter_index, batch_size, perm_rng):
    ranks = np.zeros(len(queries), dtype=np.float64)
    for lo in range(0, len(queries), batch_size):
        chunk = queries[lo:lo + batch_size]
        e1 = np.array([q[0] for q in chunk], dtype=np.int64)
        rel = np.array([q[1] for q in chunk], dtype=np.int64)
        perm = perm_rng.permutation(len(chunk)) if perm_rng is not None else None
        scores = scorer.scores(e1, rel, graph_perm=perm)
        for row, (e1_id, rel_id, gold) in enumerate(chunk):
            valid = filter_index.valid_targets(e1_id, rel_id)
            filtered = valid[valid != gold]
            ranks[lo + row] = filtered_rank(scores[row], gold, filtered)
    return ranks


def evaluate(scorer, graph: KnowledgeGraph, split, batch_size=128,
             perm_rng=None):
    """Filtered MRR/HITS over a split, both query directions averaged.

    Forward queries rank the target given (source, relation); backward
    queries rank the source given (target, inverse relation).
    """
    edges = graph.splits[split]
    if edges.shape[0] == 0:
        raise ValueError(f"split {split!r} is empty")
    num_base = graph.num_base_relations
    filter_index = FilterIndex(graph)
    fwd_queries = [(int(e1), int(rel), int(e2)) for e1, rel, e2 in edges]
    bwd_queries = [(int(e2), int(rel) + num_base, int(e1))
                   for e1, rel, e2 in edges]
    fwd = _direction_ranks(scorer, fwd_queries, filter_index, batch_size, perm_rng)
    bwd = _direction_ranks(scorer, bwd_queries, filter_index, batch_size, perm_rng)
    m_fwd, m_bwd = Metrics.from_ranks(fwd), Metrics.from_ranks(bwd)
    averaged = Metrics(mrr=(m_fwd.mrr + m_bwd.mrr) / 2,
                       hits1=(m_fwd.hits1 + m_bwd.hits1) / 2,
                       hits3=(m_fwd.hits3 + m_bwd.hits3) / 2,
                       hits10=(m_fwd.hits10 + m_bwd.hits10) / 2)
    return RankingReport(forward=m_fwd, backward=m_bwd, averaged=averaged,
                         forward_ranks=fwd, backward_ranks=bwd)


def permutation_test(scorer, graph, split, seed=0, batch_size=128):
    """MRR drop when graph-side representations are shuffled within each
    inference batch. Returns (delta_mrr, base_report, shuffled_report)."""
    if not getattr(scorer, "has_graph_component", False):
        raise ValueError(
            "permutation test needs a model with graph-side representations")
    base = evaluate(scorer, graph, split, batch_size)
    rng = np.random.default_rng(seed)
    shuffled = evaluate(scorer, graph, split, batch_size, perm_rng=rng)
    return shuffled.averaged.mrr - base.averaged.mrr, base, shuffled


def density_ablation(graph, densities, config, text_table=None, out_csv=None,
                     eval_split="dev"):
    """Retrain from scratch at each target density (descending) and
    evaluate; returns [(density, RankingReport)] and optionally writes a
    CSV of density versus metrics."""
    densities = [float(d) for d in densities]
    if densities != sorted(densities, reverse=True):
        raise ValueError("densities must be sorted in descending order")
    current = compute_stats(graph).density
    if densities and densities[0] > current * (1 + 1e-12):
        raise ValueError(f"density {densities[0]:g} exceeds current {current:g}")

    from .trainer import ModelScorer, train  # deferred: trainer imports us

    results = []
    for target in densities:
        reduced = drop_edges_to_density(graph, target, seed=config.seed)
        outcome = train(reduced, config, text_table=text_table)
        report = evaluate(ModelScorer(outcome.model, reduced), reduced,
                          eval_split)
        logger.info("density %.3g -> %s", target, report.table_row())
        results.append((target, report))

    if out_csv is not None:
        lines = ["density,mrr,hits1,hits3,hits10"]
        for target, report in results:
            m = report.averaged
            lines.append(f"{target:.10g},{m.mrr:.8f},{m.hits1:.8f},"
                         f"{m.hits3:.8f},{m.hits10:.8f}")
        with open(out_csv, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    return results
