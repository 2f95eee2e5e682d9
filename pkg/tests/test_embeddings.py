"""Embedding file I/O, blocked all-pairs similarity against a brute-force
double loop, threshold selection, and densification."""

import numpy as np
import pytest

from kgc.embeddings import (EmbeddingFormatError, NodeEmbeddingTable,
                            SimEdgeSet, VocabularyMismatch, densify,
                            load_embeddings, pairwise_similarity_edges,
                            read_embedding_file, select_threshold_cap,
                            select_threshold_tail, threshold_from_sample,
                            write_embedding_file)

from helpers import graph_from_edges


def brute_force_pairs(vectors, threshold):
    """Oracle: sequential-order normalize + double loop over all pairs."""
    n, dim = vectors.shape
    norms = []
    for i in range(n):
        acc = 0.0
        for k in range(dim):
            v = float(vectors[i, k])
            acc += v * v
        norms.append(np.sqrt(acc))
    unit = np.zeros((n, dim))
    for i in range(n):
        if norms[i] > 0:
            unit[i] = vectors[i].astype(np.float64) / norms[i]
    pairs, scores = [], []
    for i in range(n):
        for j in range(i + 1, n):
            if norms[i] == 0 or norms[j] == 0:
                continue
            acc = 0.0
            for k in range(dim):
                acc += unit[i, k] * unit[j, k]
            if acc >= threshold:
                pairs.append((i, j))
                scores.append(acc)
    return pairs, scores


def table_of(rows):
    return NodeEmbeddingTable(np.asarray(rows, dtype=np.float32))


def two_node_graph():
    return graph_from_edges([(0, 0, 1)], num_nodes=2, num_relations=1)


class TestFileFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        vectors = rng.normal(size=(5, 8)).astype(np.float32)
        phrases = [f"phrase {i}" for i in range(5)]
        path = tmp_path / "emb.bin"
        write_embedding_file(path, vectors, phrases)
        back, back_phrases = read_embedding_file(path)
        np.testing.assert_array_equal(back, vectors)
        assert back_phrases == phrases

    def test_load_aligns_rows_by_phrase(self, tmp_path):
        g = two_node_graph()
        vectors = np.array([[1, 0], [0, 1]], dtype=np.float32)
        path = tmp_path / "emb.bin"
        # sidecar order reversed relative to graph ids
        write_embedding_file(path, vectors, [g.phrases[1], g.phrases[0]])
        table = load_embeddings(path, g)
        np.testing.assert_array_equal(table.vectors,
                                      [[0, 1], [1, 0]])

    def test_surplus_rows_error(self, tmp_path):
        g = two_node_graph()
        path = tmp_path / "emb.bin"
        write_embedding_file(path, np.eye(3, 4, dtype=np.float32),
                             [g.phrases[0], g.phrases[1], "extra"])
        with pytest.raises(VocabularyMismatch, match="surplus.*extra"):
            load_embeddings(path, g)

    def test_missing_rows_error_lists_offenders(self, tmp_path):
        g = two_node_graph()
        path = tmp_path / "emb.bin"
        write_embedding_file(path, np.eye(1, 4, dtype=np.float32),
                             [g.phrases[0]])
        with pytest.raises(VocabularyMismatch, match="missing"):
            load_embeddings(path, g)

    def test_zero_dim_rejected(self, tmp_path):
        path = tmp_path / "emb.bin"
        path.write_bytes(b"KGE1" + (2).to_bytes(4, "little")
                         + (0).to_bytes(4, "little"))
        (tmp_path / "emb.bin.phrases").write_text("a\nb\n")
        with pytest.raises(EmbeddingFormatError, match="dimension 0"):
            read_embedding_file(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "emb.bin"
        path.write_bytes(b"XXXX")
        with pytest.raises(EmbeddingFormatError, match="magic"):
            read_embedding_file(path)

    def test_non_finite_rows_rejected(self, tmp_path):
        g = two_node_graph()
        vectors = np.array([[1, 0], [np.nan, 1]], dtype=np.float32)
        path = tmp_path / "emb.bin"
        write_embedding_file(path, vectors, [g.phrases[0], g.phrases[1]])
        with pytest.raises(EmbeddingFormatError, match="non-finite"):
            load_embeddings(path, g)


class TestPairwiseSimilarity:
    def test_identical_rows_have_similarity_one(self):
        table = table_of([[3.0, 4.0], [3.0, 4.0], [5.0, 0.0]])
        sim = pairwise_similarity_edges(table, 1.0)
        assert sim.pairs.tolist() == [[0, 1]]
        assert sim.scores[0] == 1.0

    def test_orthogonal_rows_below_threshold(self):
        table = table_of([[1.0, 0.0], [0.0, 1.0]])
        assert len(pairwise_similarity_edges(table, 0.5)) == 0

    @pytest.mark.parametrize("block", [1, 7, 64, 1024])
    def test_blocked_matches_brute_force_exactly(self, block):
        rng = np.random.default_rng(3)
        vectors = rng.normal(size=(50, 16)).astype(np.float32)
        table = NodeEmbeddingTable(vectors)
        threshold = 0.2
        got = pairwise_similarity_edges(table, threshold, block=block)
        want_pairs, want_scores = brute_force_pairs(vectors, threshold)
        assert got.pairs.tolist() == [list(p) for p in want_pairs]
        np.testing.assert_array_equal(got.scores, want_scores)  # bitwise

    def test_zero_norm_rows_excluded_and_counted(self):
        table = table_of([[1.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
        sim = pairwise_similarity_edges(table, 0.9)
        assert sim.excluded_rows == 1
        assert sim.pairs.tolist() == [[0, 2]]


class TestThresholdCap:
    def angle_table(self, groups):
        """Unit vectors clustered at angles; cos(delta) controls the
        cross-group similarities."""
        rows = []
        for angle, count in groups:
            rows += [[np.cos(angle), np.sin(angle)]] * count
        return table_of(rows)

    def test_cap_selects_maximal_admissible_grid_value(self):
        # within-group pairs score 1.0; cross pairs cos(0.1) ~ 0.995 and
        # cos(0.35) ~ 0.939 / cos(0.25) ~ 0.969
        table = self.angle_table([(0.0, 5), (0.1, 4), (0.35, 3)])
        counts = {}
        vectors = table.vectors
        for k in range(101):
            counts[k] = len(brute_force_pairs(vectors, k / 100)[0])
        for cap in (1, 5, 16, 40, 66, 1000):
            got = select_threshold_cap(table, cap)
            admissible = [k / 100 for k in range(101) if counts[k] <= cap]
            if admissible:
                assert got == min(admissible), (cap, got)
            else:  # over the cap even at 1.00: fall back to 1.00
                assert got == 1.0

    def test_cap_between_two_grid_counts(self):
        # 81 pairs at >= 0.99, 171 at >= 0.98 -> cap 100 picks 0.99
        table = self.angle_table([(0.0, 10), (0.17, 9)])
        within = 45 + 36  # 81 pairs at similarity 1.0
        cross = 90       # pairs at cos(0.17) ~ 0.9856
        counts = {k: len(brute_force_pairs(table.vectors, k / 100)[0])
                  for k in (98, 99)}
        assert counts[99] == within
        assert counts[98] == within + cross
        assert select_threshold_cap(table, 100) == 0.99

    def test_cap_larger_than_everything_hits_grid_floor(self):
        table = self.angle_table([(0.0, 3), (1.2, 3)])
        assert select_threshold_cap(table, 10 ** 6) == 0.0

    def test_overfull_even_at_one(self):
        table = self.angle_table([(0.0, 30)])  # 435 identical pairs
        assert select_threshold_cap(table, 10) == 1.0

    def test_monotone_in_cap(self):
        rng = np.random.default_rng(8)
        table = NodeEmbeddingTable(rng.normal(size=(40, 6)).astype(np.float32))
        taus = [select_threshold_cap(table, cap) for cap in (1, 10, 100, 1000)]
        assert taus == sorted(taus, reverse=True)

    def test_cap_validation(self):
        with pytest.raises(ValueError):
            select_threshold_cap(table_of([[1.0, 0.0]]), 0)


class TestThresholdTail:
    def test_sample_statistics_oracle(self):
        rng = np.random.default_rng(5)
        sims = rng.normal(0.5, 0.1, size=200_000)
        got = threshold_from_sample(sims, 4.0)
        assert got == pytest.approx(0.5 + 4 * 0.1, abs=0.01)
        assert got == pytest.approx(sims.mean() + 4 * sims.std(), rel=1e-12)

    def test_degenerate_distribution_rejected(self):
        table = table_of([[1.0, 0.0]] * 4)  # all similarities exactly 1
        with pytest.raises(ValueError, match="degenerate"):
            select_threshold_tail(table, seed=0)

    def test_deterministic_per_seed_and_subsampling(self):
        rng = np.random.default_rng(9)
        table = NodeEmbeddingTable(rng.normal(size=(60, 5)).astype(np.float32))
        a = select_threshold_tail(table, sample_pairs=500, seed=4)
        b = select_threshold_tail(table, sample_pairs=500, seed=4)
        assert a == b
        full = select_threshold_tail(table, seed=4)  # uses all pairs
        assert full == select_threshold_tail(table, seed=99)


class TestDensify:
    def base_graph(self):
        return graph_from_edges([(0, 0, 1), (1, 0, 2)], num_nodes=4,
                                num_relations=1)

    def empty_set(self):
        return SimEdgeSet(pairs=np.zeros((0, 2), dtype=np.int64),
                          scores=np.zeros(0), threshold=0.9,
                          criterion="explicit")

    def test_empty_set_leaves_graph_unchanged(self):
        g = self.base_graph()
        out = densify(g, self.empty_set())
        np.testing.assert_array_equal(out.message_edges(), g.message_edges())

    def test_one_pair_adds_two_arcs_and_no_scoreable_edges(self):
        g = self.base_graph()
        sim = SimEdgeSet(pairs=np.array([[0, 3]]), scores=np.array([0.97]),
                         threshold=0.9, criterion="explicit")
        out = densify(g, sim)
        assert out.message_edges().shape[0] == g.message_edges().shape[0] + 2
        np.testing.assert_array_equal(out.directed_training_edges(),
                                      g.directed_training_edges())
        arcs = out.sim_arcs()
        assert sorted(map(tuple, arcs)) == [
            (0, out.sim_relation_id, 3), (3, out.sim_relation_id, 0)]

    def test_adjacency_grows_by_two_per_pair(self):
        g = self.base_graph()
        sim = SimEdgeSet(pairs=np.array([[0, 2], [1, 3], [2, 3]]),
                         scores=np.ones(3), threshold=0.5,
                         criterion="explicit")
        out = densify(g, sim)
        assert out.message_edges().shape[0] == g.message_edges().shape[0] + 6

    def test_invalid_node_ids_rejected(self):
        sim = SimEdgeSet(pairs=np.array([[0, 99]]), scores=np.ones(1),
                         threshold=0.5, criterion="explicit")
        with pytest.raises(ValueError):
            densify(self.base_graph(), sim)
