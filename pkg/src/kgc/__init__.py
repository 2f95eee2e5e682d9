"""Link prediction for sparse phrase-node knowledge graphs.

Pipeline: load a tuple dataset (`graph`), optionally attach externally
produced node text embeddings (`embeddings`) and densify the message graph
with similarity edges, encode nodes with a relation-gated graph
convolution (`encoder`), score tuples with a convolutional or bilinear
decoder (`decoder`), train with progressive text masking (`trainer`), and
evaluate with filtered ranking metrics (`evaluator`).
"""

__version__ = "0.1.0"

from .graph import KnowledgeGraph, compute_stats, load_dataset_dir, load_tuples
from .embeddings import (NodeEmbeddingTable, SimEdgeSet, densify,
                         load_embeddings, pairwise_similarity_edges,
                         select_threshold_cap, select_threshold_tail,
                         write_embedding_file)
from .trainer import CompletionModel, ModelScorer, TrainConfig, train
from .evaluator import RankingReport, evaluate, permutation_test

__all__ = [
    "KnowledgeGraph", "compute_stats", "load_dataset_dir", "load_tuples",
    "NodeEmbeddingTable", "SimEdgeSet", "densify", "load_embeddings",
    "pairwise_similarity_edges", "select_threshold_cap",
    "select_threshold_tail", "write_embedding_file",
    "CompletionModel", "ModelScorer", "TrainConfig", "train",
    "RankingReport", "evaluate", "permutation_test",
    "__version__",
]
