"""Knowledge-graph storage: vocabularies, typed edges, inverse relations,
splits, and graph statistics.

Node identity is the phrase string after NFC normalization and whitespace
trim; distinct phrases stay distinct nodes (no lowercasing or other
canonicalization). Every training edge (e1, r, e2) is mirrored by exactly
one inverse edge (e2, r_inv, e1); similarity edges live under the reserved
``sim`` relation, are stored as unordered pairs, and are expanded in both
directions for message passing only.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass
from pathlib import Path

import numpy as np

INVERSE_SUFFIX = "_inv"
SIM_RELATION = "sim"

GRAPH_CACHE_FORMAT = "kgc-graph/1"

SPLIT_NAMES = ("train", "dev", "test")


class GraphLoadError(ValueError):
    pass


def normalize_phrase(text):
    return unicodedata.normalize("NFC", text).strip()


@dataclass
class GraphStats:
    """Table-style statistics over base (non-inverse, non-sim) training edges."""
    num_nodes: int
    num_edges: int
    num_relations: int
    density: float
    avg_in_degree: float


def density(num_nodes, num_edges):
    """Edge count over the number of ordered node pairs."""
    if num_nodes < 2:
        return 0.0
    return num_edges / (num_nodes * (num_nodes - 1))


class KnowledgeGraph:
    """Vocabulary plus per-split edge arrays (base relation ids).

    Relation id layout: base relations take 0..R-1, the inverse of r is
    r + R, and the synthetic similarity relation is 2R. Split edge arrays
    store base ids only; inverse edges are materialized on demand.
    """

    def __init__(self, phrases, relation_names, splits, sim_pairs=None,
                 skipped_rows=0):
        self.phrases = list(phrases)
        self.phrase_to_id = {p: i for i, p in enumerate(self.phrases)}
        if len(self.phrase_to_id) != len(self.phrases):
            raise GraphLoadError("duplicate phrases in vocabulary")
        self.relation_names = list(relation_names)
        self._check_reserved_names()
        self.splits = {
            name: np.asarray(edges, dtype=np.int64).reshape(-1, 3)
            for name, edges in splits.items()
        }
        for name in SPLIT_NAMES:
            self.splits.setdefault(name, np.zeros((0, 3), dtype=np.int64))
        self.sim_pairs = (np.zeros((0, 2), dtype=np.int64) if sim_pairs is None
                          else np.asarray(sim_pairs, dtype=np.int64).reshape(-1, 2))
        self.skipped_rows = skipped_rows

    def _check_reserved_names(self):
        directed = list(self.relation_names)
        directed += [r + INVERSE_SUFFIX for r in self.relation_names]
        directed.append(SIM_RELATION)
        if len(set(directed)) != len(directed):
            clash = sorted(
                {n for n in directed if directed.count(n) > 1})
            raise GraphLoadError(
                f"relation names collide with reserved forms: {clash}")

    # -- vocabulary ---------------------------------------------------------

    @property
    def num_nodes(self):
        return len(self.phrases)

    @property
    def num_base_relations(self):
        return len(self.relation_names)

    @property
    def num_scoring_relations(self):
        """Base plus inverse relations (what the decoder embeds)."""
        return 2 * self.num_base_relations

    @property
    def num_message_relations(self):
        """Scoring relations plus the similarity relation."""
        return self.num_scoring_relations + 1

    @property
    def sim_relation_id(self):
        return self.num_scoring_relations

    def inverse_relation(self, rel_id):
        r = self.num_base_relations
        if rel_id >= 2 * r:
            raise ValueError(f"relation {rel_id} has no inverse")
        return rel_id + r if rel_id < r else rel_id - r

    def relation_name(self, rel_id):
        r = self.num_base_relations
        if rel_id < r:
            return self.relation_names[rel_id]
        if rel_id < 2 * r:
            return self.relation_names[rel_id - r] + INVERSE_SUFFIX
        if rel_id == 2 * r:
            return SIM_RELATION
        raise ValueError(f"unknown relation id {rel_id}")

    # -- edge views ---------------------------------------------------------

    def directed_training_edges(self):
        """Base training edges plus their inverses: shape (2V, 3)."""
        base = self.splits["train"]
        inv = np.stack(
            [base[:, 2], base[:, 1] + self.num_base_relations, base[:, 0]],
            axis=1)
        return np.concatenate([base, inv], axis=0)

    def sim_arcs(self):
        """Similarity pairs expanded to directed arcs, both ways."""
        p = self.sim_pairs
        if p.shape[0] == 0:
            return np.zeros((0, 3), dtype=np.int64)
        rel = np.full(p.shape[0], self.sim_relation_id, dtype=np.int64)
        fwd = np.stack([p[:, 0], rel, p[:, 1]], axis=1)
        bwd = np.stack([p[:, 1], rel, p[:, 0]], axis=1)
        return np.concatenate([fwd, bwd], axis=0)

    def message_edges(self, include_sim=True):
        """Edges the encoder passes messages along (inverses, optionally sim)."""
        directed = self.directed_training_edges()
        if include_sim and self.sim_pairs.shape[0]:
            directed = np.concatenate([directed, self.sim_arcs()], axis=0)
        return directed

    def training_targets(self):
        """(entity, directed relation) -> array of gold targets, train only."""
        index = {}
        for e1, rel, e2 in self.directed_training_edges():
            index.setdefault((int(e1), int(rel)), set()).add(int(e2))
        return {k: np.array(sorted(v), dtype=np.int64) for k, v in index.items()}

    def replace(self, **kwargs):
        """Copy with some fields swapped out (splits, sim_pairs, ...)."""
        fields = dict(
            phrases=self.phrases,
            relation_names=self.relation_names,
            splits={k: v.copy() for k, v in self.splits.items()},
            sim_pairs=self.sim_pairs.copy(),
            skipped_rows=self.skipped_rows,
        )
        fields.update(kwargs)
        return KnowledgeGraph(**fields)

    # -- persistence --------------------------------------------------------

    def save(self, path):
        payload = {
            "format": GRAPH_CACHE_FORMAT,
            "phrases": self.phrases,
            "relations": self.relation_names,
            "splits": {k: v.tolist() for k, v in self.splits.items()},
            "sim_pairs": self.sim_pairs.tolist(),
            "skipped_rows": self.skipped_rows,
        }
        Path(path).write_text(json.dumps(payload), encoding="utf-8")

    @classmethod
    def load(cls, path):
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("format") != GRAPH_CACHE_FORMAT:
            raise GraphLoadError(
                f"unsupported graph cache format {payload.get('format')!r}")
        return cls(payload["phrases"], payload["relations"], payload["splits"],
                   sim_pairs=payload["sim_pairs"],
                   skipped_rows=payload.get("skipped_rows", 0))


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _parse_rows(path):
    """Yield (lineno, relation, source, target) from a TSV tuple file."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):  # optional trailing weight column
                raise GraphLoadError(
                    f"{path}:{lineno}: expected 3 or 4 tab-separated fields, "
                    f"got {len(parts)}")
            rel = parts[0].strip()
            if not rel:
                raise GraphLoadError(f"{path}:{lineno}: empty relation name")
            yield lineno, rel, normalize_phrase(parts[1]), normalize_phrase(parts[2])


def load_tuples(train_path, dev_path=None, test_path=None):
    """Build a KnowledgeGraph from TSV files of
    ``relation<TAB>source<TAB>target[<TAB>weight]`` rows.

    The vocabulary spans all provided splits; rows with an empty phrase are
    dropped and counted in ``skipped_rows``.
    """
    phrases, phrase_ids = [], {}
    relations, relation_ids = [], {}
    splits = {}
    skipped = 0

    def node_id(phrase):
        if phrase not in phrase_ids:
            phrase_ids[phrase] = len(phrases)
            phrases.append(phrase)
        return phrase_ids[phrase]

    def rel_id(name):
        if name not in relation_ids:
            relation_ids[name] = len(relations)
            relations.append(name)
        return relation_ids[name]

    for split, path in (("train", train_path), ("dev", dev_path), ("test", test_path)):
        edges = []
        if path is not None:
            for _, rel, src, dst in _parse_rows(path):
                if not src or not dst:
                    skipped += 1
                    continue
                edges.append((node_id(src), rel_id(rel), node_id(dst)))
        splits[split] = np.asarray(edges, dtype=np.int64).reshape(-1, 3)

    return KnowledgeGraph(phrases, relations, splits, skipped_rows=skipped)


_DIR_CANDIDATES = {
    "train": ("train.txt", "train.tsv", "train100k.txt"),
    "dev": ("dev.txt", "dev.tsv", "valid.txt"),
    "test": ("test.txt", "test.tsv"),
}


def load_dataset_dir(dirpath):
    """Load a dataset directory by filename convention (train/dev/test)."""
    dirpath = Path(dirpath)
    found = {}
    for split, names in _DIR_CANDIDATES.items():
        for name in names:
            if (dirpath / name).exists():
                found[split] = dirpath / name
                break
    if "train" not in found:
        raise GraphLoadError(f"no training file found under {dirpath}")
    return load_tuples(found["train"], found.get("dev"), found.get("test"))


# ---------------------------------------------------------------------------
# splitting, statistics, density control
# ---------------------------------------------------------------------------

def make_random_split(graph, ratios=(0.8, 0.1, 0.1), seed=0):
    """Pool every edge of every split and re-split at the given ratios.

    After the random assignment, any dev/test edge touching a node unseen
    in training is moved into train, so each node occurs in at least one
    training edge.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negatives summing to 1, got {ratios}")
    pool = np.concatenate([graph.splits[name] for name in SPLIT_NAMES], axis=0)
    rng = np.random.default_rng(seed)
    pool = pool[rng.permutation(pool.shape[0])]

    n = pool.shape[0]
    n_dev = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    n_train = n - n_dev - n_test
    train = list(map(tuple, pool[:n_train]))
    held = {"dev": list(map(tuple, pool[n_train:n_train + n_dev])),
            "test": list(map(tuple, pool[n_train + n_dev:]))}

    seen = np.zeros(graph.num_nodes, dtype=bool)
    for e1, _, e2 in train:
        seen[e1] = seen[e2] = True
    kept = {"dev": [], "test": []}
    for name in ("dev", "test"):
        for e1, rel, e2 in held[name]:
            if seen[e1] and seen[e2]:
                kept[name].append((e1, rel, e2))
            else:
                train.append((e1, rel, e2))
                seen[e1] = seen[e2] = True

    return graph.replace(splits={"train": np.asarray(train, dtype=np.int64).reshape(-1, 3),
                                 "dev": np.asarray(kept["dev"], dtype=np.int64).reshape(-1, 3),
                                 "test": np.asarray(kept["test"], dtype=np.int64).reshape(-1, 3)},
                         sim_pairs=np.zeros((0, 2), dtype=np.int64))


def compute_stats(graph):
    """Statistics over base training edges (the convention the usual
    dataset tables use). ``avg_in_degree`` is edges/nodes; other counting
    conventions exist, so callers should treat it as informational."""
    train = graph.splits["train"]
    nodes = np.unique(np.concatenate([train[:, 0], train[:, 2]])) if train.size \
        else np.zeros(0, dtype=np.int64)
    n, v = int(nodes.shape[0]), int(train.shape[0])
    return GraphStats(
        num_nodes=n,
        num_edges=v,
        num_relations=graph.num_base_relations,
        density=density(n, v),
        avg_in_degree=v / n if n else 0.0,
    )


def drop_edges_to_density(graph, target_density, seed=0, tolerance=0.02):
    """Uniformly subsample base training edges down to a target density.

    The node count is held at the pre-drop training-node count, making
    density linear in the kept-edge count (halving the density halves the
    edges); recounting nodes over the surviving edges would put low
    targets out of reach entirely, since shedding edges also sheds nodes.
    Inverse edges follow their base edge implicitly (derived views).
    """
    stats = compute_stats(graph)
    if target_density > stats.density * (1 + 1e-12):
        raise ValueError(
            f"target density {target_density:g} exceeds current {stats.density:g}")
    train = graph.splits["train"]
    keep = int(round(target_density / stats.density * train.shape[0]))
    keep = max(1, min(keep, train.shape[0]))
    achieved = density(stats.num_nodes, keep)
    if abs(achieved - target_density) > tolerance * target_density:
        raise RuntimeError(
            f"could not reach density {target_density:g} within {tolerance:.0%} "
            f"(closest achievable {achieved:g}; the graph is too small for "
            "this granularity)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(train.shape[0])
    # keep rows in their original file order for reproducible ids
    sub = train[np.sort(order[:keep])]
    return graph.replace(splits={**{k: v.copy() for k, v in graph.splits.items()},
                                 "train": sub})
