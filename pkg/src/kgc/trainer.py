"""Training orchestration: model variants, progressive masking of text
features, the one-vs-all smoothed cross-entropy objective, and the
epoch loop with dev-set checkpoint selection.

Model variants (the rows of the usual results table):

    convtranse               learned node table, convolutional decoder
    gcn_convtranse           graph-convolution node states
    sim_gcn_convtranse       + similarity-densified message graph
    bert_convtranse          externally produced text embeddings only
    gcn_bert_convtranse      [graph state ; text embedding] concatenation
    sim_gcn_bert_convtranse  concatenation over the densified graph
    distmult / complex       bilinear baselines

Text embeddings are never trained; during training their dimensions are
progressively unmasked (all hidden at epoch 0, all visible from the
masking horizon on) so the decoder cannot lean on them exclusively while
graph states are still uninformative. At inference text features are
always fully visible.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .decoder import (BilinearParams, ConvTransEParams, complex_score_all,
                      convtranse_score_all, distmult_score_all)
from .encoder import GcnParams, encode, full_view, sample_subgraph
from .evaluator import evaluate
from .graph import KnowledgeGraph
from .optim import Adam, clip_gradient_norm
from .tensor import (Tensor, add, cast, clamp, concat, embedding_lookup, log,
                     matmul, mul, reduce_sum, sigmoid)

logger = logging.getLogger(__name__)

CONFIG_FORMAT = "kgc-config/1"

PROB_FLOOR = 1e-7  # scores are clamped into [floor, 1 - floor] before log


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, batch):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")


@dataclass(frozen=True)
class Variant:
    name: str
    decoder: str          # convtranse | distmult | complex
    graph_source: bool    # node table (optionally convolved) feeds e1
    text_source: bool     # text embeddings feed e1
    uses_gcn: bool        # message-passing layers > 0
    uses_sim: bool        # similarity arcs join the message graph


VARIANTS = {
    "convtranse": Variant("convtranse", "convtranse", True, False, False, False),
    "gcn_convtranse": Variant("gcn_convtranse", "convtranse", True, False, True, False),
    "sim_gcn_convtranse": Variant("sim_gcn_convtranse", "convtranse", True, False, True, True),
    "bert_convtranse": Variant("bert_convtranse", "convtranse", False, True, False, False),
    "gcn_bert_convtranse": Variant("gcn_bert_convtranse", "convtranse", True, True, True, False),
    "sim_gcn_bert_convtranse": Variant("sim_gcn_bert_convtranse", "convtranse", True, True, True, True),
    "distmult": Variant("distmult", "distmult", False, False, False, False),
    "complex": Variant("complex", "complex", False, False, False, False),
}


@dataclass
class TrainConfig:
    """Every knob of a training run; serializable to/from JSON."""
    variant: str = "gcn_convtranse"
    epochs: int = 200
    lr: float = 1e-4
    l2_weight: float = 0.1
    label_smoothing: float = 0.1
    grad_clip: float = 1.0
    dropout: float = 0.2
    subgraph_edges: int = 30000
    eval_every: int = 10
    mask_epochs: int = 100
    mask_direction: str = "visible_ramp"
    gcn_layers: int = 2
    embed_dim: int = 200
    channels: int = 500
    kernel_width: int = 5
    batch_size: int = 128
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    precision: str = "float32"
    seed: int = 0

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one "
                              f"of {sorted(VARIANTS)}")
        checks = [
            (self.epochs >= 1, "epochs >= 1"),
            (self.lr > 0, "lr > 0"),
            (self.l2_weight >= 0, "l2_weight >= 0"),
            (0 <= self.label_smoothing < 1, "label_smoothing in [0, 1)"),
            (self.grad_clip > 0, "grad_clip > 0"),
            (0 <= self.dropout < 1, "dropout in [0, 1)"),
            (self.subgraph_edges >= 1, "subgraph_edges >= 1"),
            (self.eval_every >= 1, "eval_every >= 1"),
            (self.mask_epochs >= 1, "mask_epochs >= 1"),
            (self.mask_direction in ("visible_ramp", "masked_ramp"),
             "mask_direction is visible_ramp or masked_ramp"),
            (self.gcn_layers >= 1, "gcn_layers >= 1"),
            (self.embed_dim >= 1, "embed_dim >= 1"),
            (self.channels >= 1, "channels >= 1"),
            (self.kernel_width >= 1 and self.kernel_width % 2 == 1,
             "kernel_width odd and >= 1"),
            (self.batch_size >= 1, "batch_size >= 1"),
            (self.precision in ("float32", "float64"),
             "precision is float32 or float64"),
        ]
        for ok, what in checks:
            if not ok:
                raise ConfigError(f"config requires {what}")
        return self

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def to_json(self):
        return json.dumps({"format": CONFIG_FORMAT, **asdict(self)}, indent=2)

    @classmethod
    def from_json(cls, text):
        payload = json.loads(text)
        if payload.pop("format", CONFIG_FORMAT) != CONFIG_FORMAT:
            raise ConfigError("unsupported config format")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**payload).validate()


# ---------------------------------------------------------------------------
# progressive masking
# ---------------------------------------------------------------------------

@dataclass
class MaskSchedule:
    """Visible fraction of text dimensions as a function of the epoch:
    0 at epoch 0, epoch/horizon until the horizon, then pinned at 1.
    ``masked_ramp`` runs the schedule in reverse for ablations."""
    horizon: int = 100
    direction: str = "visible_ramp"

    def visible_fraction(self, epoch):
        frac = min(epoch / self.horizon, 1.0)
        return frac if self.direction == "visible_ramp" else 1.0 - frac


def mask_vector(dim, epoch, schedule, rng, dtype=np.float32):
    """0/1 vector with exactly round(visible_fraction * dim) ones, the
    visible subset drawn uniformly without replacement."""
    visible = int(round(schedule.visible_fraction(epoch) * dim))
    mask = np.zeros(dim, dtype=dtype)
    if visible:
        mask[rng.choice(dim, size=visible, replace=False)] = 1.0
    return mask


def progressive_mask(text_repr, epoch, schedule, rng):
    """Apply a fresh dimension mask to a (rows, dim) text block."""
    return text_repr * mask_vector(text_repr.shape[1], epoch, schedule, rng,
                                   dtype=text_repr.dtype)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def training_loss(scores, gold_multi_hot, smoothing, l2_weight=0.0,
                  l2_params=()):
    """Mean binary cross-entropy of post-sigmoid scores against smoothed
    one-vs-all targets, plus an L2 penalty on the given projection weights.

    Targets smooth as y' = (1 - eps) * y + eps / num_candidates. The loss
    always computes in float64 so the probability clamp bounds stay
    representable under float32 training.
    """
    gold = np.asarray(gold_multi_hot, dtype=np.float64)
    if gold.shape != scores.data.shape:
        raise ValueError(
            f"gold targets shape {gold.shape} != scores shape {scores.data.shape}")
    n_candidates = gold.shape[-1]
    y = (1.0 - smoothing) * gold + smoothing / n_candidates

    p = clamp(cast(scores, np.float64), PROB_FLOOR, 1.0 - PROB_FLOOR)
    log_hit = mul(log(p), y)
    log_miss = mul(log(add(mul(p, -1.0), 1.0)), 1.0 - y)
    loss = mul(reduce_sum(add(log_hit, log_miss)), -1.0 / gold.size)
    for theta in l2_params:
        penalty = reduce_sum(mul(cast(theta, np.float64), cast(theta, np.float64)))
        loss = add(loss, mul(penalty, float(l2_weight)))
    return loss


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------

class CompletionModel:
    """A variant's parameters plus the representation/scoring pipeline."""

    def __init__(self, config: TrainConfig, graph: KnowledgeGraph,
                 text_table=None, rng=None):
        config.validate()
        self.config = config
        self.graph = graph
        self.variant = VARIANTS[config.variant]
        self.dtype = config.dtype
        rng = rng or np.random.default_rng(config.seed)

        if self.variant.text_source and text_table is None:
            raise ConfigError(
                f"variant {config.variant!r} needs a node embedding table")
        if self.variant.uses_sim and graph.sim_pairs.shape[0] == 0:
            raise ConfigError(
                f"variant {config.variant!r} needs a densified graph "
                "(no similarity pairs present)")
        self.text = None
        if self.variant.text_source:
            self.text = text_table.vectors.astype(self.dtype)

        self.gcn = None
        self.bilinear = None
        self.decoder = None
        if self.variant.decoder == "convtranse":
            rep_dim = 0
            if self.variant.graph_source:
                layers = config.gcn_layers if self.variant.uses_gcn else 0
                self.gcn = GcnParams.create(graph, config.embed_dim, layers,
                                            rng, self.dtype)
                rep_dim += config.embed_dim
            if self.variant.text_source:
                rep_dim += self.text.shape[1]
            self.decoder = ConvTransEParams.create(
                graph.num_scoring_relations, rep_dim, config.channels,
                config.kernel_width, config.dropout, rng, self.dtype)
        else:
            self.bilinear = BilinearParams.create(
                graph.num_nodes, graph.num_scoring_relations,
                config.embed_dim, rng, self.dtype)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self):
        named = {}
        if self.gcn is not None:
            named.update(self.gcn.named_parameters())
        if self.decoder is not None:
            named.update(self.decoder.named_parameters())
        if self.bilinear is not None:
            named.update(self.bilinear.named_parameters())
        return named

    def projection_parameters(self):
        params = []
        if self.gcn is not None:
            params += self.gcn.projection_parameters()
        if self.decoder is not None:
            params += self.decoder.projection_parameters()
        return params

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state(self, state):
        named = self.named_parameters()
        missing = set(named) - set(state)
        if missing:
            raise ValueError(f"checkpoint missing parameters: {sorted(missing)}")
        for name, p in named.items():
            arr = np.asarray(state[name], dtype=self.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"parameter {name}: checkpoint shape {arr.shape} != "
                    f"model shape {p.data.shape}")
            p.data = arr.copy()

    # -- forward ------------------------------------------------------------

    def representation_parts(self, view, train=False, mask=None):
        """(graph_part, text_part) for a view; either may be None. The text
        part is a constant array, masked only when a mask is supplied."""
        graph_part = None
        if self.variant.decoder != "convtranse":
            graph_part = embedding_lookup(self.bilinear.entities, view.node_ids)
        elif self.variant.graph_source:
            graph_part = encode(view, self.gcn, train_flag=train)
        text_part = None
        if self.variant.text_source:
            block = self.text[view.node_ids]
            if train and mask is not None:
                block = block * mask
            text_part = Tensor(block)
        return graph_part, text_part

    def representations(self, view, train=False, mask=None):
        graph_part, text_part = self.representation_parts(view, train, mask)
        if graph_part is not None and text_part is not None:
            return concat([graph_part, text_part], axis=1)
        return graph_part if graph_part is not None else text_part

    def score_pairs(self, e1_repr, rel_ids, candidates, train=False, rng=None):
        """Probabilities (batch, num_candidates) for prepared source rows."""
        if self.variant.decoder == "convtranse":
            return convtranse_score_all(e1_repr, rel_ids, candidates,
                                        self.decoder, train, rng)
        if self.variant.decoder == "distmult":
            return sigmoid(distmult_score_all(e1_repr, rel_ids, candidates,
                                              self.bilinear))
        return sigmoid(complex_score_all(e1_repr, rel_ids, candidates,
                                         self.bilinear))

    def score_batch(self, reprs, e1_local, rel_ids, train=False, rng=None):
        e1 = embedding_lookup(reprs, e1_local)
        return self.score_pairs(e1, rel_ids, reprs, train, rng)


class ModelScorer:
    """Full-graph inference adapter for the evaluator.

    Encodes the whole graph once (text fully visible, dropout off) and
    caches the representation parts; queries then score against every node.
    ``graph_perm`` shuffles the graph-side representation rows within a
    batch, which is the random-permutation diagnostic.
    """

    def __init__(self, model: CompletionModel, graph: KnowledgeGraph):
        self.model = model
        view = full_view(graph, include_sim=model.variant.uses_sim)
        graph_part, text_part = model.representation_parts(view, train=False)
        self.graph_part = None if graph_part is None else graph_part.data
        self.text_part = None if text_part is None else text_part.data
        self.num_candidates = view.num_nodes
        parts = [p for p in (self.graph_part, self.text_part) if p is not None]
        self._candidates = Tensor(np.concatenate(parts, axis=1)
                                  if len(parts) > 1 else parts[0])

    @property
    def has_graph_component(self):
        return (self.model.variant.decoder == "convtranse"
                and self.model.variant.graph_source)

    def scores(self, e1_ids, rel_ids, graph_perm=None):
        rows = []
        if self.graph_part is not None:
            block = self.graph_part[e1_ids]
            if graph_perm is not None:
                block = block[graph_perm]
            rows.append(block)
        elif graph_perm is not None:
            raise ValueError("no graph-side representations to permute")
        if self.text_part is not None:
            rows.append(self.text_part[e1_ids])
        e1 = Tensor(np.concatenate(rows, axis=1) if len(rows) > 1 else rows[0])
        probs = self.model.score_pairs(e1, rel_ids, self._candidates,
                                       train=False)
        return probs.data


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: CompletionModel
    best_epoch: int
    best_mrr: float
    final_loss: float
    history: list = field(default_factory=list)
    checkpoint_path: Path | None = None
    history_path: Path | None = None


def _prefixes_of(view):
    """Distinct (source, directed relation) pairs of a view's scoreable
    edges, with their gold target lists, in deterministic order."""
    order = np.lexsort((view.scoreable_e2, view.scoreable_rel, view.scoreable_e1))
    e1 = view.scoreable_e1[order]
    rel = view.scoreable_rel[order]
    e2 = view.scoreable_e2[order]
    boundaries = np.ones(e1.shape[0], dtype=bool)
    boundaries[1:] = (e1[1:] != e1[:-1]) | (rel[1:] != rel[:-1])
    starts = np.nonzero(boundaries)[0]
    ends = np.append(starts[1:], e1.shape[0])
    return [(e1[s], rel[s], e2[s:e]) for s, e in zip(starts, ends)]


def history_csv(rows):
    lines = ["epoch,split,mrr,hits1,hits3,hits10"]
    for r in rows:
        lines.append("{epoch},{split},{mrr:.8f},{hits1:.8f},{hits3:.8f},"
                     "{hits10:.8f}".format(**r))
    return "\n".join(lines) + "\n"


def train(graph: KnowledgeGraph, config: TrainConfig, text_table=None,
          out_dir=None) -> TrainResult:
    """Run the full training loop and retain the dev-best checkpoint.

    Per epoch: sample a message subgraph (the full graph when the budget
    covers it), then for each minibatch of distinct (source, relation)
    prefixes re-encode the view, score every view node, and take a clipped
    Adam step on the smoothed one-vs-all cross entropy. Dev MRR is
    measured every ``eval_every`` epochs and the best state is kept.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    model = CompletionModel(config, graph, text_table, rng=rng)
    named = model.named_parameters()
    optimizer = Adam(named, lr=config.lr, beta1=config.adam_beta1,
                     beta2=config.adam_beta2, eps=config.adam_eps)
    schedule = MaskSchedule(config.mask_epochs, config.mask_direction)
    train_targets = graph.training_targets()
    l2_params = model.projection_parameters()
    has_dev = graph.splits["dev"].shape[0] > 0

    history = []
    best_state, best_mrr, best_epoch, best_opt = None, -1.0, -1, None
    final_loss = float("nan")

    for epoch in range(config.epochs):
        view = sample_subgraph(graph, config.subgraph_edges, rng,
                               include_sim=model.variant.uses_sim)
        prefixes = _prefixes_of(view)
        order = rng.permutation(len(prefixes))
        text_dim = model.text.shape[1] if model.text is not None else 0

        for batch_index, lo in enumerate(range(0, len(order), config.batch_size)):
            chunk = [prefixes[i] for i in order[lo:lo + config.batch_size]]
            e1_local = np.array([c[0] for c in chunk], dtype=np.int64)
            rel_ids = np.array([c[1] for c in chunk], dtype=np.int64)

            mask = (mask_vector(text_dim, epoch, schedule, rng, model.dtype)
                    if text_dim else None)
            reprs = model.representations(view, train=True, mask=mask)
            probs = model.score_batch(reprs, e1_local, rel_ids, train=True,
                                      rng=rng)

            gold = np.zeros((len(chunk), view.num_nodes), dtype=np.float64)
            e1_global = view.node_ids[e1_local]
            for row, (eg, rel) in enumerate(zip(e1_global, rel_ids)):
                targets = train_targets.get((int(eg), int(rel)))
                if targets is not None:
                    local = view.local_ids_or_skip(targets)
                    gold[row, local[local >= 0]] = 1.0

            loss = training_loss(probs, gold, config.label_smoothing,
                                 config.l2_weight, l2_params)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(epoch, batch_index)
            optimizer.zero_grad()
            loss.backward()
            clip_gradient_norm(named.values(), config.grad_clip)
            optimizer.step()
            final_loss = float(loss.data)

        is_eval_epoch = has_dev and ((epoch + 1) % config.eval_every == 0
                                     or epoch + 1 == config.epochs)
        if is_eval_epoch:
            report = evaluate(ModelScorer(model, graph), graph, "dev")
            row = {"epoch": epoch + 1, "split": "dev",
                   "mrr": report.averaged.mrr, "hits1": report.averaged.hits1,
                   "hits3": report.averaged.hits3,
                   "hits10": report.averaged.hits10}
            history.append(row)
            logger.info("epoch %d dev MRR %.4f (loss %.5f)",
                        epoch + 1, report.averaged.mrr, final_loss)
            if report.averaged.mrr > best_mrr:
                best_mrr = report.averaged.mrr
                best_epoch = epoch + 1
                best_state = model.state_dict()
                best_opt = copy.deepcopy(optimizer.state_arrays())

    if best_state is None:  # no dev split: keep the final state
        best_state = model.state_dict()
        best_epoch = config.epochs
        best_opt = optimizer.state_arrays()
    model.load_state(best_state)

    result = TrainResult(model=model, best_epoch=best_epoch, best_mrr=best_mrr,
                         final_loss=final_loss, history=history)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint_path = out_dir / "model.kgc"
        ckpt.save_checkpoint(result.checkpoint_path, best_state, best_opt)
        (out_dir / "run_config.json").write_text(config.to_json(),
                                                 encoding="utf-8")
        result.history_path = out_dir / "history.csv"
        result.history_path.write_text(history_csv(history), encoding="utf-8")
    return result
