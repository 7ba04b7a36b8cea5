"""Full bag model: embed, scan, aggregate over the graph, scan, pool, score.

One bag flows through:

    features (M, D_in)
      -> linear embedding with ReLU (M, D)
      -> tree-scan block over the serialized spanning forest
      -> graph aggregation over the k-NN graph
      -> second tree-scan block, same node orders
      -> attention pooling to one bag vector
      -> linear head (classification logits or per-bin hazard logits)

The node orders come from the bag's minimum spanning forest; strategies
that need randomness (root choice, shuffled orders) draw it from the rng
handed to `forward_bag`, so the caller owns reproducibility. Both scan
blocks see the same orders per forward pass.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .blocks import (
    STRATEGY_BRANCHES,
    GraphAggregationBlock,
    TreeScanBlock,
    graph_aggregation_forward,
    tree_scan_forward,
)
from .config import ModelConfig
from .data import DatasetManifest, load_bag
from .errors import UndefinedMetricError, ValidationError
from .graphs import (
    InstanceBag,
    InstanceGraph,
    SpanningForest,
    Traversal,
    build_knn_graph,
    kruskal_msf,
    sample_roots,
    traverse,
)
from .mil import (
    AttentionPool,
    MetricsReport,
    accuracy,
    attention_pool,
    c_index,
    classification_auc,
    cross_entropy,
    survival_nll,
    survival_risk,
)
from .numerics import Tensor


@dataclass
class Model:
    config: ModelConfig
    embed_w: Tensor
    embed_b: Tensor
    block1: TreeScanBlock
    gia: GraphAggregationBlock | None
    block2: TreeScanBlock
    pool: AttentionPool
    head_w: Tensor
    head_b: Tensor

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embed.w": self.embed_w, "embed.b": self.embed_b}
        out.update(self.block1.named_tensors("block1"))
        if self.gia is not None:
            out.update(self.gia.named_tensors("gia"))
        out.update(self.block2.named_tensors("block2"))
        out.update(self.pool.named_tensors("pool"))
        out.update({"head.w": self.head_w, "head.b": self.head_b})
        return out

    def zero_grads(self) -> None:
        for t in self.named_parameters().values():
            t.grad = np.zeros_like(t.data)

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.named_parameters().values())


def build_model(config: ModelConfig) -> Model:
    rng = np.random.default_rng(config.seed)
    dtype = nm.resolve_dtype(config.precision)
    d = config.model_dim
    n_branches, bidirectional = STRATEGY_BRANCHES[config.scanning]

    def block():
        return TreeScanBlock.init(
            rng,
            dim=d,
            num_heads=config.num_heads,
            state_dim=config.state_dim,
            n_branches=n_branches,
            bidirectional=bidirectional,
            expand=config.expand,
            residual=config.residual,
            dtype=dtype,
        )

    embed_w = nm.parameter(
        rng.normal(0.0, 1.0 / np.sqrt(config.input_dim), size=(config.input_dim, d)),
        dtype=dtype,
    )
    embed_b = nm.parameter(np.zeros(d), dtype=dtype)
    block1 = block()
    gia = GraphAggregationBlock.init(rng, dim=d, dtype=dtype) if config.aggregation == "gia" else None
    block2 = block()
    pool = AttentionPool.init(rng, dim=d, attn_dim=config.attn_dim, dtype=dtype)
    head_w = nm.parameter(
        rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, config.output_dim)), dtype=dtype
    )
    head_b = nm.parameter(np.zeros(config.output_dim), dtype=dtype)
    return Model(
        config=config,
        embed_w=embed_w,
        embed_b=embed_b,
        block1=block1,
        gia=gia,
        block2=block2,
        pool=pool,
        head_w=head_w,
        head_b=head_b,
    )


def set_parameters(model: Model, arrays: dict[str, np.ndarray]) -> None:
    """Install a full set of named arrays into the model, shape-checked."""
    params = model.named_parameters()
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise ValidationError(
            f"set_parameters: missing {sorted(missing)}, unexpected {sorted(extra)}"
        )
    for name, tensor in params.items():
        value = np.asarray(arrays[name])
        if value.shape != tensor.data.shape:
            raise ValidationError(
                f"set_parameters: {name} has shape {value.shape}, "
                f"expected {tensor.data.shape}"
            )
        tensor.data = value.astype(tensor.data.dtype)
        tensor.grad = np.zeros_like(tensor.data)


def bag_orders(
    strategy: str,
    forest: SpanningForest,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """One node order per scan branch of the given strategy.

    The topology-aware strategy serializes the forest four ways from one
    shared root draw; shuffle_rescan ignores the forest and draws four
    uniform permutations; the single-branch strategies use index order.
    """
    if strategy not in STRATEGY_BRANCHES:
        raise ValidationError(f"unknown scanning strategy {strategy!r}")
    m = forest.num_nodes
    if strategy == "topology_aware":
        roots = sample_roots(forest, rng)
        return [
            traverse(forest, Traversal.INDEX),
            traverse(forest, Traversal.PRE, roots=roots),
            traverse(forest, Traversal.POST, roots=roots),
            traverse(forest, Traversal.LEVEL, roots=roots),
        ]
    if strategy == "shuffle_rescan":
        return [rng.permutation(m) for _ in range(4)]
    return [np.arange(m)]


@dataclass
class BagForward:
    logits: Tensor            # (output_dim,)
    probs: np.ndarray | None  # classification: softmax over classes
    hazards: np.ndarray | None  # survival: per-bin sigmoid
    attention: np.ndarray     # (M,) instance weights


GraphCache = dict[str, tuple[InstanceGraph, SpanningForest]]


def bag_topology(
    bag: InstanceBag, config: ModelConfig, cache: GraphCache | None = None
) -> tuple[InstanceGraph, SpanningForest]:
    """k-NN graph and spanning forest of a bag, memoized per bag id."""
    if cache is not None and bag.bag_id in cache:
        return cache[bag.bag_id]
    graph = build_knn_graph(bag, k=config.knn_k, coord_metric=config.coord_metric)
    forest = kruskal_msf(graph)
    if cache is not None:
        cache[bag.bag_id] = (graph, forest)
    return graph, forest


def forward_bag(
    model: Model,
    bag: InstanceBag,
    rng: np.random.Generator,
    cache: GraphCache | None = None,
) -> BagForward:
    config = model.config
    if bag.features.shape[1] != config.input_dim:
        raise ValidationError(
            f"forward_bag: bag width {bag.features.shape[1]} does not match "
            f"input_dim {config.input_dim}"
        )
    graph, forest = bag_topology(bag, config, cache)
    orders = bag_orders(config.scanning, forest, rng)
    dtype = nm.resolve_dtype(config.precision)

    x = nm.relu(nm.linear(Tensor(bag.features.astype(dtype)), model.embed_w, model.embed_b))
    h = tree_scan_forward(x, orders, model.block1)
    if model.gia is not None:
        h = graph_aggregation_forward(h, graph, model.gia)
    h = tree_scan_forward(h, orders, model.block2)
    z, alpha = attention_pool(h, model.pool)
    logits = nm.reshape(nm.linear(z, model.head_w, model.head_b), (config.output_dim,))

    if config.task == "classification":
        probs, hazards = nm.softmax(logits).data, None
    else:
        probs, hazards = None, nm.sigmoid(logits).data
    return BagForward(
        logits=logits, probs=probs, hazards=hazards, attention=alpha.data[:, 0]
    )


def bag_loss(out: BagForward, bag: InstanceBag, task: str) -> Tensor:
    if task == "classification":
        if bag.label is None:
            raise ValidationError(f"bag {bag.bag_id!r} has no label")
        return cross_entropy(out.logits, bag.label)
    if bag.time_bin is None or bag.event is None:
        raise ValidationError(f"bag {bag.bag_id!r} has no survival target")
    return survival_nll(out.logits, bag.time_bin, bag.event)


def eval_rng(bag_id: str) -> np.random.Generator:
    """Deterministic per-bag rng for evaluation, independent of bag order."""
    digest = hashlib.sha256(bag_id.encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def evaluate_model(
    model: Model,
    manifest: DatasetManifest,
    split: str,
    cache: GraphCache | None = None,
) -> tuple[MetricsReport, list[dict]]:
    """Run the model over one split and compute its task metrics.

    Bags are visited in sorted id order with a per-bag rng derived from
    the id, so the report does not depend on manifest ordering. Returns
    the metrics and one prediction row per bag. Metrics whose value is
    undefined on this split (one-class AUC, concordance without
    comparable pairs) are omitted from the report.
    """
    records = sorted(manifest.split(split), key=lambda r: r.bag_id)
    if not records:
        raise ValidationError(f"evaluate_model: split {split!r} is empty")
    task = model.config.task
    losses, rows = [], []
    prob_rows, labels = [], []
    risks, bins, events = [], [], []
    for record in records:
        bag = load_bag(manifest, record)
        out = forward_bag(model, bag, eval_rng(record.bag_id), cache)
        losses.append(float(bag_loss(out, bag, task).data))
        row = {"bag_id": record.bag_id, "loss": losses[-1]}
        if task == "classification":
            prob_rows.append(out.probs)
            labels.append(record.label)
            row.update(label=record.label, prob=float(out.probs[1] if len(out.probs) == 2 else out.probs.max()))
            row["pred"] = int(out.probs[1] >= 0.5) if len(out.probs) == 2 else int(out.probs.argmax())
        else:
            risk = survival_risk(out.hazards)
            risks.append(risk)
            bins.append(record.time_bin)
            events.append(record.event)
            row.update(time_bin=record.time_bin, event=record.event, risk=risk)
        rows.append(row)

    report = MetricsReport()
    report.set("loss", float(np.mean(losses)))
    if task == "classification":
        probs = np.stack(prob_rows)
        y = np.asarray(labels)
        report.set("accuracy", accuracy(probs, y))
        try:
            report.set("auc", classification_auc(probs, y))
        except UndefinedMetricError:
            pass
    else:
        try:
            report.set("c_index", c_index(np.asarray(risks), np.asarray(bins), events))
        except UndefinedMetricError:
            pass
    return report, rows
