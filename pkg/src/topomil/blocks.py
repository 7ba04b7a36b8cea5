"""The two sequence-model blocks: traversal-fused scanning and graph aggregation.

`TreeScanBlock` projects the bag into a widened channel space, scans it
along several node orders (bidirectionally when configured), averages the
un-permuted branch outputs, gates them with a SiLU side branch, layer
normalizes, and projects back:

    out = proj_out( Norm( SiLU(Z) * mean_branches( unpermute(scan(permute(X)))) ) )

`GraphAggregationBlock` updates every instance from its graph neighbors:
messages are ReLU(x_j) + eps, combined per feature dimension by a
softmax-weighted sum, added to the node's own features and pushed through
a two-layer MLP. A node with no neighbors receives a zero aggregate, so
its update is just the MLP of its own features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import DimensionError, ValidationError
from .graphs import InstanceGraph, invert_permutation
from .numerics import Tensor
from .ssm import SelectiveSSMParams, multi_scan

GIA_EPSILON = 1e-7  # perturbation added to every neighbor message

# scanning strategy -> (number of scan branches, bidirectional?)
STRATEGY_BRANCHES: dict[str, tuple[int, bool]] = {
    "topology_aware": (4, True),
    "unidirectional": (1, False),
    "bidirectional": (1, True),
    "shuffle_rescan": (4, False),
}


@dataclass
class ScanBranch:
    fwd: SelectiveSSMParams
    bwd: SelectiveSSMParams | None  # None when the block scans one way only

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        out = self.fwd.named_tensors(f"{prefix}.fwd")
        if self.bwd is not None:
            out.update(self.bwd.named_tensors(f"{prefix}.bwd"))
        return out


@dataclass
class TreeScanBlock:
    """Gated multi-order scanning block at expanded inner width."""

    dim: int
    inner_dim: int
    w_in_x: Tensor
    b_in_x: Tensor
    w_in_z: Tensor
    b_in_z: Tensor
    branches: list[ScanBranch]
    gamma: Tensor
    beta: Tensor
    w_out: Tensor
    b_out: Tensor
    residual: bool = False

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        dim: int,
        num_heads: int,
        state_dim: int,
        n_branches: int,
        bidirectional: bool,
        expand: int = 2,
        residual: bool = False,
        dtype=np.float64,
    ) -> "TreeScanBlock":
        inner = expand * dim
        if n_branches < 1:
            raise ValidationError(f"need at least one scan branch, got {n_branches}")
        # head_dim stays fixed; the expanded width carries expand*num_heads heads
        heads_inner = expand * num_heads

        def lin(fan_in, fan_out):
            return nm.parameter(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)), dtype=dtype)

        branches = []
        for _ in range(n_branches):
            fwd = SelectiveSSMParams.init(rng, inner, heads_inner, state_dim, dtype=dtype)
            bwd = (
                SelectiveSSMParams.init(rng, inner, heads_inner, state_dim, dtype=dtype)
                if bidirectional
                else None
            )
            branches.append(ScanBranch(fwd=fwd, bwd=bwd))
        return cls(
            dim=dim,
            inner_dim=inner,
            w_in_x=lin(dim, inner),
            b_in_x=nm.parameter(np.zeros(inner), dtype=dtype),
            w_in_z=lin(dim, inner),
            b_in_z=nm.parameter(np.zeros(inner), dtype=dtype),
            branches=branches,
            gamma=nm.parameter(np.ones(inner), dtype=dtype),
            beta=nm.parameter(np.zeros(inner), dtype=dtype),
            w_out=lin(inner, dim),
            b_out=nm.parameter(np.zeros(dim), dtype=dtype),
            residual=residual,
        )

    @property
    def bidirectional(self) -> bool:
        return self.branches[0].bwd is not None

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {
            f"{prefix}.w_in_x": self.w_in_x,
            f"{prefix}.b_in_x": self.b_in_x,
            f"{prefix}.w_in_z": self.w_in_z,
            f"{prefix}.b_in_z": self.b_in_z,
        }
        for k, br in enumerate(self.branches):
            out.update(br.named_tensors(f"{prefix}.branch{k}"))
        out.update(
            {
                f"{prefix}.gamma": self.gamma,
                f"{prefix}.beta": self.beta,
                f"{prefix}.w_out": self.w_out,
                f"{prefix}.b_out": self.b_out,
            }
        )
        return out


def tree_scan_forward(x: Tensor, orders, block: TreeScanBlock) -> Tensor:
    """Apply the block to a bag sequence (M, dim) under the given node orders.

    `orders` is one permutation per scan branch (numpy index arrays). Each
    branch scans its own ordering of the projected sequence, backward as
    well when the block is bidirectional; branch outputs are un-permuted,
    averaged, gated, normalized, and projected back to `dim`.
    """
    if x.data.ndim != 2 or x.data.shape[1] != block.dim:
        raise DimensionError(f"tree_scan_forward: x{x.data.shape} does not match dim {block.dim}")
    if len(orders) != len(block.branches):
        raise ValidationError(
            f"tree_scan_forward: {len(orders)} orders for {len(block.branches)} branches"
        )
    m = x.data.shape[0]
    xb = nm.linear(x, block.w_in_x, block.b_in_x)
    zb = nm.linear(x, block.w_in_z, block.b_in_z)

    scans: list[tuple[Tensor, SelectiveSSMParams]] = []
    layout: list[tuple[np.ndarray, bool]] = []  # (order, reversed?)
    for order, branch in zip(orders, block.branches):
        order = np.asarray(order, dtype=np.intp)
        if order.shape != (m,):
            raise ValidationError(f"tree_scan_forward: order of shape {order.shape} for M={m}")
        xs = nm.gather_rows(xb, order)
        scans.append((xs, branch.fwd))
        layout.append((order, False))
        if branch.bwd is not None:
            scans.append((nm.flip0(xs), branch.bwd))
            layout.append((order, True))

    outputs = multi_scan(scans)
    acc = None
    for y, (order, was_reversed) in zip(outputs, layout):
        if was_reversed:
            y = nm.flip0(y)
        y = nm.gather_rows(y, invert_permutation(order))
        acc = y if acc is None else nm.add(acc, y)
    fused = nm.scale(acc, 1.0 / len(outputs))

    gated = nm.mul(nm.silu(zb), fused)
    normed = nm.layer_norm(gated, block.gamma, block.beta)
    out = nm.linear(normed, block.w_out, block.b_out)
    if block.residual:
        out = nm.add(out, x)
    return out


# === graph aggregation ===

def neighbor_softmax_sum(msg: Tensor, adjacency: list[list[int]]) -> Tensor:
    """Per-dimension softmax-weighted sum of each node's neighbor messages.

    For node i and feature dimension f, the neighbor values
    {msg[j, f] : j in N(i)} are combined as sum_j softmax_j(values) * value_j.
    Nodes without neighbors aggregate to zero. Custom primitive; the adjoint
    of f(v) = sum softmax(v)*v is p_k * (1 + v_k - f(v)) per entry.
    """
    md = msg.data
    if md.ndim != 2 or len(adjacency) != md.shape[0]:
        raise DimensionError(
            f"neighbor_softmax_sum: msg{md.shape} vs adjacency of {len(adjacency)} nodes"
        )
    m = md.shape[0]
    agg = np.zeros_like(md)
    weights: list[np.ndarray | None] = [None] * m
    for i, nbrs in enumerate(adjacency):
        if not nbrs:
            continue
        vals = md[nbrs]                       # (deg, D)
        e = np.exp(vals - vals.max(axis=0))
        p = e / e.sum(axis=0)
        weights[i] = p
        agg[i] = (p * vals).sum(axis=0)
    out = nm.make_output(agg, (msg,))

    def pull(g: np.ndarray) -> None:
        dmsg = np.zeros_like(md)
        for i, nbrs in enumerate(adjacency):
            if not nbrs:
                continue
            p = weights[i]
            vals = md[nbrs]
            dmsg[nbrs] += g[i] * p * (1.0 + vals - agg[i])
        nm.accumulate(msg, dmsg)

    nm.record(out, pull)
    return out


@dataclass
class GraphAggregationBlock:
    """Neighbor-softmax aggregation followed by a two-layer MLP update."""

    dim: int
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    epsilon: float = GIA_EPSILON

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, dtype=np.float64) -> "GraphAggregationBlock":
        scale = 1.0 / np.sqrt(dim)
        return cls(
            dim=dim,
            w1=nm.parameter(rng.normal(0.0, scale, size=(dim, dim)), dtype=dtype),
            b1=nm.parameter(np.zeros(dim), dtype=dtype),
            w2=nm.parameter(rng.normal(0.0, scale, size=(dim, dim)), dtype=dtype),
            b2=nm.parameter(np.zeros(dim), dtype=dtype),
        )

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w1": self.w1,
            f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2,
            f"{prefix}.b2": self.b2,
        }

    def mlp(self, h: Tensor) -> Tensor:
        return nm.linear(nm.relu(nm.linear(h, self.w1, self.b1)), self.w2, self.b2)


def graph_aggregation_forward(x: Tensor, graph: InstanceGraph, block: GraphAggregationBlock) -> Tensor:
    """x_i' = MLP(x_i + aggregate({ReLU(x_j) + eps : j in N(i)}))."""
    if x.data.ndim != 2 or x.data.shape[1] != block.dim:
        raise DimensionError(
            f"graph_aggregation_forward: x{x.data.shape} does not match dim {block.dim}"
        )
    if graph.num_nodes != x.data.shape[0]:
        raise ValidationError(
            f"graph_aggregation_forward: graph has {graph.num_nodes} nodes, bag has {x.data.shape[0]}"
        )
    msg = nm.add_scalar(nm.relu(x), block.epsilon)
    agg = neighbor_softmax_sum(msg, graph.adjacency)
    return block.mlp(nm.add(x, agg))


def isolated_node_update(x_i: Tensor, block: GraphAggregationBlock) -> Tensor:
    """Degenerate single-node case: the aggregate is empty, so just the MLP."""
    if x_i.data.ndim != 2 or x_i.data.shape[1] != block.dim:
        raise DimensionError(
            f"isolated_node_update: x{x_i.data.shape} does not match dim {block.dim}"
        )
    return block.mlp(x_i)
