import dataclasses

import numpy as np
import pytest

from oracles import neighbor_softmax_oracle, unrolled_scan
from topomil import numerics as nm
from topomil.blocks import (
    GIA_EPSILON,
    STRATEGY_BRANCHES,
    GraphAggregationBlock,
    TreeScanBlock,
    graph_aggregation_forward,
    isolated_node_update,
    neighbor_softmax_sum,
    tree_scan_forward,
)
from topomil.errors import DimensionError, ValidationError
from topomil.graphs import InstanceBag, InstanceGraph, build_knn_graph
from topomil.numerics import Tensor

GRAD_TOL = 1e-4
PRIM_TOL = 1e-5


def random_adjacency(rng, m, include_isolated=True):
    adjacency = []
    for i in range(m):
        others = [j for j in range(m) if j != i]
        deg = int(rng.integers(0 if include_isolated else 1, min(4, m - 1) + 1))
        adjacency.append(sorted(rng.choice(others, size=deg, replace=False).tolist()))
    return adjacency


def random_bag(rng, m, d_in=6):
    return InstanceBag(
        bag_id="t",
        features=rng.standard_normal((m, d_in)),
        coords=rng.uniform(0.2, 5.0, size=(m, 2)),
    )


# === neighbor softmax aggregation primitive ===

def test_neighbor_softmax_matches_looped_oracle():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        m, d = int(rng.integers(2, 9)), int(rng.integers(1, 6))
        msg = rng.standard_normal((m, d)) * rng.uniform(0.5, 4.0)
        adjacency = random_adjacency(rng, m)
        got = neighbor_softmax_sum(Tensor(msg), adjacency)
        np.testing.assert_allclose(got.data, neighbor_softmax_oracle(msg, adjacency), atol=1e-12)


def test_neighbor_softmax_single_neighbor_passes_through():
    msg = np.array([[1.5, -2.0], [0.25, 7.0]])
    out = neighbor_softmax_sum(Tensor(msg), [[1], [0]])
    np.testing.assert_array_equal(out.data, msg[::-1])


def test_neighbor_softmax_equal_values_reduce_to_that_value():
    msg = np.full((4, 3), 0.7)
    out = neighbor_softmax_sum(Tensor(msg), [[1, 2, 3], [0, 2], [0], [0, 1, 2]])
    np.testing.assert_allclose(out.data, msg, atol=1e-15)


def test_neighbor_softmax_isolated_row_is_zero():
    rng = np.random.default_rng(3)
    msg = rng.standard_normal((3, 4))
    out = neighbor_softmax_sum(Tensor(msg), [[1, 2], [], [0]])
    np.testing.assert_array_equal(out.data[1], np.zeros(4))


def test_neighbor_softmax_large_values_stable():
    msg = np.array([[800.0, -800.0], [900.0, -900.0], [700.0, -650.0]])
    out = neighbor_softmax_sum(Tensor(msg), [[1, 2], [0], [0, 1]])
    assert np.isfinite(out.data).all()
    # the max entry dominates its softmax completely at this separation
    np.testing.assert_allclose(out.data[0, 0], 900.0, atol=1e-9)


def test_neighbor_softmax_gradient():
    for seed in range(6):
        rng = np.random.default_rng(100 + seed)
        m, d = 5, 3
        adjacency = random_adjacency(rng, m)
        weight = rng.standard_normal((m, d))
        x0 = rng.standard_normal((m, d))

        def f(t):
            return nm.sum_all(nm.mul(neighbor_softmax_sum(t, adjacency), Tensor(weight)))

        assert nm.finite_diff_check(f, Tensor(x0, requires_grad=True)) < PRIM_TOL


def test_neighbor_softmax_shape_validation():
    with pytest.raises(DimensionError):
        neighbor_softmax_sum(Tensor(np.zeros((3, 2))), [[1], [0]])
    with pytest.raises(DimensionError):
        neighbor_softmax_sum(Tensor(np.zeros(3)), [[], [], []])


# === graph aggregation block ===

def test_gia_forward_matches_numpy_composition():
    rng = np.random.default_rng(7)
    bag = random_bag(rng, 9)
    graph = build_knn_graph(bag, k=3)
    block = GraphAggregationBlock.init(rng, dim=6)
    xd = bag.features
    out = graph_aggregation_forward(Tensor(xd), graph, block)

    msg = np.maximum(xd, 0.0) + GIA_EPSILON
    agg = neighbor_softmax_oracle(msg, graph.adjacency)
    hid = np.maximum((xd + agg) @ block.w1.data + block.b1.data, 0.0)
    expect = hid @ block.w2.data + block.b2.data
    np.testing.assert_allclose(out.data, expect, atol=1e-12)


def test_gia_all_negative_neighbors_aggregate_to_epsilon():
    # relu kills negative features, leaving every message at exactly the
    # epsilon floor, whose softmax-weighted sum is epsilon again
    rng = np.random.default_rng(11)
    x = -np.abs(rng.standard_normal((4, 3))) - 0.1
    msg = nm.add_scalar(nm.relu(Tensor(x)), GIA_EPSILON)
    out = neighbor_softmax_sum(msg, [[1, 2, 3], [0], [0, 1], [1]])
    np.testing.assert_allclose(out.data, np.full((4, 3), GIA_EPSILON), atol=1e-15)


def test_gia_default_epsilon_value():
    rng = np.random.default_rng(0)
    block = GraphAggregationBlock.init(rng, dim=4)
    assert block.epsilon == 1e-7
    assert GIA_EPSILON == 1e-7


def test_gia_relabel_equivariance():
    rng = np.random.default_rng(21)
    m, d = 8, 5
    x = rng.standard_normal((m, d))
    adjacency = random_adjacency(rng, m)
    graph = InstanceGraph(num_nodes=m, edges=[], adjacency=adjacency)
    block = GraphAggregationBlock.init(rng, dim=d)
    out = graph_aggregation_forward(Tensor(x), graph, block)

    perm = rng.permutation(m)
    inv = np.argsort(perm)
    relabeled = [sorted(int(inv[j]) for j in adjacency[perm[i]]) for i in range(m)]
    graph_p = InstanceGraph(num_nodes=m, edges=[], adjacency=relabeled)
    out_p = graph_aggregation_forward(Tensor(x[perm]), graph_p, block)
    np.testing.assert_allclose(out_p.data, out.data[perm], atol=1e-12)


def test_gia_isolated_node_equals_plain_mlp():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((5, 4))
    adjacency = [[1], [0], [3], [2], []]  # node 4 has no neighbors
    graph = InstanceGraph(num_nodes=5, edges=[], adjacency=adjacency)
    block = GraphAggregationBlock.init(rng, dim=4)
    out = graph_aggregation_forward(Tensor(x), graph, block)
    solo = isolated_node_update(Tensor(x[4:5]), block)
    np.testing.assert_allclose(out.data[4], solo.data[0], atol=1e-12)


def test_gia_gradient_full_block():
    rng = np.random.default_rng(42)
    m, d = 6, 5
    bag = random_bag(rng, m)
    graph = build_knn_graph(bag, k=2)
    block = GraphAggregationBlock.init(rng, dim=d)
    x0 = rng.standard_normal((m, d))

    def fx(t):
        return nm.sum_all(graph_aggregation_forward(t, graph, block))

    assert nm.finite_diff_check(fx, Tensor(x0, requires_grad=True)) < GRAD_TOL

    errors = param_gradient_errors(
        block, lambda t: graph_aggregation_forward(t, graph, block), x0
    )
    for name, err in errors.items():
        assert err < GRAD_TOL, f"{name}: {err}"


def test_gia_shape_validation():
    rng = np.random.default_rng(0)
    block = GraphAggregationBlock.init(rng, dim=4)
    graph = InstanceGraph(num_nodes=3, edges=[], adjacency=[[1], [0, 2], [1]])
    with pytest.raises(DimensionError):
        graph_aggregation_forward(Tensor(np.zeros((3, 5))), graph, block)
    with pytest.raises(ValidationError):
        graph_aggregation_forward(Tensor(np.zeros((4, 4))), graph, block)
    with pytest.raises(DimensionError):
        isolated_node_update(Tensor(np.zeros(4)), block)


# === gradient-check plumbing shared across block tests ===

def _tensor_owners(block):
    objs = [block]
    for br in getattr(block, "branches", []):
        objs.append(br.fwd)
        if br.bwd is not None:
            objs.append(br.bwd)
    return objs


def param_gradient_errors(block, forward, x0):
    """Finite-difference error per named parameter of a block forward.

    Each check temporarily installs the probed tensor in the block so the
    tape differentiates the parameter itself, then restores it.
    """
    errors = {}
    owners = _tensor_owners(block)
    for name, param in block.named_tensors("p").items():
        owner, attr = next(
            (o, fld.name)
            for o in owners
            for fld in dataclasses.fields(o)
            if getattr(o, fld.name) is param
        )

        def f(t, _o=owner, _a=attr, _orig=param):
            setattr(_o, _a, t)
            try:
                return nm.sum_all(forward(Tensor(x0)))
            finally:
                setattr(_o, _a, _orig)

        errors[name] = nm.finite_diff_check(f, param)
    return errors


# === tree-scan block ===

def test_strategy_branch_table():
    assert STRATEGY_BRANCHES == {
        "topology_aware": (4, True),
        "unidirectional": (1, False),
        "bidirectional": (1, True),
        "shuffle_rescan": (4, False),
    }


def numpy_tree_scan(x, orders, block):
    """Independent composition of the whole block from plain numpy pieces."""

    def softplus(v):
        return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))

    def silu(v):
        return v / (1.0 + np.exp(-v))

    def one_scan(xs, par):
        m = xs.shape[0]
        b = xs @ par.w_b.data
        c = xs @ par.w_c.data
        delta = softplus(xs @ par.w_dt.data + par.p_dt.data)
        a = -np.exp(par.a_log.data)
        y = unrolled_scan(xs.reshape(m, par.num_heads, par.head_dim), b, c, delta, a)
        return y.reshape(m, par.model_dim)

    xb = x @ block.w_in_x.data + block.b_in_x.data
    zb = x @ block.w_in_z.data + block.b_in_z.data
    total = np.zeros_like(xb)
    count = 0
    for order, branch in zip(orders, block.branches):
        inv = np.argsort(order)
        xs = xb[order]
        total += one_scan(xs, branch.fwd)[inv]
        count += 1
        if branch.bwd is not None:
            total += one_scan(xs[::-1], branch.bwd)[::-1][inv]
            count += 1
    gated = silu(zb) * (total / count)
    mu = gated.mean(axis=1, keepdims=True)
    var = ((gated - mu) ** 2).mean(axis=1, keepdims=True)
    normed = (gated - mu) / np.sqrt(var + 1e-5) * block.gamma.data + block.beta.data
    return normed @ block.w_out.data + block.b_out.data


def test_tree_scan_matches_numpy_composition():
    rng = np.random.default_rng(13)
    m, dim = 5, 4
    block = TreeScanBlock.init(
        rng, dim=dim, num_heads=2, state_dim=3, n_branches=2, bidirectional=True
    )
    # break the zero initializations so the oracle exercises every path
    block.w_out.data = rng.normal(0.0, 0.5, size=block.w_out.data.shape)
    block.b_out.data = rng.normal(0.0, 0.5, size=block.b_out.data.shape)
    block.beta.data = rng.normal(0.0, 0.5, size=block.beta.data.shape)
    for br in block.branches:
        br.fwd.w_dt.data = rng.normal(0.0, 0.2, size=br.fwd.w_dt.data.shape)
        br.bwd.w_dt.data = rng.normal(0.0, 0.2, size=br.bwd.w_dt.data.shape)
    x = rng.standard_normal((m, dim))
    orders = [rng.permutation(m), rng.permutation(m)]
    got = tree_scan_forward(Tensor(x), orders, block)
    np.testing.assert_allclose(got.data, numpy_tree_scan(x, orders, block), atol=1e-9)


def test_tree_scan_tied_branches_collapse_to_single():
    rng = np.random.default_rng(17)
    m, dim = 6, 4
    single = TreeScanBlock.init(
        rng, dim=dim, num_heads=2, state_dim=3, n_branches=1, bidirectional=False
    )
    tied = TreeScanBlock(
        dim=single.dim,
        inner_dim=single.inner_dim,
        w_in_x=single.w_in_x,
        b_in_x=single.b_in_x,
        w_in_z=single.w_in_z,
        b_in_z=single.b_in_z,
        branches=[single.branches[0]] * 4,
        gamma=single.gamma,
        beta=single.beta,
        w_out=single.w_out,
        b_out=single.b_out,
    )
    x = Tensor(rng.standard_normal((m, dim)))
    ident = np.arange(m)
    one = tree_scan_forward(x, [ident], single)
    four = tree_scan_forward(x, [ident] * 4, tied)
    np.testing.assert_allclose(four.data, one.data, atol=1e-13)


def test_tree_scan_zero_gate_routes_beta_through_output():
    # silu(0) = 0 kills the fused scan, the zero rows normalize to beta,
    # so every output row must be beta @ W_out + b_out; this pins the
    # gate-then-normalize-then-project composition order
    rng = np.random.default_rng(19)
    m, dim = 5, 4
    block = TreeScanBlock.init(
        rng, dim=dim, num_heads=2, state_dim=3, n_branches=1, bidirectional=True
    )
    block.w_in_z.data[:] = 0.0
    block.b_in_z.data[:] = 0.0
    block.beta.data = rng.standard_normal(block.inner_dim)
    block.b_out.data = rng.standard_normal(dim)
    x = Tensor(rng.standard_normal((m, dim)))
    out = tree_scan_forward(x, [rng.permutation(m)], block)
    row = block.beta.data @ block.w_out.data + block.b_out.data
    np.testing.assert_allclose(out.data, np.tile(row, (m, 1)), atol=1e-12)


def test_tree_scan_permutation_equivariance():
    # scanning x under order p equals scanning the p-permuted bag under the
    # identity, row-permuted back; everything outside the scan is row-local
    rng = np.random.default_rng(23)
    m, dim = 7, 4
    block = TreeScanBlock.init(
        rng, dim=dim, num_heads=2, state_dim=3, n_branches=1, bidirectional=True
    )
    x = rng.standard_normal((m, dim))
    perm = rng.permutation(m)
    a = tree_scan_forward(Tensor(x), [perm], block)
    b = tree_scan_forward(Tensor(x[perm]), [np.arange(m)], block)
    np.testing.assert_array_equal(b.data, a.data[perm])


def test_tree_scan_residual_adds_input():
    rng = np.random.default_rng(29)
    m, dim = 4, 4
    block = TreeScanBlock.init(
        rng, dim=dim, num_heads=2, state_dim=3, n_branches=1, bidirectional=False
    )
    x = rng.standard_normal((m, dim))
    order = [np.arange(m)]
    plain = tree_scan_forward(Tensor(x), order, block)
    block.residual = True
    res = tree_scan_forward(Tensor(x), order, block)
    np.testing.assert_allclose(res.data - plain.data, x, atol=1e-15)


def test_tree_scan_gradient_full_block():
    rng = np.random.default_rng(31)
    m, dim = 5, 4
    block = TreeScanBlock.init(
        rng, dim=dim, num_heads=2, state_dim=3, n_branches=2, bidirectional=True
    )
    orders = [rng.permutation(m), rng.permutation(m)]
    x0 = rng.standard_normal((m, dim))

    def fx(t):
        return nm.sum_all(tree_scan_forward(t, orders, block))

    assert nm.finite_diff_check(fx, Tensor(x0, requires_grad=True)) < GRAD_TOL

    errors = param_gradient_errors(
        block, lambda t: tree_scan_forward(t, orders, block), x0
    )
    for name, err in errors.items():
        assert err < GRAD_TOL, f"{name}: {err}"


def test_tree_scan_validation():
    rng = np.random.default_rng(0)
    block = TreeScanBlock.init(
        rng, dim=4, num_heads=2, state_dim=3, n_branches=2, bidirectional=False
    )
    x = Tensor(np.zeros((5, 4)))
    with pytest.raises(ValidationError):
        tree_scan_forward(x, [np.arange(5)], block)  # one order, two branches
    with pytest.raises(ValidationError):
        tree_scan_forward(x, [np.arange(5), np.arange(4)], block)
    with pytest.raises(DimensionError):
        tree_scan_forward(Tensor(np.zeros((5, 3))), [np.arange(5)] * 2, block)
    with pytest.raises(ValidationError):
        TreeScanBlock.init(rng, dim=4, num_heads=2, state_dim=3,
                           n_branches=0, bidirectional=False)


def test_block_parameter_inventories():
    rng = np.random.default_rng(1)
    ts = TreeScanBlock.init(
        rng, dim=4, num_heads=2, state_dim=3, n_branches=3, bidirectional=True
    )
    names = ts.named_tensors("b1")
    assert len(names) == 8 + 3 * 2 * 5
    assert all(name.startswith("b1.") for name in names)
    gia = GraphAggregationBlock.init(rng, dim=4)
    assert set(gia.named_tensors("g")) == {"g.w1", "g.b1", "g.w2", "g.b2"}
