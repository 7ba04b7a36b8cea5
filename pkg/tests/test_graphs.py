import numpy as np
import pytest

from oracles import enumerate_min_spanning_weight, random_spanning_forest_weight
from topomil.errors import ValidationError
from topomil.graphs import (
    InstanceBag,
    InstanceGraph,
    Traversal,
    build_knn_graph,
    compute_orders,
    cosine_distance,
    invert_permutation,
    kruskal_msf,
    sample_roots,
    traverse,
)


def random_bag(rng, m, d=6):
    return InstanceBag(
        bag_id="t",
        features=rng.standard_normal((m, d)),
        coords=rng.standard_normal((m, 2)) + 5.0,
    )


def graph_from_edges(n, edges):
    adjacency = [[] for _ in range(n)]
    for i, j, _ in edges:
        adjacency[i].append(j)
        adjacency[j].append(i)
    for lst in adjacency:
        lst.sort()
    return InstanceGraph(num_nodes=n, edges=edges, adjacency=adjacency)


# === cosine distance ===

def test_cosine_distance_closed_forms():
    assert cosine_distance([1.0, 0.0], [2.0, 0.0]) == 0.0
    assert cosine_distance([1.0, 0.0], [0.0, 3.0]) == 1.0
    assert cosine_distance([1.0, 0.0], [-1.0, 0.0]) == 2.0
    assert cosine_distance([0.0, 0.0], [1.0, 1.0]) == 1.0


def test_cosine_distance_shape_check():
    with pytest.raises(ValidationError):
        cosine_distance([1.0, 2.0], [1.0, 2.0, 3.0])


# === bag validation ===

def test_bag_rejects_bad_shapes_and_nonfinite():
    with pytest.raises(ValidationError):
        InstanceBag("b", np.ones((0, 4)), np.ones((0, 2)))
    with pytest.raises(ValidationError):
        InstanceBag("b", np.ones((3, 4)), np.ones((2, 2)))
    feats = np.ones((2, 3))
    feats[0, 0] = np.nan
    with pytest.raises(ValidationError):
        InstanceBag("b", feats, np.ones((2, 2)))


def test_bag_warns_on_duplicate_coords():
    with pytest.warns(UserWarning):
        InstanceBag("b", np.ones((2, 3)), np.array([[1.0, 2.0], [1.0, 2.0]]))


# === knn graph ===

def test_knn_three_nodes_complete():
    rng = np.random.default_rng(0)
    bag = random_bag(rng, 3)
    g = build_knn_graph(bag, k=2)
    assert [(i, j) for i, j, _ in g.edges] == [(0, 1), (0, 2), (1, 2)]


def test_knn_matches_brute_force_union():
    for seed in range(8):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(4, 12))
        bag = random_bag(rng, m)
        k = int(rng.integers(1, 4))
        g = build_knn_graph(bag, k=k)

        dist = np.zeros((m, m))
        for i in range(m):
            for j in range(m):
                dist[i, j] = cosine_distance(bag.coords[i], bag.coords[j])
        pairs = set()
        for i in range(m):
            ranked = sorted((dist[i, j], j) for j in range(m) if j != i)
            for _, j in ranked[:k]:
                pairs.add((min(i, j), max(i, j)))
        assert {(i, j) for i, j, _ in g.edges} == pairs


def test_knn_edge_weights_are_feature_cosine():
    rng = np.random.default_rng(3)
    bag = random_bag(rng, 5)
    g = build_knn_graph(bag, k=2)
    for i, j, w in g.edges:
        assert w == cosine_distance(bag.features[i], bag.features[j])
        assert 0.0 <= w <= 2.0


def test_knn_structure_invariants():
    rng = np.random.default_rng(4)
    for m, k in [(1, 3), (2, 8), (6, 2), (9, 8), (9, 20)]:
        bag = random_bag(rng, m)
        g = build_knn_graph(bag, k=k)
        assert all(i < j for i, j, _ in g.edges)
        for i in range(m):
            assert i not in g.adjacency[i]
            assert g.degree(i) >= min(k, m - 1)
        if k >= m - 1 and m > 1:
            assert len(g.edges) == m * (m - 1) // 2
        if m == 1:
            assert g.edges == []


def test_knn_rejects_bad_args():
    bag = random_bag(np.random.default_rng(5), 4)
    with pytest.raises(ValidationError):
        build_knn_graph(bag, k=0)
    with pytest.raises(ValidationError):
        build_knn_graph(bag, k=2, coord_metric="manhattan")


def test_knn_euclidean_metric_switch():
    # three collinear-from-origin points: cosine ties them, euclidean does not
    bag = InstanceBag(
        "b",
        np.eye(3),
        np.array([[1.0, 1.0], [2.0, 2.0], [10.0, 10.0]]),
    )
    g_cos = build_knn_graph(bag, k=1, coord_metric="cosine")
    g_euc = build_knn_graph(bag, k=1, coord_metric="euclidean")
    # cosine distance between collinear coords is 0 for every pair, ties break
    # toward the lower index, so node 2 picks node 0
    assert (0, 2) in {(i, j) for i, j, _ in g_cos.edges}
    assert {(i, j) for i, j, _ in g_euc.edges} == {(0, 1), (1, 2)}


# === kruskal ===

def test_kruskal_triangle():
    g = graph_from_edges(3, [(0, 1, 1.0), (0, 2, 3.0), (1, 2, 2.0)])
    f = kruskal_msf(g)
    assert [(i, j) for i, j, _ in f.edges] == [(0, 1), (1, 2)]
    assert f.total_weight == 3.0


def test_kruskal_matches_enumeration_on_complete_graphs():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(3, 8))
        edges = [
            (i, j, float(rng.uniform(0.0, 2.0)))
            for i in range(m)
            for j in range(i + 1, m)
        ]
        f = kruskal_msf(graph_from_edges(m, edges))
        assert len(f.edges) == m - 1
        expect = enumerate_min_spanning_weight(m, edges)
        assert abs(f.total_weight - expect) < 1e-12


def test_kruskal_never_beaten_by_random_spanning_structures():
    rng = np.random.default_rng(11)
    for _ in range(5):
        m = int(rng.integers(4, 13))
        bag = random_bag(rng, m)
        g = build_knn_graph(bag, k=3)
        f = kruskal_msf(g)
        for _ in range(100):
            assert f.total_weight <= random_spanning_forest_weight(m, g.edges, rng) + 1e-12


def test_kruskal_disconnected_components():
    g = graph_from_edges(5, [(0, 1, 0.5), (3, 4, 0.25)])
    f = kruskal_msf(g)
    assert f.components == [[0, 1], [2], [3, 4]]
    assert f.roots == [0, 2, 3]
    assert f.parent[0] is None and f.parent[2] is None and f.parent[3] is None
    assert f.parent[1] == 0 and f.parent[4] == 3
    assert f.tree_edge_weights == {(0, 1): 0.5, (3, 4): 0.25}


def test_kruskal_deterministic_under_ties():
    edges = [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]
    f1 = kruskal_msf(graph_from_edges(3, edges))
    f2 = kruskal_msf(graph_from_edges(3, edges))
    assert f1.edges == f2.edges == [(0, 1, 1.0), (0, 2, 1.0)]


# === traversals ===

def star_forest():
    return kruskal_msf(graph_from_edges(4, [(0, 1, 0.5), (1, 2, 0.5), (1, 3, 0.5)]))


def chain_forest():
    return kruskal_msf(graph_from_edges(3, [(0, 1, 0.5), (1, 2, 0.5)]))


def test_star_tree_forced_orders():
    f = star_forest()
    np.testing.assert_array_equal(traverse(f, Traversal.PRE, roots=[1]), [1, 0, 2, 3])
    np.testing.assert_array_equal(traverse(f, Traversal.POST, roots=[1]), [0, 2, 3, 1])
    np.testing.assert_array_equal(traverse(f, Traversal.LEVEL, roots=[1]), [1, 0, 2, 3])


def test_chain_tree_forced_orders():
    f = chain_forest()
    np.testing.assert_array_equal(traverse(f, Traversal.PRE, roots=[0]), [0, 1, 2])
    np.testing.assert_array_equal(traverse(f, Traversal.LEVEL, roots=[0]), [0, 1, 2])
    np.testing.assert_array_equal(traverse(f, Traversal.POST, roots=[0]), [2, 1, 0])


def test_pre_is_not_reversed_post_on_star():
    f = star_forest()
    pre = traverse(f, Traversal.PRE, roots=[1])
    post = traverse(f, Traversal.POST, roots=[1])
    assert not np.array_equal(pre, post[::-1])


def test_index_traversal_does_not_consume_rng():
    f = star_forest()
    rng = np.random.default_rng(7)
    before = rng.bit_generator.state
    out = traverse(f, Traversal.INDEX, rng=rng)
    np.testing.assert_array_equal(out, np.arange(4))
    assert rng.bit_generator.state == before


def test_traverse_same_seed_is_deterministic():
    rng1 = np.random.default_rng(9)
    bag = random_bag(rng1, 12)
    f = kruskal_msf(build_knn_graph(bag, k=2))
    a = traverse(f, Traversal.PRE, rng=np.random.default_rng(42))
    b = traverse(f, Traversal.PRE, rng=np.random.default_rng(42))
    np.testing.assert_array_equal(a, b)


def test_all_strategies_emit_permutations_on_seeded_forests():
    for seed in range(30):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(2, 30))
        bag = random_bag(rng, m)
        f = kruskal_msf(build_knn_graph(bag, k=int(rng.integers(1, 4))))
        orders = compute_orders(f, rng)
        for order in orders.as_list():
            np.testing.assert_array_equal(np.sort(order), np.arange(m))


def test_traversal_semantics_by_construction():
    # pre: parent before child; post: children before parent; level: parent
    # before child and depth never decreases; first visited node is the root
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        m = int(rng.integers(3, 20))
        edges = [
            (i, j, float(rng.uniform(0.0, 2.0)))
            for i in range(m)
            for j in range(i + 1, m)
        ]
        f = kruskal_msf(graph_from_edges(m, edges))
        roots = sample_roots(f, rng)
        root = roots[0]
        pre = list(traverse(f, Traversal.PRE, roots=roots))
        post = list(traverse(f, Traversal.POST, roots=roots))
        level = list(traverse(f, Traversal.LEVEL, roots=roots))

        from topomil.graphs import _root_component

        parent, _ = _root_component(f.adjacency, root)
        depth = {root: 0}
        for v in level:
            if v != root:
                depth[v] = depth[parent[v]] + 1

        assert pre[0] == root and level[0] == root and post[-1] == root
        for v, p in parent.items():
            if p is None:
                continue
            assert pre.index(p) < pre.index(v)
            assert level.index(p) < level.index(v)
            assert post.index(v) < post.index(p)
        assert all(
            depth[level[i]] <= depth[level[i + 1]] for i in range(len(level) - 1)
        )


def test_compute_orders_shares_roots_across_strategies():
    rng = np.random.default_rng(13)
    bag = random_bag(rng, 15)
    f = kruskal_msf(build_knn_graph(bag, k=2))
    orders = compute_orders(f, np.random.default_rng(3))
    assert orders.pre[0] == orders.level[0] == orders.roots[0]
    assert orders.post[len(f.components[0]) - 1] == orders.roots[0]


def test_multi_component_concatenation_order():
    g = graph_from_edges(5, [(0, 1, 0.5), (3, 4, 0.25)])
    f = kruskal_msf(g)
    order = traverse(f, Traversal.PRE, roots=[1, 2, 4])
    # components in ascending smallest-node order: [0,1] then [2] then [3,4]
    np.testing.assert_array_equal(order, [1, 0, 2, 4, 3])


def test_traverse_root_validation():
    f = star_forest()
    with pytest.raises(ValidationError):
        traverse(f, Traversal.PRE, roots=[1, 2])
    with pytest.raises(ValidationError):
        traverse(f, Traversal.PRE)


def test_invert_permutation():
    np.testing.assert_array_equal(invert_permutation([0, 1, 2]), [0, 1, 2])
    np.testing.assert_array_equal(invert_permutation([2, 0, 1]), [1, 2, 0])
    rng = np.random.default_rng(17)
    p = rng.permutation(20)
    np.testing.assert_array_equal(p[invert_permutation(p)], np.arange(20))
    with pytest.raises(ValidationError):
        invert_permutation([0, 0, 1])
