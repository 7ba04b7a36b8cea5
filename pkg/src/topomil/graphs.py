"""Instance bags, instance graphs, spanning forests, traversal orders.

A bag of M instances (feature vectors with 2-D positions) becomes an
undirected k-nearest-neighbor graph; Kruskal reduces that to a minimum
spanning forest; the forest is serialized into four node orders (index,
pre-order, post-order, level-order) that downstream scans consume. All of
this is plain numpy with no differentiation involved.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ValidationError

COORD_METRICS = ("cosine", "euclidean")


class Traversal(Enum):
    INDEX = "index"
    PRE = "pre"
    POST = "post"
    LEVEL = "level"


@dataclass
class InstanceBag:
    """One bag: M instances with D_in features and 2-D coordinates each."""

    bag_id: str
    features: np.ndarray  # (M, D_in)
    coords: np.ndarray    # (M, 2)
    label: int | None = None
    time_bin: int | None = None
    event: str | None = None  # "observed" or "censored"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValidationError(
                f"bag {self.bag_id}: features must be (M >= 1, D), got {self.features.shape}"
            )
        if self.coords.shape != (self.features.shape[0], 2):
            raise ValidationError(
                f"bag {self.bag_id}: coords must be ({self.features.shape[0]}, 2), "
                f"got {self.coords.shape}"
            )
        if not np.isfinite(self.features).all() or not np.isfinite(self.coords).all():
            raise ValidationError(f"bag {self.bag_id}: non-finite features or coords")
        if len(np.unique(self.coords, axis=0)) < self.coords.shape[0]:
            warnings.warn(f"bag {self.bag_id}: duplicate coordinates", stacklevel=2)

    @property
    def num_instances(self) -> int:
        return self.features.shape[0]


def cosine_distance(u, v) -> float:
    """1 - cos(u, v); a zero-norm operand pins the distance to 1.0."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValidationError(f"cosine_distance: shapes {u.shape} and {v.shape} differ")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        return 1.0
    return float(np.clip(1.0 - float(u @ v) / (nu * nv), 0.0, 2.0))


def _pairwise_cosine(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    ok = norms >= 1e-12
    unit = np.where(ok[:, None], x / np.where(ok, norms, 1.0)[:, None], 0.0)
    d = 1.0 - unit @ unit.T
    d[~ok, :] = 1.0
    d[:, ~ok] = 1.0
    return np.clip(d, 0.0, 2.0)


def _pairwise_euclidean(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


@dataclass
class InstanceGraph:
    """Undirected instance graph: symmetric, no self loops, weighted edges."""

    num_nodes: int
    edges: list[tuple[int, int, float]]      # (i, j, w) with i < j
    adjacency: list[list[int]]               # sorted neighbor lists

    def degree(self, i: int) -> int:
        return len(self.adjacency[i])


def build_knn_graph(bag: InstanceBag, k: int, coord_metric: str = "cosine") -> InstanceGraph:
    """Symmetrized k-nearest-neighbor graph over instance coordinates.

    Neighbors are the k nearest other nodes by coordinate distance (cosine
    by default), ties broken toward the lower node index; the directed
    lists are unioned. Edge weights are the cosine distance between the two
    endpoint feature vectors, so they live in [0, 2].
    """
    if k < 1:
        raise ValidationError(f"build_knn_graph: k must be >= 1, got {k}")
    if coord_metric not in COORD_METRICS:
        raise ValidationError(
            f"build_knn_graph: coord_metric must be one of {COORD_METRICS}, got {coord_metric!r}"
        )
    m = bag.num_instances
    if m == 1:
        return InstanceGraph(num_nodes=1, edges=[], adjacency=[[]])

    dist = (_pairwise_cosine if coord_metric == "cosine" else _pairwise_euclidean)(bag.coords)
    kk = min(k, m - 1)
    pairs: set[tuple[int, int]] = set()
    order_key = np.arange(m)
    for i in range(m):
        # sort by (distance, index), self excluded
        ranked = np.lexsort((order_key, dist[i]))
        picked = [j for j in ranked if j != i][:kk]
        for j in picked:
            pairs.add((min(i, j), max(i, j)))

    edges = []
    for i, j in sorted(pairs):
        edges.append((i, j, cosine_distance(bag.features[i], bag.features[j])))
    adjacency: list[list[int]] = [[] for _ in range(m)]
    for i, j, _ in edges:
        adjacency[i].append(j)
        adjacency[j].append(i)
    for lst in adjacency:
        lst.sort()
    return InstanceGraph(num_nodes=m, edges=edges, adjacency=adjacency)


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:  # path compression
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return True


@dataclass
class SpanningForest:
    """Minimum spanning forest of an instance graph.

    `parent`/`children`/`roots` hold a deterministic default rooting (the
    smallest node of each component); `traverse` re-roots on demand.
    Components are listed in ascending order of their smallest node.
    """

    num_nodes: int
    edges: list[tuple[int, int, float]]
    adjacency: list[list[int]]
    components: list[list[int]]
    roots: list[int]
    parent: list[int | None]
    children: list[list[int]]
    tree_edge_weights: dict[tuple[int, int], float] = field(default_factory=dict)

    @property
    def total_weight(self) -> float:
        return float(sum(w for _, _, w in self.edges))


def _root_component(adjacency: list[list[int]], root: int):
    """BFS rooting; returns ({node: parent}, {node: children ascending})."""
    parent = {root: None}
    children: dict[int, list[int]] = {root: []}
    queue = deque([root])
    while queue:
        v = queue.popleft()
        kids = [u for u in adjacency[v] if u != parent[v]]
        kids.sort()
        children[v] = kids
        for u in kids:
            parent[u] = v
            queue.append(u)
    return parent, children


def kruskal_msf(graph: InstanceGraph) -> SpanningForest:
    """Kruskal's algorithm; a forest when the graph is disconnected.

    Edges are considered in ascending (weight, i, j) order with i < j, so
    the accepted set is deterministic under ties.
    """
    n = graph.num_nodes
    uf = _UnionFind(n)
    accepted: list[tuple[int, int, float]] = []
    for i, j, w in sorted(graph.edges, key=lambda e: (e[2], e[0], e[1])):
        if uf.union(i, j):
            accepted.append((i, j, w))

    adjacency: list[list[int]] = [[] for _ in range(n)]
    weights: dict[tuple[int, int], float] = {}
    for i, j, w in accepted:
        adjacency[i].append(j)
        adjacency[j].append(i)
        weights[(i, j)] = w
    for lst in adjacency:
        lst.sort()

    groups: dict[int, list[int]] = {}
    for v in range(n):
        groups.setdefault(uf.find(v), []).append(v)
    components = sorted((sorted(nodes) for nodes in groups.values()), key=lambda c: c[0])

    roots = [comp[0] for comp in components]
    parent: list[int | None] = [None] * n
    children: list[list[int]] = [[] for _ in range(n)]
    for root in roots:
        par, chi = _root_component(adjacency, root)
        for v, p in par.items():
            parent[v] = p
        for v, kids in chi.items():
            children[v] = kids

    return SpanningForest(
        num_nodes=n,
        edges=accepted,
        adjacency=adjacency,
        components=components,
        roots=roots,
        parent=parent,
        children=children,
        tree_edge_weights=weights,
    )


def sample_roots(forest: SpanningForest, rng: np.random.Generator) -> list[int]:
    """One root per component, uniform over that component's nodes."""
    return [comp[int(rng.integers(len(comp)))] for comp in forest.components]


def _order_component(children: dict[int, list[int]], root: int, strategy: Traversal) -> list[int]:
    if strategy is Traversal.PRE:
        out, stack = [], [root]
        while stack:
            v = stack.pop()
            out.append(v)
            stack.extend(reversed(children[v]))
        return out
    if strategy is Traversal.POST:
        # reverse pre-order with children pushed ascending = post-order reversed
        seq, stack = [], [root]
        while stack:
            v = stack.pop()
            seq.append(v)
            stack.extend(children[v])
        return seq[::-1]
    if strategy is Traversal.LEVEL:
        out, queue = [], deque([root])
        while queue:
            v = queue.popleft()
            out.append(v)
            queue.extend(children[v])
        return out
    raise ValidationError(f"unknown traversal {strategy!r}")


def traverse(
    forest: SpanningForest,
    strategy: Traversal,
    rng: np.random.Generator | None = None,
    roots: list[int] | None = None,
) -> np.ndarray:
    """Serialize the forest into one node order.

    INDEX returns the identity without consuming the rng. The other three
    re-root each tree (at `roots` if given, else drawn uniformly from
    `rng`), walk children in ascending index order, and concatenate the
    per-tree orders by ascending smallest node index.
    """
    if strategy is Traversal.INDEX:
        return np.arange(forest.num_nodes)
    if roots is None:
        if rng is None:
            raise ValidationError("traverse: need rng or explicit roots")
        roots = sample_roots(forest, rng)
    if len(roots) != len(forest.components):
        raise ValidationError(
            f"traverse: {len(roots)} roots for {len(forest.components)} components"
        )
    out: list[int] = []
    for comp, root in zip(forest.components, roots):
        if root not in comp:
            raise ValidationError(f"traverse: root {root} not in component {comp}")
        _, children = _root_component(forest.adjacency, root)
        out.extend(_order_component(children, root, strategy))
    order = np.array(out, dtype=np.intp)
    if sorted(out) != list(range(forest.num_nodes)):
        raise ValidationError("traverse: produced a non-permutation")  # pragma: no cover
    return order


@dataclass
class TraversalOrders:
    """The four serializations of one forest under a shared set of roots."""

    index: np.ndarray
    pre: np.ndarray
    post: np.ndarray
    level: np.ndarray
    roots: list[int]

    def get(self, strategy: Traversal) -> np.ndarray:
        return {
            Traversal.INDEX: self.index,
            Traversal.PRE: self.pre,
            Traversal.POST: self.post,
            Traversal.LEVEL: self.level,
        }[strategy]

    def as_list(self) -> list[np.ndarray]:
        return [self.index, self.pre, self.post, self.level]


def compute_orders(forest: SpanningForest, rng: np.random.Generator) -> TraversalOrders:
    """Draw roots once, then build all four orders from the same rooting."""
    roots = sample_roots(forest, rng)
    return TraversalOrders(
        index=traverse(forest, Traversal.INDEX),
        pre=traverse(forest, Traversal.PRE, roots=roots),
        post=traverse(forest, Traversal.POST, roots=roots),
        level=traverse(forest, Traversal.LEVEL, roots=roots),
        roots=roots,
    )


def invert_permutation(p) -> np.ndarray:
    """Inverse q of a permutation p, so q[p[i]] = i."""
    p = np.asarray(p, dtype=np.intp)
    n = p.size
    if p.ndim != 1 or not np.array_equal(np.sort(p), np.arange(n)):
        raise ValidationError("invert_permutation: input is not a permutation")
    q = np.empty(n, dtype=np.intp)
    q[p] = np.arange(n)
    return q
