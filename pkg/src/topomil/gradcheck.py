"""Finite-difference verification suites for the reverse-mode substrate.

Three scopes, mirroring how the gradients compose:

  primitives  every differentiable primitive in isolation, tight tolerance
  blocks      the scan blocks, pooling, and losses as composites
  model       the full bag pipeline, loss gradient wrt every parameter

Every check compares reverse-mode gradients against central differences
and reports the worst semi-relative disagreement. Large tensors are
subsampled entry-wise with a seeded rng; the comparison itself is exact
at the sampled entries.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, fields as dataclass_fields

import numpy as np

from . import numerics as nm
from .blocks import (
    GraphAggregationBlock,
    TreeScanBlock,
    graph_aggregation_forward,
    neighbor_softmax_sum,
    tree_scan_forward,
)
from .config import ModelConfig
from .errors import ValidationError
from .graphs import InstanceBag, build_knn_graph
from .mil import AttentionPool, attention_pool, cross_entropy, survival_nll
from .model import Model, bag_loss, build_model, forward_bag
from .numerics import Tensor
from .ssm import SelectiveSSMParams, bi_ssm, scan

PRIMITIVE_TOL = 1e-5
COMPOSITE_TOL = 1e-4
SCOPES = ("primitives", "blocks", "model")


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _run(name: str, f, x: Tensor, tolerance: float,
         max_entries: int | None = None, rng=None) -> CheckResult:
    t0 = time.perf_counter()
    err = nm.finite_diff_check(f, x, max_entries=max_entries, rng=rng)
    return CheckResult(name, float(err), tolerance, time.perf_counter() - t0)


def primitive_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    m = Tensor(rng.standard_normal((4, 3)))
    w = Tensor(rng.standard_normal((3, 5)))
    b = Tensor(rng.standard_normal(5))
    other = Tensor(rng.standard_normal((4, 3)))
    gathered_w = Tensor(rng.standard_normal((5, 3)))
    gamma = Tensor(rng.standard_normal(3))
    beta = Tensor(rng.standard_normal(3))
    idx = np.array([0, 2, 1, 2, 3])
    vec = Tensor(rng.standard_normal(6))
    reshaped_w = Tensor(rng.standard_normal((3, 4)))

    probes: dict[str, tuple] = {
        "linear": (lambda t: nm.sum_all(nm.mul(nm.linear(t, w, b), nm.linear(t, w, b))), m),
        "matmul": (lambda t: nm.sum_all(nm.matmul(t, w)), m),
        "add": (lambda t: nm.sum_all(nm.mul(nm.add(t, other), other)), m),
        "sub": (lambda t: nm.sum_all(nm.mul(nm.sub(t, other), other)), m),
        "mul": (lambda t: nm.sum_all(nm.mul(t, other)), m),
        "scale": (lambda t: nm.sum_all(nm.scale(t, -1.7)), m),
        "add_scalar": (lambda t: nm.sum_all(nm.mul(nm.add_scalar(t, 2.5), other)), m),
        "neg": (lambda t: nm.sum_all(nm.mul(nm.neg(t), other)), m),
        "relu": (lambda t: nm.sum_all(nm.mul(nm.relu(t), other)), m),
        "tanh": (lambda t: nm.sum_all(nm.mul(nm.tanh(t), other)), m),
        "exp": (lambda t: nm.sum_all(nm.mul(nm.exp(t), other)), m),
        "sigmoid": (lambda t: nm.sum_all(nm.mul(nm.sigmoid(t), other)), m),
        "softplus": (lambda t: nm.sum_all(nm.mul(nm.softplus(t), other)), m),
        "silu": (lambda t: nm.sum_all(nm.mul(nm.silu(t), other)), m),
        "softmax": (lambda t: nm.sum_all(nm.mul(nm.softmax(t, axis=0), other)), m),
        "logsumexp": (lambda t: nm.logsumexp(t), vec),
        "layer_norm": (lambda t: nm.sum_all(nm.mul(nm.layer_norm(t, gamma, beta), other)), m),
        "sum_all": (lambda t: nm.sum_all(t), m),
        "gather_rows": (lambda t: nm.sum_all(nm.mul(nm.gather_rows(t, idx), gathered_w)), m),
        "flip0": (lambda t: nm.sum_all(nm.mul(nm.flip0(t), other)), m),
        "reshape": (lambda t: nm.sum_all(nm.mul(nm.reshape(t, (3, 4)), reshaped_w)), m),
        "stack0": (lambda t: nm.sum_all(nm.mul(nm.index0(nm.stack0([t, other]), 0), other)), m),
    }

    results = [
        _run(name, f, Tensor(x0.data.copy(), requires_grad=True), PRIMITIVE_TOL)
        for name, (f, x0) in probes.items()
    ]

    # the scan primitive, one check per argument
    sx = rng.standard_normal((5, 2, 2))
    sb = rng.standard_normal((5, 3))
    sc = rng.standard_normal((5, 3))
    sd = rng.uniform(0.05, 0.6, size=(5, 2))
    sa = -rng.uniform(0.5, 2.0, size=2)
    weight = Tensor(rng.standard_normal((5, 2, 2)))
    args = {"x": sx, "b": sb, "c": sc, "delta": sd, "a": sa}

    def scan_probe(which):
        def f(t):
            parts = {k: (t if k == which else Tensor(v)) for k, v in args.items()}
            y = scan(parts["x"], parts["b"], parts["c"], parts["delta"], parts["a"])
            return nm.sum_all(nm.mul(y, weight))
        return f

    for which, value in args.items():
        results.append(_run(
            f"scan.{which}", scan_probe(which),
            Tensor(np.array(value), requires_grad=True), PRIMITIVE_TOL,
        ))

    adjacency = [[1, 2], [0], [0, 1, 3], [2], []]
    nb_w = Tensor(rng.standard_normal((5, 3)))
    results.append(_run(
        "neighbor_softmax_sum",
        lambda t: nm.sum_all(nm.mul(neighbor_softmax_sum(t, adjacency), nb_w)),
        Tensor(rng.standard_normal((5, 3)), requires_grad=True),
        PRIMITIVE_TOL,
    ))
    return results


def block_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    m, dim = 6, 4

    ts = TreeScanBlock.init(rng, dim=dim, num_heads=2, state_dim=3,
                            n_branches=2, bidirectional=True)
    orders = [rng.permutation(m), rng.permutation(m)]
    x0 = rng.standard_normal((m, dim))
    results.append(_run(
        "tree_scan.x",
        lambda t: nm.sum_all(tree_scan_forward(t, orders, ts)),
        Tensor(x0, requires_grad=True), COMPOSITE_TOL,
    ))

    bag = InstanceBag(bag_id="g", features=rng.standard_normal((m, dim)),
                      coords=rng.uniform(0.5, 4.0, size=(m, 2)))
    graph = build_knn_graph(bag, k=2)
    gia = GraphAggregationBlock.init(rng, dim=dim)
    results.append(_run(
        "graph_aggregation.x",
        lambda t: nm.sum_all(graph_aggregation_forward(t, graph, gia)),
        Tensor(x0, requires_grad=True), COMPOSITE_TOL,
    ))

    pool = AttentionPool.init(rng, dim=dim, attn_dim=3)
    pw = Tensor(rng.standard_normal((1, dim)))
    results.append(_run(
        "attention_pool.h",
        lambda t: nm.sum_all(nm.mul(attention_pool(t, pool)[0], pw)),
        Tensor(x0, requires_grad=True), COMPOSITE_TOL,
    ))

    fwd = SelectiveSSMParams.init(rng, model_dim=dim, num_heads=2, state_dim=3)
    bwd = SelectiveSSMParams.init(rng, model_dim=dim, num_heads=2, state_dim=3)
    results.append(_run(
        "bi_ssm.x",
        lambda t: nm.sum_all(bi_ssm(t, fwd, bwd)),
        Tensor(x0, requires_grad=True), COMPOSITE_TOL,
    ))

    logits = rng.standard_normal(4)
    results.append(_run(
        "cross_entropy.logits",
        lambda t: cross_entropy(t, 1),
        Tensor(logits, requires_grad=True), COMPOSITE_TOL,
    ))
    results.append(_run(
        "survival_nll.observed",
        lambda t: survival_nll(t, 2, "observed"),
        Tensor(logits, requires_grad=True), COMPOSITE_TOL,
    ))
    results.append(_run(
        "survival_nll.censored",
        lambda t: survival_nll(t, 1, "censored"),
        Tensor(logits, requires_grad=True), COMPOSITE_TOL,
    ))
    return results


def _parameter_slots(model: Model) -> dict[str, tuple[object, str]]:
    owners: list[object] = [model, model.pool]
    if model.gia is not None:
        owners.append(model.gia)
    for blk in (model.block1, model.block2):
        owners.append(blk)
        for br in blk.branches:
            owners.append(br.fwd)
            if br.bwd is not None:
                owners.append(br.bwd)
    slots = {}
    for name, tensor in model.named_parameters().items():
        for owner in owners:
            for fld in dataclass_fields(owner):
                if getattr(owner, fld.name) is tensor:
                    slots[name] = (owner, fld.name)
    return slots


def model_checks(seed: int = 0, max_entries: int = 8) -> list[CheckResult]:
    """Loss gradient of the full pipeline wrt every parameter, 6-instance bag."""
    rng = np.random.default_rng(seed)
    bag = InstanceBag(
        bag_id="check",
        features=rng.standard_normal((6, 3)),
        coords=rng.uniform(0.5, 4.0, size=(6, 2)),
        label=1,
        time_bin=2,
        event="observed",
    )
    results = []
    for task in ("classification", "survival"):
        config = ModelConfig(
            input_dim=3, model_dim=4, num_heads=2, head_dim=2, state_dim=2,
            attn_dim=2, knn_k=2, task=task, num_bins=4, seed=seed,
        )
        model = build_model(config)
        # nudge every parameter off its init point: zero biases park whole
        # activations exactly on relu kinks, where central differences and
        # the subgradient legitimately disagree
        jitter = np.random.default_rng(seed + 13)
        for p in model.named_parameters().values():
            p.data = p.data + jitter.normal(0.0, 0.05, size=p.data.shape)
        slots = _parameter_slots(model)

        def loss_through(name, t):
            owner, attr = slots[name]
            original = getattr(owner, attr)
            setattr(owner, attr, t)
            try:
                out = forward_bag(model, bag, np.random.default_rng(7))
                return bag_loss(out, bag, task)
            finally:
                setattr(owner, attr, original)

        for name, tensor in model.named_parameters().items():
            results.append(_run(
                f"{task}.{name}",
                lambda t, _n=name: loss_through(_n, t),
                tensor,
                COMPOSITE_TOL,
                max_entries=max_entries,
                rng=np.random.default_rng(seed + 1),
            ))
    return results


def run_scope(scope: str, seed: int = 0) -> list[CheckResult]:
    if scope == "primitives":
        return primitive_checks(seed)
    if scope == "blocks":
        return block_checks(seed)
    if scope == "model":
        return model_checks(seed)
    if scope == "all":
        return primitive_checks(seed) + block_checks(seed) + model_checks(seed)
    raise ValidationError(f"unknown gradcheck scope {scope!r}; choose from {SCOPES + ('all',)}")
