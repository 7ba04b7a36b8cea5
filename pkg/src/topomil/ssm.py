"""Selective state-space scan with input-dependent discretization.

The recurrence, per head h with state S in R^{P x N}:

    S_i = Abar_i * S_{i-1} + Delta_i * (x_i outer B_i)
    y_i = S_i @ C_i

with Abar_i = exp(Delta_i * A_h) (exact zero-order hold on A) and the
input term using the first-order hold Bbar_i ~= Delta_i * B_i. A_h is a
negative scalar per head (stored as a_log with A = -exp(a_log)), and
Delta_i > 0, so |Abar_i| < 1 and the recurrence is stable. B, C and Delta
are projections of the input sequence itself, which is what makes the
scan selective.

`scan` is one primitive with a hand-derived adjoint: the forward pass is a
single sequential left-to-right loop (cost O(M * H * P * N), linear in M;
no prefix-scan kernel), and the backward pass replays it right-to-left.
An optional leading branch axis batches several independent sequences of
equal length through one Python loop; `multi_scan` builds on that, and
batched-vs-single equality is unit-tested.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import DimensionError, NumericError, ValidationError
from .numerics import Tensor


@dataclass
class SelectiveSSMParams:
    """Per-direction parameters of one selective scan.

    The scan sees the model width as num_heads blocks of head_dim channels;
    B and C are shared across heads (one N-vector per step), Delta is one
    positive scalar per head per step.
    """

    num_heads: int
    head_dim: int
    state_dim: int
    a_log: Tensor  # (H,), A = -exp(a_log)
    w_b: Tensor    # (H*P, N)
    w_c: Tensor    # (H*P, N)
    w_dt: Tensor   # (H*P, H)
    p_dt: Tensor   # (H,), bias inside the softplus

    @property
    def model_dim(self) -> int:
        return self.num_heads * self.head_dim

    @classmethod
    def init(cls, rng: np.random.Generator, model_dim: int, num_heads: int,
             state_dim: int, dtype=np.float64) -> "SelectiveSSMParams":
        if model_dim % num_heads != 0:
            raise ValidationError(
                f"model width {model_dim} not divisible by {num_heads} heads"
            )
        head_dim = model_dim // num_heads
        scale = 1.0 / np.sqrt(model_dim)
        # W_dt starts at zero so the initial step sizes come from the bias,
        # drawn to land softplus(p_dt) in [0.01, 0.1]
        dt0 = rng.uniform(0.01, 0.1, size=num_heads)
        return cls(
            num_heads=num_heads,
            head_dim=head_dim,
            state_dim=state_dim,
            a_log=nm.parameter(np.log(rng.uniform(1.0, 2.0, size=num_heads)), dtype=dtype),
            w_b=nm.parameter(rng.normal(0.0, scale, size=(model_dim, state_dim)), dtype=dtype),
            w_c=nm.parameter(rng.normal(0.0, scale, size=(model_dim, state_dim)), dtype=dtype),
            w_dt=nm.parameter(np.zeros((model_dim, num_heads)), dtype=dtype),
            p_dt=nm.parameter(np.log(np.expm1(dt0)), dtype=dtype),
        )

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.a_log": self.a_log,
            f"{prefix}.w_b": self.w_b,
            f"{prefix}.w_c": self.w_c,
            f"{prefix}.w_dt": self.w_dt,
            f"{prefix}.p_dt": self.p_dt,
        }


def discretize(a: float, delta: float, b) -> tuple[float, np.ndarray]:
    """Hold rule for one step: Abar = exp(delta * a), Bbar = delta * b.

    Plain-number documentation of the rule the scan applies internally;
    exact exponential hold on A, first-order hold on B.
    """
    if delta < 0:
        raise ValidationError(f"discretize: delta must be >= 0, got {delta}")
    return float(np.exp(delta * a)), delta * np.asarray(b, dtype=np.float64)


def selective_params(x: Tensor, params: SelectiveSSMParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent B, C, Delta for one direction.

    B and C are plain projections of x; Delta = softplus(x @ W_dt + p_dt)
    is strictly positive.
    """
    if x.data.ndim != 2 or x.data.shape[1] != params.model_dim:
        raise DimensionError(
            f"selective_params: x{x.data.shape} does not match model width {params.model_dim}"
        )
    b = nm.matmul(x, params.w_b)
    c = nm.matmul(x, params.w_c)
    delta = nm.softplus(nm.linear(x, params.w_dt, params.p_dt))
    return b, c, delta


def scan(x: Tensor, b: Tensor, c: Tensor, delta: Tensor, a: Tensor) -> Tensor:
    """Run the selective recurrence along axis -3 (the sequence axis).

    Shapes, unbatched: x (M, H, P), b (M, N), c (M, N), delta (M, H),
    a (H,). A leading branch axis G on all five arguments batches
    independent sequences. Returns y with the shape of x.

    Raises a numeric error naming the first bad step if the output goes
    non-finite, and a validation error when delta is not positive.
    """
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    bd = b.data if batched else b.data[None]
    cd = c.data if batched else c.data[None]
    dd = delta.data if batched else delta.data[None]
    ad = a.data if batched else a.data[None]
    if xd.ndim != 4 or bd.ndim != 3 or cd.ndim != 3 or dd.ndim != 3 or ad.ndim != 2:
        raise DimensionError(
            f"scan: bad ranks x{x.data.shape} b{b.data.shape} c{c.data.shape} "
            f"delta{delta.data.shape} a{a.data.shape}"
        )
    g_n, m, h_n, p_n = xd.shape
    n_n = bd.shape[-1]
    if (
        bd.shape != (g_n, m, n_n)
        or cd.shape != (g_n, m, n_n)
        or dd.shape != (g_n, m, h_n)
        or ad.shape != (g_n, h_n)
    ):
        raise DimensionError(
            f"scan: inconsistent shapes x{x.data.shape} b{b.data.shape} "
            f"c{c.data.shape} delta{delta.data.shape} a{a.data.shape}"
        )
    if not np.all(dd > 0):
        raise ValidationError("scan: delta must be strictly positive")

    inputs = (x, b, c, delta, a)
    keep_states = nm.active_tape() is not None and any(t.requires_grad for t in inputs)

    abar = np.exp(dd * ad[:, None, :])              # (G, M, H)
    dx = dd[..., None] * xd                         # (G, M, H, P)
    s = np.zeros((g_n, h_n, p_n, n_n), dtype=xd.dtype)
    y = np.empty_like(xd)
    s_hist = np.empty((g_n, m, h_n, p_n, n_n), dtype=xd.dtype) if keep_states else None
    for i in range(m):
        s = abar[:, i, :, None, None] * s + dx[:, i, :, :, None] * bd[:, i, None, None, :]
        if keep_states:
            s_hist[:, i] = s
        y[:, i] = (s.reshape(g_n, h_n * p_n, n_n) @ cd[:, i, :, None]).reshape(g_n, h_n, p_n)

    if not np.isfinite(y).all():
        bad = int(np.argmax(~np.isfinite(y).reshape(g_n, m, -1).all(axis=(0, 2))))
        raise NumericError(f"scan: non-finite output at step {bad}")

    out = nm.make_output(y if batched else y[0], inputs)

    def pull(grad: np.ndarray) -> None:
        gy = grad if batched else grad[None]
        gs = np.zeros_like(s)
        d_x = np.empty_like(xd)
        d_b = np.empty_like(bd)
        d_c = np.empty_like(cd)
        d_delta = np.empty_like(dd)
        d_a = np.zeros_like(ad)
        for i in range(m - 1, -1, -1):
            s_i = s_hist[:, i]
            s_prev = s_hist[:, i - 1] if i > 0 else np.zeros_like(gs)
            # y_i = S_i @ C_i
            d_c[:, i] = (s_i * gy[:, i, :, :, None]).sum(axis=(1, 2))
            gs = gs + gy[:, i, :, :, None] * cd[:, i, None, None, :]
            # S_i = abar_i * S_{i-1} + (delta_i * x_i) outer B_i
            d_abar = (gs * s_prev).sum(axis=(2, 3))                       # (G, H)
            gb = (gs.reshape(g_n, h_n * p_n, n_n) @ bd[:, i, :, None]).reshape(g_n, h_n, p_n)
            d_x[:, i] = dd[:, i, :, None] * gb
            d_b[:, i] = (gs * dx[:, i, :, :, None]).sum(axis=(1, 2))
            d_delta[:, i] = d_abar * abar[:, i] * ad + (gb * xd[:, i]).sum(axis=-1)
            d_a += d_abar * abar[:, i] * dd[:, i]
            gs = abar[:, i, :, None, None] * gs

        nm.accumulate(x, d_x if batched else d_x[0])
        nm.accumulate(b, d_b if batched else d_b[0])
        nm.accumulate(c, d_c if batched else d_c[0])
        nm.accumulate(delta, d_delta if batched else d_delta[0])
        nm.accumulate(a, d_a if batched else d_a[0])

    nm.record(out, pull)
    return out


def multi_scan(branches: list[tuple[Tensor, SelectiveSSMParams]]) -> list[Tensor]:
    """Run several equal-length selective scans as one batched primitive.

    Each branch supplies its own sequence (M, model_dim) and its own
    parameters; returns the per-branch outputs at the same shape.
    """
    if not branches:
        raise ValidationError("multi_scan: need at least one branch")
    m = branches[0][0].data.shape[0]
    heads = branches[0][1].num_heads
    pdim = branches[0][1].head_dim
    xs, bs, cs, ds, avs = [], [], [], [], []
    for xb, par in branches:
        if xb.data.shape != (m, par.model_dim) or par.num_heads != heads or par.head_dim != pdim:
            raise DimensionError(
                f"multi_scan: branch shape {xb.data.shape} or head grid "
                f"({par.num_heads},{par.head_dim}) inconsistent across branches"
            )
        b, c, delta = selective_params(xb, par)
        xs.append(nm.reshape(xb, (m, heads, pdim)))
        bs.append(b)
        cs.append(c)
        ds.append(delta)
        avs.append(nm.neg(nm.exp(par.a_log)))
    if len(branches) == 1:
        y = scan(xs[0], bs[0], cs[0], ds[0], avs[0])
        return [nm.reshape(y, (m, heads * pdim))]
    y = scan(nm.stack0(xs), nm.stack0(bs), nm.stack0(cs), nm.stack0(ds), nm.stack0(avs))
    return [nm.reshape(nm.index0(y, g), (m, heads * pdim)) for g in range(len(branches))]


def bi_ssm(x: Tensor, fwd: SelectiveSSMParams, bwd: SelectiveSSMParams) -> Tensor:
    """Bidirectional selective scan: average of a forward pass over x and a
    backward pass over reversed x (flipped back), each direction computing
    its own selective parameters from its own ordering."""
    y_f, y_b = multi_scan([(x, fwd), (nm.flip0(x), bwd)])
    return nm.scale(nm.add(y_f, nm.flip0(y_b)), 0.5)


def benchmark_scan(
    lengths,
    reps: int = 5,
    num_heads: int = 4,
    head_dim: int = 32,
    state_dim: int = 32,
    seed: int = 0,
) -> list[tuple[int, float]]:
    """Median forward wall time of one scan at each sequence length."""
    results = []
    for m in lengths:
        m = int(m)
        if m < 1:
            raise ValidationError(f"benchmark_scan: bad length {m}")
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((m, num_heads, head_dim)))
        b = Tensor(rng.standard_normal((m, state_dim)))
        c = Tensor(rng.standard_normal((m, state_dim)))
        delta = Tensor(rng.uniform(0.01, 0.1, size=(m, num_heads)))
        a = Tensor(-rng.uniform(1.0, 2.0, size=num_heads))
        times = []
        for _ in range(int(reps)):
            t0 = time.perf_counter()
            scan(x, b, c, delta, a)
            times.append(time.perf_counter() - t0)
        results.append((m, float(np.median(times))))
    return results
