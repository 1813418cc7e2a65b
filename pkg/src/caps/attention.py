"""Three-path gated attention with rotary alignment.

A single layer mixes positions through the elementwise product of a
rotation-aligned similarity and the sum of up to three causal weight
tables, each with its own normalization:

* riemann path   -- a clock-weighted causal softmax over positions,
* prefix path    -- multiplicative decay depending only on the gap (i, t],
* clock path     -- a content-agnostic share of accumulated clock weight.

The same operator is evaluated two ways: ``attend_quadratic`` materializes
every pairwise weight (the reference, and the only form that supports the
softmax wrapper), while ``attend_linear`` runs gated recurrences over
running states so its cost is linear in sequence length.  For the identity
wrapper the two agree to float precision.

Shape conventions: hidden states are ``(..., T, d)``; per-head tensors are
``(..., T, H, d_h)``; pairwise tables are ``(..., H, T, T)`` indexed
``[head, query t, key i]`` with zeros wherever ``i > t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, UnsupportedModeError
from .numerics import (
    Array,
    Rng,
    add,
    bmm,
    concat,
    cos,
    cummax,
    cumsum,
    exp,
    linear_scan,
    log,
    max_pair,
    moveaxis,
    mul,
    neg,
    recip,
    reshape,
    sin,
    slice_axis,
    softplus,
    sub,
)
from .numerics.engine import _count, _record, _unbroadcast, as_array

__all__ = [
    "CapsConfig",
    "KernelParams",
    "GateSignals",
    "ScoreDecomposition",
    "init_kernel_params",
    "clock",
    "apply_rotation",
    "build_gates",
    "path_weights",
    "attend_quadratic",
    "attend_linear",
    "concat_paths",
]


@dataclass(frozen=True)
class CapsConfig:
    """Kernel hyperparameters.

    ``score_scale=None`` resolves to 1/sqrt(head_dim) under the softmax
    wrapper and 1/head_dim under the identity wrapper, keeping score
    variance O(1) at initialization.
    """

    num_heads: int = 4
    head_dim: int = 4
    phi_mode: str = "identity"  # "identity" (linear cost) or "softmax"
    riemann_path: bool = True
    prefix_path: bool = True
    clock_path: bool = True
    clock_epsilon: float = 1e-4
    freq_init: str = "rope_standard"  # or "uniform"
    freq_base: float = 10000.0
    freq_range: tuple[float, float] = (0.1, 1.0)
    score_scale: float | None = None

    def __post_init__(self):
        if self.num_heads < 1:
            raise ConfigurationError("num_heads must be positive")
        if self.head_dim < 2 or self.head_dim % 2:
            raise ConfigurationError("head_dim must be even (rotations act on pairs)")
        if self.phi_mode not in ("identity", "softmax"):
            raise ConfigurationError(f"unknown phi_mode {self.phi_mode!r}")
        if self.clock_epsilon <= 0:
            raise ConfigurationError("clock_epsilon must be positive")
        if not (self.riemann_path or self.prefix_path or self.clock_path):
            raise ConfigurationError("at least one path must be enabled")
        if self.freq_init not in ("rope_standard", "uniform"):
            raise ConfigurationError(f"unknown freq_init {self.freq_init!r}")
        if self.freq_init == "uniform" and not self.freq_range[0] < self.freq_range[1]:
            raise ConfigurationError("freq_range must be increasing")

    @property
    def width(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def effective_score_scale(self) -> float:
        if self.score_scale is not None:
            return self.score_scale
        if self.phi_mode == "softmax":
            return 1.0 / np.sqrt(self.head_dim)
        return 1.0 / self.head_dim


@dataclass
class KernelParams:
    """Learned projections of one attention layer.

    ``w_q/w_k/w_v`` map width d to num_heads*head_dim; ``w_c/w_p/w_g`` map
    d to one scalar per head; ``omega`` holds head_dim/2 rotation
    frequencies per head.
    """

    w_q: Array
    w_k: Array
    w_v: Array
    w_c: Array
    w_p: Array
    w_g: Array
    omega: Array


@dataclass
class GateSignals:
    """Per-position, per-head gating values: positive clock increments
    ``delta``, selection scores ``p``, and negative decay rates
    ``g_tilde = -softplus(g) * delta``."""

    delta: Array
    p: Array
    g_tilde: Array


@dataclass
class ScoreDecomposition:
    """Additive pairwise weight tables, ``(..., H, T, T)`` with zeros for
    i > t.  ``total`` is the pre-wrapper score
    rot_score * (G + A + B) * score_scale with disabled paths zeroed."""

    G: Array
    A: Array
    B: Array
    rot_score: Array
    total: Array


def init_kernel_params(width: int, config: CapsConfig, rng: Rng, std: float = 0.02) -> KernelParams:
    """Sample fresh kernel projections (weights ~ Normal(0, std^2))."""
    hd = config.num_heads * config.head_dim
    half = config.head_dim // 2
    if config.freq_init == "rope_standard":
        freqs = config.freq_base ** (-2.0 * np.arange(half) / config.head_dim)
        omega = Array(np.tile(freqs, (config.num_heads, 1)))
    else:
        lo, hi = config.freq_range
        omega = rng.uniform(lo, hi, (config.num_heads, half))
    return KernelParams(
        w_q=rng.normal((width, hd), std=std),
        w_k=rng.normal((width, hd), std=std),
        w_v=rng.normal((width, hd), std=std),
        w_c=rng.normal((width, config.num_heads), std=std),
        w_p=rng.normal((width, config.num_heads), std=std),
        w_g=rng.normal((width, config.num_heads), std=std),
        omega=omega,
    )


# ---------------------------------------------------------------------------
# Gating signals
# ---------------------------------------------------------------------------


def clock(h: Array, w_c: Array, epsilon: float) -> Array:
    """Positive per-head temporal weights softplus(h @ w_c) + epsilon."""
    if epsilon <= 0:
        raise ConfigurationError("clock epsilon must be positive")
    return add(softplus(bmm(h, w_c)), as_array(epsilon))


def build_gates(h: Array, params: KernelParams, config: CapsConfig) -> GateSignals:
    """Project hidden states into (delta, p, g_tilde); g_tilde < 0 always."""
    delta = clock(h, params.w_c, config.clock_epsilon)
    p = bmm(h, params.w_p)
    g = bmm(h, params.w_g)
    g_tilde = neg(mul(softplus(g), delta))
    return GateSignals(delta=delta, p=p, g_tilde=g_tilde)


# ---------------------------------------------------------------------------
# Rotary alignment
# ---------------------------------------------------------------------------


def apply_rotation(x: Array, omega: Array, positions: np.ndarray) -> Array:
    """Rotate each coordinate pair (x_{2l}, x_{2l+1}) by angle pos * omega_l.

    ``x`` is (..., T, H, d_h); ``positions`` is one integer per time step.
    Norm of every pair is preserved, and inner products of rotated
    queries/keys depend on positions only through their offset.
    """
    T = x.shape[-3]
    heads, half = omega.shape
    if x.shape[-1] != 2 * half or x.shape[-2] != heads:
        raise ConfigurationError("rotation shapes inconsistent with omega")
    pos = as_array(np.asarray(positions, dtype=np.float64).reshape(T, 1, 1))
    angles = mul(pos, omega)  # (T, H, half)
    c = reshape(cos(angles), (T, heads, half, 1))
    s = reshape(sin(angles), (T, heads, half, 1))
    pairs = reshape(x, x.shape[:-1] + (half, 2))
    x0 = slice_axis(pairs, pairs.ndim - 1, 0, 1)
    x1 = slice_axis(pairs, pairs.ndim - 1, 1, 2)
    y0 = sub(mul(x0, c), mul(x1, s))
    y1 = add(mul(x0, s), mul(x1, c))
    return reshape(concat([y0, y1], -1), x.shape)


# ---------------------------------------------------------------------------
# Pairwise weight tables (quadratic reference)
# ---------------------------------------------------------------------------

_MASKS: dict[int, np.ndarray] = {}


def _causal_mask(T: int) -> np.ndarray:
    m = _MASKS.get(T)
    if m is None:
        m = np.tril(np.ones((T, T), dtype=np.float64))
        _MASKS[T] = m
    return m


def _to_head_table_axes(x: np.ndarray) -> np.ndarray:
    """(..., T, H) -> (..., H, T) view."""
    return np.moveaxis(x, -1, -2)


def _causal_softmax_table(scores: Array) -> Array:
    """Rows of causal softmax: out[..., h, t, i] = exp(s_i) / sum_{j<=t} exp(s_j).

    Stabilized with the running maximum m_t = max_{j<=t} s_j and the
    rescaled prefix sum den_t = den_{t-1} * exp(m_{t-1} - m_t) + exp(s_t - m_t),
    so no intermediate exponential exceeds 1.
    """
    scores = as_array(scores)
    s = _to_head_table_axes(scores.data)  # (..., H, T)
    T = s.shape[-1]
    m = np.maximum.accumulate(s, axis=-1)
    e_self = np.exp(s - m)
    den = np.empty_like(s)
    den[..., 0] = e_self[..., 0]
    for t in range(1, T):
        den[..., t] = den[..., t - 1] * np.exp(m[..., t - 1] - m[..., t]) + e_self[..., t]
    mask = _causal_mask(T)
    diff = (s[..., None, :] - m[..., :, None]) * mask
    table = np.exp(diff) * mask / den[..., :, None]
    lead = s.size // T
    _count(
        mults=3 * lead * T * T + lead * T,
        adds=lead * T * T + lead * T,
        transcendentals=lead * T * T + 2 * lead * T,
    )

    def build():
        def backward(g):
            w = g * table
            row_dot = w.sum(axis=-1, keepdims=True)
            gs_table = w - table * row_dot
            gs = gs_table.sum(axis=-2)  # accumulate over query rows t
            return (np.moveaxis(gs, -1, -2),)

        return backward

    return _record(table, (scores,), build)


def _pairwise_decay_table(g_tilde: Array) -> Array:
    """out[..., h, t, i] = exp(sum_{j in (i, t]} g_tilde_j) for i <= t.

    Uses cumulative log-gates L_t; entries are exp(L_t - L_i) <= 1.
    """
    g_tilde = as_array(g_tilde)
    gt = _to_head_table_axes(g_tilde.data)  # (..., H, T)
    T = gt.shape[-1]
    L = np.cumsum(gt, axis=-1)
    mask = _causal_mask(T)
    diff = (L[..., :, None] - L[..., None, :]) * mask
    table = np.exp(diff) * mask
    lead = gt.size // T
    _count(
        mults=2 * lead * T * T,
        adds=lead * T * T + lead * (T - 1),
        transcendentals=lead * T * T,
    )

    def build():
        def backward(g):
            w = g * table
            gL = w.sum(axis=-1) - w.sum(axis=-2)  # +at t, -at i
            rev = np.flip(gL, axis=-1)
            ggt = np.flip(np.cumsum(rev, axis=-1), axis=-1)
            return (np.moveaxis(ggt, -1, -2),)

        return backward

    return _record(table, (g_tilde,), build)


def _clock_share_table(delta: Array) -> Array:
    """out[..., h, t, i] = delta_i / sum_{j<=t} delta_j for i <= t."""
    delta = as_array(delta)
    d = _to_head_table_axes(delta.data)  # (..., H, T)
    T = d.shape[-1]
    D = np.cumsum(d, axis=-1)
    r = 1.0 / D
    mask = _causal_mask(T)
    table = d[..., None, :] * r[..., :, None] * mask
    lead = d.size // T
    _count(mults=2 * lead * T * T + lead * T, adds=lead * (T - 1))

    def build():
        def backward(g):
            gm = g * mask
            gd_direct = (gm * r[..., :, None]).sum(axis=-2)
            gD = -(gm * d[..., None, :]).sum(axis=-1) * r * r
            rev = np.flip(gD, axis=-1)
            gd = gd_direct + np.flip(np.cumsum(rev, axis=-1), axis=-1)
            return (np.moveaxis(gd, -1, -2),)

        return backward

    return _record(table, (delta,), build)


def _causal_softmax_attend(scores: Array, values: Array) -> Array:
    """Row-normalize exp(scores) over i <= t and aggregate values.

    ``scores`` is (..., H, T, T); entries above the diagonal are ignored.
    Overflow is guarded by subtracting each row's maximum before exp.
    """
    scores, values = as_array(scores), as_array(values)
    T = scores.shape[-1]
    mask = _causal_mask(T)
    neg_inf = np.where(mask == 0.0, -np.inf, 0.0)
    row_max = np.max(scores.data + neg_inf, axis=-1, keepdims=True)
    expo = np.exp((scores.data - row_max) * mask) * mask
    den = expo.sum(axis=-1, keepdims=True)
    alpha = expo / den
    out = np.matmul(alpha, values.data)
    lead = scores.size // (T * T)
    dv = values.shape[-1]
    _count(
        mults=3 * lead * T * T + lead * T * T * dv,
        adds=2 * lead * T * T + lead * T * (T - 1) * dv,
        transcendentals=lead * T * T,
    )

    def build():
        v_data = values.data
        s_shape, v_shape = scores.shape, values.shape

        def backward(g):
            gv = np.matmul(np.swapaxes(alpha, -1, -2), g)
            r = np.matmul(g, np.swapaxes(v_data, -1, -2))
            row_dot = (alpha * r).sum(axis=-1, keepdims=True)
            gs = alpha * (r - row_dot) * mask
            return _unbroadcast(gs, s_shape), _unbroadcast(gv, v_shape)

        return backward

    return _record(out, (scores, values), build)


def path_weights(gates: GateSignals) -> tuple[Array, Array, Array]:
    """All three pairwise weight tables from one set of gate signals."""
    T = gates.delta.shape[-2]
    if T < 1:
        raise ConfigurationError("path weights need at least one position")
    p_tilde = add(gates.p, log(gates.delta))
    G = _causal_softmax_table(p_tilde)
    A = _pairwise_decay_table(gates.g_tilde)
    B = _clock_share_table(gates.delta)
    return G, A, B


# ---------------------------------------------------------------------------
# Attention evaluations
# ---------------------------------------------------------------------------


def _split_heads(x: Array, heads: int, head_dim: int) -> Array:
    return reshape(x, x.shape[:-1] + (heads, head_dim))


def _projected_qkv(h: Array, params: KernelParams, config: CapsConfig, positions):
    T = h.shape[-2]
    if positions is None:
        positions = np.arange(T)
    q = _split_heads(bmm(h, params.w_q), config.num_heads, config.head_dim)
    k = _split_heads(bmm(h, params.w_k), config.num_heads, config.head_dim)
    v = _split_heads(bmm(h, params.w_v), config.num_heads, config.head_dim)
    q_rot = apply_rotation(q, params.omega, positions)
    k_rot = apply_rotation(k, params.omega, positions)
    return q_rot, k_rot, v


def attend_quadratic(
    h: Array,
    params: KernelParams,
    config: CapsConfig,
    positions: np.ndarray | None = None,
) -> tuple[Array, ScoreDecomposition]:
    """Reference evaluation materializing all pairwise scores.

    Returns per-head outputs (..., T, H, d_h) and the full score
    decomposition.  Supports both wrapper modes.
    """
    T = h.shape[-2]
    if T < 1:
        raise ConfigurationError("attention needs at least one position")
    q_rot, k_rot, v = _projected_qkv(h, params, config, positions)
    qh = moveaxis(q_rot, -2, -3)  # (..., H, T, d_h)
    kh = moveaxis(k_rot, -2, -3)
    vh = moveaxis(v, -2, -3)
    mask = as_array(_causal_mask(T))
    rot = mul(bmm(qh, moveaxis(kh, -1, -2)), mask)

    gates = build_gates(h, params, config)
    zeros = as_array(np.zeros(rot.shape))
    if config.riemann_path:
        G = _causal_softmax_table(add(gates.p, log(gates.delta)))
    else:
        G = zeros
    A = _pairwise_decay_table(gates.g_tilde) if config.prefix_path else zeros
    B = _clock_share_table(gates.delta) if config.clock_path else zeros

    total = mul(mul(rot, add(add(G, A), B)), as_array(config.effective_score_scale))
    if config.phi_mode == "softmax":
        out_h = _causal_softmax_attend(total, vh)
    else:
        out_h = bmm(total, vh)
    out = moveaxis(out_h, -3, -2)
    return out, ScoreDecomposition(G=G, A=A, B=B, rot_score=rot, total=total)


def attend_linear(
    h: Array,
    params: KernelParams,
    config: CapsConfig,
    positions: np.ndarray | None = None,
) -> Array:
    """Linear-time evaluation via per-head running states.

    Path 1 keeps a running maximum with rescale-on-update accumulators
    (an online log-sum-exp); path 2 runs the gated recurrence
    S_t = exp(g_tilde_t) S_{t-1} + k v^T; path 3 accumulates clock-weighted
    outer products.  Only the identity wrapper is supported; the softmax
    wrapper requires materialized scores, i.e. ``attend_quadratic``.
    """
    if config.phi_mode != "identity":
        raise UnsupportedModeError(
            "linear evaluation is defined for the identity wrapper only; "
            "use attend_quadratic for softmax mode"
        )
    T = h.shape[-2]
    if T < 1:
        raise ConfigurationError("attention needs at least one position")
    q_rot, k_rot, v = _projected_qkv(h, params, config, positions)
    gates = build_gates(h, params, config)

    kv = bmm(
        reshape(k_rot, k_rot.shape + (1,)),
        reshape(v, v.shape[:-1] + (1, v.shape[-1])),
    )  # (..., T, H, d_h, d_h)
    q_row = reshape(q_rot, q_rot.shape[:-1] + (1, q_rot.shape[-1]))
    time_axis_kv = kv.ndim - 4
    time_axis_th = gates.delta.ndim - 2

    def broad(x: Array) -> Array:
        return reshape(x, x.shape + (1, 1))

    def q_dot(state: Array) -> Array:
        return reshape(bmm(q_row, state), q_rot.shape)

    contributions = []
    if config.riemann_path:
        p_tilde = add(gates.p, log(gates.delta))
        m = cummax(p_tilde, time_axis_th)
        m_prev = concat(
            [slice_axis(m, time_axis_th, 0, 1), slice_axis(m, time_axis_th, 0, T - 1)],
            time_axis_th,
        )
        rescale = exp(sub(m_prev, m))
        e_new = exp(sub(p_tilde, m))
        numer = linear_scan(broad(rescale), mul(kv, broad(e_new)), time_axis_kv)
        denom = linear_scan(rescale, e_new, time_axis_th)
        contributions.append(mul(q_dot(numer), reshape(recip(denom), denom.shape + (1,))))
    if config.prefix_path:
        decay = exp(gates.g_tilde)
        state = linear_scan(broad(decay), kv, time_axis_kv)
        contributions.append(q_dot(state))
    if config.clock_path:
        weighted = cumsum(mul(kv, broad(gates.delta)), time_axis_kv)
        total_clock = cumsum(gates.delta, time_axis_th)
        contributions.append(
            mul(q_dot(weighted), reshape(recip(total_clock), total_clock.shape + (1,)))
        )

    out = contributions[0]
    for extra in contributions[1:]:
        out = add(out, extra)
    return mul(out, as_array(config.effective_score_scale))


def concat_paths(
    q1: Array, k1: Array, q2: Array, k2: Array, q3: Array, k3: Array
) -> tuple[Array, Array]:
    """Feature-axis concatenation of per-path queries and keys.

    The inner product of the concatenations equals the sum of the per-path
    inner products, which is what makes the three-path score additive.
    """
    qs, ks = (q1, q2, q3), (k1, k2, k3)
    lead = q1.shape[:-1]
    for x in qs + ks:
        if x.shape[:-1] != lead:
            raise ConfigurationError("concat_paths operands must share leading shape")
    for q, k in zip(qs, ks):
        if q.shape != k.shape:
            raise ConfigurationError("each query block must match its key block")
    return concat(list(qs), -1), concat(list(ks), -1)
