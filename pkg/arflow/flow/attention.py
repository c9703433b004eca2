"""
Hybrid chunkwise attention and its baselines.

A sequence of T tokens is cut into T / C chunks, one chunk per image. Inside a chunk tokens attend to each other with
bidirectional softmax attention; across chunks information flows only through a gated linear-attention state

    O_i     = inter_scale * Q_i S_{i-1} + softmax(intra_scale * Q_i K_i^T) V_i
    S_i     = gamma_i S_{i-1} + K_i^T V_i
    gamma_i = exp(mean_t log g_t),  g_t = sigmoid(W_gamma x_t)^(1 / tau)

so chunk i never sees chunks after it. Two forms compute the same layer: the chunkwise form batches all per-chunk
products and scans the states (training path), the recurrent form walks one chunk at a time through `gate`,
`chunk_decay` and `state_update` (inference path, equivalence oracle).

Tokens are batched as (B, T, hidden); states hold one d x d matrix per batch element and head.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special

from . import numcore as nc
from .errors import ConfigError, ContractError, ShapeError
from .numcore import RngState, Tensor, TensorLike

MECHANISMS = ("hybrid", "softmax_full", "linear_causal")


@dataclass(frozen=True)
class HybridAttnConfig:
    num_heads: int = 4
    head_dim: int = 32
    chunk_size: int = 16
    gate_temperature: float = 16.0
    use_gate: bool = True
    use_cache: bool = True
    # None resolves to 1/sqrt(head_dim)
    intra_scale: Optional[float] = None
    inter_scale: float = 1.0
    # per-chunk decay the gate starts from on a zero input; None keeps the gate bias at zero
    gate_init_decay: Optional[float] = None

    def __post_init__(self) -> None:
        if self.chunk_size < 1:
            raise ConfigError(f"chunk_size must be >= 1, got {self.chunk_size}")
        if self.head_dim < 1 or self.num_heads < 1:
            raise ConfigError(f"head_dim and num_heads must be >= 1, got {self.head_dim}, {self.num_heads}")
        if self.gate_temperature <= 0:
            raise ConfigError(f"gate_temperature must be > 0, got {self.gate_temperature}")
        if self.intra_scale is None:
            object.__setattr__(self, "intra_scale", 1.0 / math.sqrt(self.head_dim))
        if self.gate_init_decay is not None and not 0.0 < self.gate_init_decay < 1.0:
            raise ConfigError(f"gate_init_decay must be in (0, 1), got {self.gate_init_decay}")

    @property
    def hidden_size(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def intra(self) -> float:
        assert self.intra_scale is not None
        return float(self.intra_scale)

    @property
    def inter(self) -> float:
        return float(self.inter_scale)

    @property
    def gate_bias(self) -> float:
        """Gate bias b with sigmoid(b)^(1/tau) == gate_init_decay."""
        if self.gate_init_decay is None:
            return 0.0
        return float(special.logit(self.gate_init_decay**self.gate_temperature))


@dataclass
class AttentionParams:
    """Query/key/value/output projections (hidden -> hidden) and the gate projection (hidden -> heads)."""

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    w_gamma: Tensor
    b_gamma: Tensor

    @classmethod
    def init(cls, config: HybridAttnConfig, rng: RngState) -> tuple[AttentionParams, RngState]:
        hidden, heads = config.hidden_size, config.num_heads
        weights = {}
        for name in ("q", "k", "v", "o"):
            weights[f"w_{name}"], rng = nc.xavier_uniform(hidden, hidden, rng)
            weights[f"b_{name}"] = nc.zeros((hidden,), requires_grad=True)
        weights["w_gamma"], rng = nc.xavier_uniform(hidden, heads, rng)
        weights["b_gamma"] = nc.parameter(np.full((heads,), config.gate_bias, dtype=nc.float_dtype()))
        return cls(**weights), rng

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}{key}": value for key, value in self.__dict__.items()}

    @classmethod
    def from_named(cls, params: dict[str, Tensor], prefix: str = "") -> AttentionParams:
        names = cls.__dataclass_fields__.keys()  # pylint: disable=no-member
        return cls(**{name: params[f"{prefix}{name}"] for name in names})

    def check(self, config: HybridAttnConfig) -> None:
        hidden = config.hidden_size
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (hidden, hidden):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {(hidden, hidden)}")
        if self.w_gamma.shape != (hidden, config.num_heads):
            raise ShapeError(f"w_gamma has shape {self.w_gamma.shape}, expected {(hidden, config.num_heads)}")


@dataclass(frozen=True)
class ChunkState:
    """Inter-chunk memory: `s` is (B, heads, d, d); `chunk_index` counts the chunks folded in."""

    s: Tensor
    chunk_index: int = 0

    @classmethod
    def zeros(cls, batch: int, num_heads: int, head_dim: int) -> ChunkState:
        return cls(nc.zeros((batch, num_heads, head_dim, head_dim)))

    def detach(self) -> ChunkState:
        return ChunkState(self.s.detach(), self.chunk_index)


@dataclass(frozen=True)
class GateTrace:
    """Gate values (B, T, heads) and per-chunk decays (B, N, heads) recorded during a forward."""

    gates: np.ndarray
    decays: np.ndarray


@dataclass(frozen=True)
class AttentionResult:
    output: Tensor
    state: ChunkState
    trace: GateTrace = field(repr=False)


def _check_tokens(tokens: Tensor, config: HybridAttnConfig) -> tuple[int, int, int]:
    if tokens.ndim != 3:
        raise ShapeError(f"tokens must be (batch, T, hidden), got {tokens.shape}")
    batch, length, hidden = tokens.shape
    if hidden != config.hidden_size:
        raise ShapeError(f"token width {hidden} != num_heads * head_dim = {config.hidden_size}")
    if length < config.chunk_size or length % config.chunk_size:
        raise ShapeError(f"sequence length {length} is not a positive multiple of chunk_size {config.chunk_size}")
    return batch, length, length // config.chunk_size


def _initial_state(state: ChunkState | None, batch: int, config: HybridAttnConfig) -> ChunkState:
    if state is None:
        return ChunkState.zeros(batch, config.num_heads, config.head_dim)
    expected = (batch, config.num_heads, config.head_dim, config.head_dim)
    if state.s.shape != expected:
        raise ShapeError(f"initial state has shape {state.s.shape}, expected {expected}")
    return state


def _heads(x: Tensor, config: HybridAttnConfig) -> Tensor:
    """(B, L, hidden) -> (B, heads, L, d)"""
    batch, length, _ = x.shape
    return nc.transpose(nc.reshape(x, (batch, length, config.num_heads, config.head_dim)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    batch, heads, length, dim = x.shape
    return nc.reshape(nc.transpose(x, (0, 2, 1, 3)), (batch, length, heads * dim))


def _chunk_heads(x: Tensor, config: HybridAttnConfig) -> Tensor:
    """(B, T, hidden) -> (B, N, heads, C, d)"""
    batch, length, _ = x.shape
    c = config.chunk_size
    shaped = nc.reshape(x, (batch, length // c, c, config.num_heads, config.head_dim))
    return nc.transpose(shaped, (0, 1, 3, 2, 4))


def _merge_chunk_heads(x: Tensor) -> Tensor:
    batch, chunks, heads, c, dim = x.shape
    return nc.reshape(nc.transpose(x, (0, 1, 3, 2, 4)), (batch, chunks * c, heads * dim))


def gate(x: Tensor, params: AttentionParams, config: HybridAttnConfig) -> Tensor:
    """Per-token, per-head gate sigmoid(W_gamma x)^(1/tau) in (0, 1); shape (..., heads)."""
    log_g = nc.log_sigmoid(nc.linear(x, params.w_gamma, params.b_gamma))
    return nc.exp(nc.scale(log_g, 1.0 / config.gate_temperature))


def chunk_decay(gates: TensorLike, axis: int = -2) -> Tensor:
    """Geometric mean of the gates along the token axis of a chunk."""
    g = nc.as_tensor(gates)
    if np.any(g.data <= 0.0) or np.any(g.data > 1.0):
        raise ContractError("chunk decay needs gates in (0, 1]")
    return nc.exp(nc.mean(nc.log(g), axis=axis))


def state_update(state: ChunkState, gamma: TensorLike, k_chunk: Tensor, v_chunk: Tensor) -> ChunkState:
    """S' = gamma * S + K^T V for K, V of shape (B, heads, C, d) and gamma of shape (B, heads) or scalar."""
    if k_chunk.shape != v_chunk.shape:
        raise ShapeError(f"key chunk {k_chunk.shape} and value chunk {v_chunk.shape} differ")
    decay = nc.as_tensor(gamma)
    if decay.ndim:
        decay = nc.reshape(decay, decay.shape + (1, 1))
    kv = nc.matmul(nc.transpose(k_chunk), v_chunk)
    if kv.shape != state.s.shape:
        raise ShapeError(f"K^T V has shape {kv.shape}, state has {state.s.shape}")
    return ChunkState(nc.add(nc.mul(decay, state.s), kv), state.chunk_index + 1)


def _project(x: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    return (
        nc.linear(x, params.w_q, params.b_q),
        nc.linear(x, params.w_k, params.b_k),
        nc.linear(x, params.w_v, params.b_v),
    )


def hybrid_forward_chunkwise(
    tokens: Tensor,
    config: HybridAttnConfig,
    params: AttentionParams,
    initial_state: ChunkState | None = None,
) -> AttentionResult:
    batch, length, chunks = _check_tokens(tokens, config)
    state = _initial_state(initial_state, batch, config)
    q, k, v = (_chunk_heads(t, config) for t in _project(tokens, params))

    intra = nc.matmul(nc.softmax_rows(nc.matmul(q, nc.transpose(k)), config.intra), v)

    if config.use_gate:
        logits = nc.linear(tokens, params.w_gamma, params.b_gamma)
        log_g = nc.scale(nc.log_sigmoid(logits), 1.0 / config.gate_temperature)
        per_chunk = nc.reshape(log_g, (batch, chunks, config.chunk_size, config.num_heads))
        gamma = nc.exp(nc.mean(per_chunk, axis=2))
        gates = np.exp(log_g.data)
    else:
        gamma = Tensor(np.ones((batch, chunks, config.num_heads)))
        gates = np.ones((batch, length, config.num_heads), dtype=gamma.data.dtype)
    trace = GateTrace(gates=gates, decays=gamma.data.copy())

    if not config.use_cache:
        out = nc.linear(_merge_chunk_heads(intra), params.w_o, params.b_o)
        zero = ChunkState(nc.zeros(state.s.shape), state.chunk_index + chunks)
        return AttentionResult(out, zero, trace)

    kv = nc.matmul(nc.transpose(k), v)
    square = (batch, config.num_heads, config.head_dim, config.head_dim)
    s = state.s
    reads = []
    for i in range(chunks):
        q_i = nc.reshape(nc.slice_axis(q, 1, i, i + 1), (batch, config.num_heads, config.chunk_size, config.head_dim))
        reads.append(nc.reshape(nc.matmul(q_i, s), (batch, 1, config.num_heads, config.chunk_size, config.head_dim)))
        g_i = nc.reshape(nc.slice_axis(gamma, 1, i, i + 1), (batch, config.num_heads, 1, 1))
        s = nc.add(nc.mul(g_i, s), nc.reshape(nc.slice_axis(kv, 1, i, i + 1), square))
    inter = nc.scale(nc.concat(reads, axis=1), config.inter)
    out = nc.linear(_merge_chunk_heads(nc.add(inter, intra)), params.w_o, params.b_o)
    return AttentionResult(out, ChunkState(s, state.chunk_index + chunks), trace)


def hybrid_forward_recurrent(
    tokens: Tensor,
    config: HybridAttnConfig,
    params: AttentionParams,
    initial_state: ChunkState | None = None,
) -> AttentionResult:
    batch, _, chunks = _check_tokens(tokens, config)
    state = _initial_state(initial_state, batch, config)
    c = config.chunk_size
    outputs, gate_values, decays = [], [], []
    for i in range(chunks):
        x = nc.slice_axis(tokens, 1, i * c, (i + 1) * c)
        q, k, v = (_heads(t, config) for t in _project(x, params))
        o = nc.matmul(nc.softmax_rows(nc.matmul(q, nc.transpose(k)), config.intra), v)
        if config.use_gate:
            g = gate(x, params, config)
            gamma: Tensor = chunk_decay(g, axis=1)
        else:
            g = Tensor(np.ones((batch, c, config.num_heads)))
            gamma = Tensor(np.ones((batch, config.num_heads)))
        gate_values.append(g.data)
        decays.append(gamma.data)
        if config.use_cache:
            o = nc.add(nc.scale(nc.matmul(q, state.s), config.inter), o)
            state = state_update(state, gamma, k, v)
        else:
            state = ChunkState(nc.zeros(state.s.shape), state.chunk_index + 1)
        outputs.append(_merge_heads(o))
    out = nc.linear(nc.concat(outputs, axis=1), params.w_o, params.b_o)
    trace = GateTrace(gates=np.concatenate(gate_values, axis=1), decays=np.stack(decays, axis=1))
    return AttentionResult(out, state, trace)


def linear_attention_causal(
    tokens: Tensor,
    config: HybridAttnConfig,
    params: AttentionParams,
    initial_state: ChunkState | None = None,
) -> AttentionResult:
    """
    Plain chunkwise causal linear attention: O_i = Q_i S_{i-1} + (Q_i K_i^T * M) V_i, S_i = S_{i-1} + K_i^T V_i,
    with M the lower-triangular mask including the diagonal. No gate, no softmax, no scaling.
    """
    batch, length, chunks = _check_tokens(tokens, config)
    state = _initial_state(initial_state, batch, config)
    q, k, v = (_chunk_heads(t, config) for t in _project(tokens, params))
    c = config.chunk_size
    upper = np.triu(np.ones((c, c), dtype=bool), k=1)
    intra = nc.matmul(nc.masked_fill(nc.matmul(q, nc.transpose(k)), upper, 0.0), v)
    kv = nc.matmul(nc.transpose(k), v)
    square = (batch, config.num_heads, config.head_dim, config.head_dim)
    s = state.s
    reads = []
    for i in range(chunks):
        q_i = nc.reshape(nc.slice_axis(q, 1, i, i + 1), (batch, config.num_heads, c, config.head_dim))
        reads.append(nc.reshape(nc.matmul(q_i, s), (batch, 1, config.num_heads, c, config.head_dim)))
        s = nc.add(s, nc.reshape(nc.slice_axis(kv, 1, i, i + 1), square))
    out = nc.linear(_merge_chunk_heads(nc.add(nc.concat(reads, axis=1), intra)), params.w_o, params.b_o)
    ones = np.ones((batch, chunks, config.num_heads))
    trace = GateTrace(gates=np.ones((batch, length, config.num_heads)), decays=ones)
    return AttentionResult(out, ChunkState(s, state.chunk_index + chunks), trace)


def linear_attention_token_recurrent(
    tokens: np.ndarray, config: HybridAttnConfig, params: AttentionParams
) -> np.ndarray:
    """Token-by-token reference o_t = S_t^T q_t, S_t = S_{t-1} + k_t v_t^T, computed with plain arrays."""
    x = np.asarray(tokens, dtype=np.float64)
    batch, length, _ = x.shape
    heads, dim = config.num_heads, config.head_dim

    def project(w: Tensor, b: Tensor) -> np.ndarray:
        return (x @ w.data.astype(np.float64) + b.data).reshape(batch, length, heads, dim)

    q, k, v = project(params.w_q, params.b_q), project(params.w_k, params.b_k), project(params.w_v, params.b_v)
    s = np.zeros((batch, heads, dim, dim))
    out = np.zeros((batch, length, heads, dim))
    for t in range(length):
        s = s + k[:, t, :, :, None] * v[:, t, :, None, :]
        out[:, t] = np.einsum("bhij,bhi->bhj", s, q[:, t])
    return out.reshape(batch, length, heads * dim) @ params.w_o.data.astype(np.float64) + params.b_o.data


def softmax_attention_full(
    tokens: Tensor, params: AttentionParams, config: HybridAttnConfig, causal: bool = False
) -> Tensor:
    """Quadratic softmax attention over the whole sequence with the same projections; the gate is unused."""
    if tokens.ndim != 3 or tokens.shape[-1] != config.hidden_size:
        raise ShapeError(f"tokens must be (batch, T, {config.hidden_size}), got {tokens.shape}")
    q, k, v = (_heads(t, config) for t in _project(tokens, params))
    scores = nc.matmul(q, nc.transpose(k))
    if causal:
        length = tokens.shape[1]
        scores = nc.masked_fill(scores, np.triu(np.ones((length, length), dtype=bool), k=1))
    out = nc.matmul(nc.softmax_rows(scores, config.intra), v)
    return nc.linear(_merge_heads(out), params.w_o, params.b_o)


def attend(
    mechanism: str,
    tokens: Tensor,
    config: HybridAttnConfig,
    params: AttentionParams,
) -> Tensor:
    """Forward-only dispatch used by the benchmark."""
    if mechanism == "hybrid":
        return hybrid_forward_chunkwise(tokens, config, params).output
    if mechanism == "softmax_full":
        return softmax_attention_full(tokens, params, config)
    if mechanism == "linear_causal":
        return linear_attention_causal(tokens, config, params).output
    raise ConfigError(f"unknown attention mechanism '{mechanism}', expected one of {MECHANISMS}")
