"""
Autoregressive flow transformer.

Each latent of a sequence is patchified into M raster-ordered tokens that form one attention chunk. Every block is an
adaLN-Zero transformer block: its shift/scale/gate modulations come from the chunk's own time embedding plus the class
embedding, and its attention is the hybrid chunkwise layer, so chunk n only ever sees chunks 1..n.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import numcore as nc
from .attention import (
    AttentionParams,
    ChunkState,
    HybridAttnConfig,
    hybrid_forward_chunkwise,
    hybrid_forward_recurrent,
)
from .errors import ConfigError, ContractError, ShapeError
from .logger import get_logger
from .numcore import RngState, Tensor

LOGGER = get_logger()

NULL_CLASS = -1
ATTENTION_FORMS = ("chunkwise", "recurrent")


@dataclass(frozen=True)
class ModelConfig:
    latent_shape: tuple[int, int, int] = (4, 8, 8)
    patch_size: int = 2
    hidden_size: int = 128
    depth: int = 4
    num_heads: int = 4
    num_classes: int = 4
    mlp_ratio: float = 4.0
    seq_len_train: int = 5
    gate_temperature: float = 16.0
    use_gate: bool = True
    # gate bias starts so a chunk decays the state by this factor; None starts it at zero
    gate_init_decay: Optional[float] = 0.5
    frequency_embedding_size: int = 256

    def __post_init__(self) -> None:
        object.__setattr__(self, "latent_shape", tuple(int(n) for n in self.latent_shape))
        if len(self.latent_shape) != 3:
            raise ConfigError(f"latent_shape must be (d, h, w), got {self.latent_shape}")
        _, h, w = self.latent_shape
        if self.patch_size < 1 or h % self.patch_size or w % self.patch_size:
            raise ConfigError(f"latent {h}x{w} is not divisible by patch size {self.patch_size}")
        if self.num_heads < 1 or self.hidden_size % self.num_heads:
            raise ConfigError(f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}")
        if self.hidden_size % 4:
            raise ConfigError(f"hidden_size must be a multiple of 4 for the 2-D sin-cos table, got {self.hidden_size}")
        if self.depth < 0 or self.num_classes < 1:
            raise ConfigError("depth must be >= 0 and num_classes >= 1")
        if self.frequency_embedding_size % 2:
            raise ConfigError("frequency_embedding_size must be even")
        if self.gate_init_decay is not None and not 0.0 < self.gate_init_decay < 1.0:
            raise ConfigError(f"gate_init_decay must be in (0, 1), got {self.gate_init_decay}")

    @property
    def grid(self) -> tuple[int, int]:
        _, h, w = self.latent_shape
        return h // self.patch_size, w // self.patch_size

    @property
    def tokens_per_image(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.latent_shape[0]

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return int(self.hidden_size * self.mlp_ratio)

    def attention_config(self, use_cache: bool = True) -> HybridAttnConfig:
        return HybridAttnConfig(
            num_heads=self.num_heads,
            head_dim=self.head_dim,
            chunk_size=self.tokens_per_image,
            gate_temperature=self.gate_temperature,
            use_gate=self.use_gate,
            use_cache=use_cache,
            gate_init_decay=self.gate_init_decay,
        )


IMAGENET_LATENT = (4, 32, 32)
PRESETS: dict[str, ModelConfig] = {
    "S/2": ModelConfig(latent_shape=IMAGENET_LATENT, hidden_size=384, depth=12, num_heads=6, num_classes=1000),
    "B/2": ModelConfig(latent_shape=IMAGENET_LATENT, hidden_size=768, depth=12, num_heads=12, num_classes=1000),
    "L/2": ModelConfig(latent_shape=IMAGENET_LATENT, hidden_size=1024, depth=24, num_heads=16, num_classes=1000),
    "XL/2": ModelConfig(latent_shape=IMAGENET_LATENT, hidden_size=1152, depth=28, num_heads=16, num_classes=1000),
    "desk": ModelConfig(),
}


def scaled_preset(name: str, latent_shape: tuple[int, int, int], num_classes: int) -> ModelConfig:
    """A preset's width/depth/heads re-targeted to another latent geometry and class count."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}', expected one of {sorted(PRESETS)}")
    return replace(PRESETS[name], latent_shape=tuple(latent_shape), num_classes=num_classes)


def count_params(config: ModelConfig) -> int:
    """Closed-form trainable parameter count; the fixed positional table is excluded."""
    hid, pd, freq, mlp = config.hidden_size, config.patch_dim, config.frequency_embedding_size, config.mlp_hidden
    patch = pd * hid + hid
    time = freq * hid + hid + hid * hid + hid
    table = (config.num_classes + 1) * hid
    attn = 4 * (hid * hid + hid) + hid * config.num_heads + config.num_heads
    ffn = hid * mlp + mlp + mlp * hid + hid
    ada = hid * 6 * hid + 6 * hid
    head = hid * 2 * hid + 2 * hid + hid * pd + pd
    return patch + time + table + config.depth * (attn + ffn + ada) + head


def patchify(z: nc.TensorLike, p: int) -> Tensor:
    """(..., d, h, w) -> (..., M, p*p*d); tokens in raster order, features ordered (row, col, channel)."""
    z = nc.as_tensor(z)
    if z.ndim < 3:
        raise ShapeError(f"patchify needs (..., d, h, w), got {z.shape}")
    *lead, d, h, w = z.shape
    if p < 1 or h % p or w % p:
        raise ShapeError(f"latent {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    n = len(lead)
    blocks = nc.reshape(z, (*lead, d, gh, p, gw, p))
    lead_axes = list(range(n))
    tokens = nc.transpose(blocks, lead_axes + [n + 1, n + 3, n + 2, n + 4, n])
    return nc.reshape(tokens, (*lead, gh * gw, p * p * d))


def unpatchify(x: Tensor, p: int, latent_shape: tuple[int, int, int]) -> Tensor:
    """Exact inverse of `patchify`."""
    d, h, w = latent_shape
    gh, gw = h // p, w // p
    *lead, m, width = x.shape
    if m != gh * gw or width != p * p * d:
        raise ShapeError(f"cannot unpatchify {x.shape} into latents of shape {latent_shape} with patch {p}")
    n = len(lead)
    blocks = nc.reshape(x, (*lead, gh, gw, p, p, d))
    lead_axes = list(range(n))
    image = nc.transpose(blocks, lead_axes + [n + 4, n, n + 2, n + 1, n + 3])
    return nc.reshape(image, (*lead, d, h, w))


def sincos_1d(embed_dim: int, pos: np.ndarray) -> np.ndarray:
    omega = np.arange(embed_dim // 2, dtype=np.float64) / (embed_dim / 2.0)
    omega = 1.0 / 10000**omega
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(embed_dim: int, grid_h: int, grid_w: int) -> np.ndarray:
    """(grid_h * grid_w, embed_dim) table in raster order; half the width encodes rows, half columns."""
    rows, cols = np.meshgrid(np.arange(grid_h, dtype=np.float64), np.arange(grid_w, dtype=np.float64), indexing="ij")
    return np.concatenate([sincos_1d(embed_dim // 2, rows), sincos_1d(embed_dim // 2, cols)], axis=1)


def timestep_features(times: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of 1000 * t, cos half first."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = 1000.0 * np.asarray(times, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return nc.add(nc.mul(x, nc.add(scale, 1.0)), shift)


@dataclass(frozen=True)
class ModelOutput:
    velocity: Tensor
    states: list[ChunkState]


class ARFlowModel:
    """ """

    config: ModelConfig
    params: dict[str, Tensor]
    pos_table: np.ndarray

    def __init__(self, config: ModelConfig, rng: Optional[RngState] = None, params: Optional[dict[str, Tensor]] = None):
        self.config = config
        self.pos_table = sincos_2d(config.hidden_size, *config.grid)
        if params is None:
            params = self._init_params(config, rng if rng is not None else RngState(0))
        self.params = params
        self._check_params()

    @staticmethod
    def _init_params(config: ModelConfig, rng: RngState) -> dict[str, Tensor]:
        hid, pd = config.hidden_size, config.patch_dim
        params: dict[str, Tensor] = {}
        params["patch.w"], rng = nc.xavier_uniform(pd, hid, rng)
        params["patch.b"] = nc.zeros((hid,), requires_grad=True)
        params["time.w1"], rng = nc.normal_init((config.frequency_embedding_size, hid), 0.02, rng)
        params["time.b1"] = nc.zeros((hid,), requires_grad=True)
        params["time.w2"], rng = nc.normal_init((hid, hid), 0.02, rng)
        params["time.b2"] = nc.zeros((hid,), requires_grad=True)
        params["class.table"], rng = nc.normal_init((config.num_classes + 1, hid), 0.02, rng)
        attn_config = config.attention_config()
        for i in range(config.depth):
            prefix = f"blocks.{i}."
            attn, rng = AttentionParams.init(attn_config, rng)
            params.update(attn.named(prefix + "attn."))
            params[prefix + "mlp.w1"], rng = nc.xavier_uniform(hid, config.mlp_hidden, rng)
            params[prefix + "mlp.b1"] = nc.zeros((config.mlp_hidden,), requires_grad=True)
            params[prefix + "mlp.w2"], rng = nc.xavier_uniform(config.mlp_hidden, hid, rng)
            params[prefix + "mlp.b2"] = nc.zeros((hid,), requires_grad=True)
            # adaLN-Zero: every block starts as the identity
            params[prefix + "ada.w"] = nc.zeros((hid, 6 * hid), requires_grad=True)
            params[prefix + "ada.b"] = nc.zeros((6 * hid,), requires_grad=True)
        params["final.ada.w"] = nc.zeros((hid, 2 * hid), requires_grad=True)
        params["final.ada.b"] = nc.zeros((2 * hid,), requires_grad=True)
        params["final.w"] = nc.zeros((hid, pd), requires_grad=True)
        params["final.b"] = nc.zeros((pd,), requires_grad=True)
        for name, tensor in params.items():
            tensor.name = name
        return params

    def _check_params(self) -> None:
        total = sum(t.size for t in self.params.values())
        expected = count_params(self.config)
        if total != expected:
            raise ShapeError(f"parameter set holds {total} values, config implies {expected}")

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def copy(self, trainable: bool = False) -> ARFlowModel:
        """Deep copy of the parameters; EMA copies are created with `trainable=False`."""
        cloned = {name: Tensor(t.data.copy(), requires_grad=trainable, name=name) for name, t in self.params.items()}
        return ARFlowModel(self.config, params=cloned)

    def zero_states(self, batch: int) -> list[ChunkState]:
        cfg = self.config
        return [ChunkState.zeros(batch, cfg.num_heads, cfg.head_dim) for _ in range(cfg.depth)]

    def _class_rows(self, class_ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(class_ids, dtype=np.int64)
        if np.any((ids < NULL_CLASS) | (ids >= self.config.num_classes)):
            raise ContractError(f"class ids must lie in [{NULL_CLASS}, {self.config.num_classes}), got {ids.tolist()}")
        return np.where(ids == NULL_CLASS, self.config.num_classes, ids)

    def conditioning(self, times: np.ndarray, class_ids: np.ndarray) -> Tensor:
        """Per-chunk conditioning vector c = time embedding + class embedding, shape (B, N, hidden)."""
        p = self.params
        feats = Tensor(timestep_features(times, self.config.frequency_embedding_size))
        temb = nc.linear(nc.silu(nc.linear(feats, p["time.w1"], p["time.b1"])), p["time.w2"], p["time.b2"])
        cemb = nc.embedding(p["class.table"], self._class_rows(class_ids))
        batch, hid = cemb.shape
        return nc.add(temb, nc.reshape(cemb, (batch, 1, hid)))

    def forward(
        self,
        latents: nc.TensorLike,
        times: np.ndarray,
        class_ids: np.ndarray,
        initial_states: Optional[Sequence[ChunkState]] = None,
        use_cache: bool = True,
        form: str = "chunkwise",
    ) -> ModelOutput:
        """
        latents (B, N, d, h, w), times (B, N), class ids (B,) with NULL_CLASS for the unconditional path.

        Returns per-chunk velocities with the latents' shape and each layer's state after the last chunk.
        """
        cfg = self.config
        z = nc.as_tensor(latents)
        if z.ndim != 5 or tuple(z.shape[2:]) != cfg.latent_shape:
            raise ShapeError(f"latents must be (B, N, {cfg.latent_shape}), got {z.shape}")
        batch, chunks = z.shape[:2]
        times = np.asarray(times, dtype=np.float64)
        if times.shape != (batch, chunks):
            raise ShapeError(f"times must have shape {(batch, chunks)}, got {times.shape}")
        if np.asarray(class_ids).shape != (batch,):
            raise ShapeError(f"class ids must have shape {(batch,)}, got {np.asarray(class_ids).shape}")
        if initial_states is not None and len(initial_states) != cfg.depth:
            raise ShapeError(f"expected {cfg.depth} initial states, got {len(initial_states)}")
        if form not in ATTENTION_FORMS:
            raise ConfigError(f"unknown attention form '{form}', expected one of {ATTENTION_FORMS}")
        attend = hybrid_forward_chunkwise if form == "chunkwise" else hybrid_forward_recurrent

        p = self.params
        hid, m = cfg.hidden_size, cfg.tokens_per_image
        grid_shape = (batch, chunks, m, hid)
        flat_shape = (batch, chunks * m, hid)

        x = nc.linear(patchify(z, cfg.patch_size), p["patch.w"], p["patch.b"])
        x = nc.add(x, self.pos_table)
        c = nc.silu(self.conditioning(times, class_ids))

        attn_config = cfg.attention_config(use_cache)
        states: list[ChunkState] = []
        for i in range(cfg.depth):
            prefix = f"blocks.{i}."
            mods = nc.split(nc.linear(c, p[prefix + "ada.w"], p[prefix + "ada.b"]), 6, axis=-1)
            shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = (nc.reshape(t, (batch, chunks, 1, hid)) for t in mods)

            h = modulate(nc.layer_norm(x), shift_a, scale_a)
            result = attend(
                nc.reshape(h, flat_shape),
                attn_config,
                AttentionParams.from_named(p, prefix + "attn."),
                initial_states[i] if initial_states is not None else None,
            )
            states.append(result.state)
            x = nc.add(x, nc.mul(gate_a, nc.reshape(result.output, grid_shape)))

            h = modulate(nc.layer_norm(x), shift_m, scale_m)
            h = nc.gelu(nc.linear(h, p[prefix + "mlp.w1"], p[prefix + "mlp.b1"]))
            h = nc.linear(h, p[prefix + "mlp.w2"], p[prefix + "mlp.b2"])
            x = nc.add(x, nc.mul(gate_m, h))

        final_mods = nc.split(nc.linear(c, p["final.ada.w"], p["final.ada.b"]), 2, axis=-1)
        shift, scale = (nc.reshape(t, (batch, chunks, 1, hid)) for t in final_mods)
        out = nc.linear(modulate(nc.layer_norm(x), shift, scale), p["final.w"], p["final.b"])
        velocity = unpatchify(out, cfg.patch_size, cfg.latent_shape)
        return ModelOutput(velocity=velocity, states=states)

    def __repr__(self) -> str:
        return f"ARFlowModel({self.config}, params={self.num_parameters()})"
