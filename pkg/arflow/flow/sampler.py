"""
Autoregressive generation: each integration step denoises one whole latent and folds it into the attention caches.

Generation walks a uniform time grid from t_start down to t_end. At every step the current noisy latent is run through
the velocity field twice, once with the class and once with NULL_CLASS, each against its own cached states; the two
velocities are combined with classifier-free guidance and the latent is moved by an Euler (ODE) or Euler-Maruyama (SDE)
update.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Protocol

import numpy as np
from tqdm import tqdm

from .attention import ChunkState
from .errors import ConfigError, ContractError
from .interpolant import score_from_velocity
from .logger import get_logger
from .model import NULL_CLASS, ARFlowModel
from .numcore import RngState, float_dtype, gaussian_array

LOGGER = get_logger()

ODE_EULER = "ode_euler"
SDE_EULER_MARUYAMA = "sde_euler_maruyama"
SAMPLER_MODES = (ODE_EULER, SDE_EULER_MARUYAMA)

States = Optional[list[ChunkState]]


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 32
    cfg_scale: float = 1.0
    mode: str = ODE_EULER
    use_cache: bool = True
    t_start: float = 1.0
    t_end: float = 0.004
    # SDE diffusion coefficient w_t = diffusion_scale * t
    diffusion_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.cfg_scale < 1.0:
            raise ConfigError(f"cfg_scale must be >= 1, got {self.cfg_scale}")
        if self.mode not in SAMPLER_MODES:
            raise ConfigError(f"unknown sampler mode '{self.mode}', expected one of {SAMPLER_MODES}")
        if not 1.0 >= self.t_start > self.t_end >= 0.0:
            raise ConfigError(f"need 1 >= t_start > t_end >= 0, got t_start={self.t_start}, t_end={self.t_end}")
        if self.diffusion_scale < 0:
            raise ConfigError(f"diffusion_scale must be >= 0, got {self.diffusion_scale}")

    def time_grid(self) -> np.ndarray:
        return np.linspace(self.t_start, self.t_end, self.steps + 1)


class VelocityField(Protocol):
    """Velocity for one latent per batch element at time t, threading per-layer states through."""

    latent_shape: tuple[int, int, int]

    def initial_states(self, batch: int) -> States:
        ...

    def __call__(
        self, z: np.ndarray, t: float, class_ids: np.ndarray, states: States
    ) -> tuple[np.ndarray, States]:
        ...


class ModelVelocityField:
    """Runs the model on a single chunk per call; with `use_cache=False` every call starts from zero states."""

    def __init__(self, model: ARFlowModel, use_cache: bool = True) -> None:
        self.model = model
        self.use_cache = use_cache
        self.latent_shape = model.config.latent_shape

    def initial_states(self, batch: int) -> States:
        return self.model.zero_states(batch)

    def __call__(
        self, z: np.ndarray, t: float, class_ids: np.ndarray, states: States
    ) -> tuple[np.ndarray, States]:
        batch = z.shape[0]
        out = self.model.forward(
            z[:, None],
            np.full((batch, 1), t),
            class_ids,
            initial_states=states if self.use_cache else None,
            use_cache=self.use_cache,
        )
        return out.velocity.data[:, 0], out.states


@dataclass(frozen=True)
class GenState:
    z: np.ndarray
    t: float
    step_index: int
    cond_states: States
    uncond_states: States


def cfg_combine(v_cond: np.ndarray, v_uncond: np.ndarray, s: float) -> np.ndarray:
    """v_uncond + s (v_cond - v_uncond); s = 1 and s = 0 return the respective input unchanged."""
    if s == 1.0:
        return v_cond
    if s == 0.0:
        return v_uncond
    return v_uncond + s * (v_cond - v_uncond)


def step(
    state: GenState, field: VelocityField, class_ids: np.ndarray, cfg: SamplerConfig, rng: RngState
) -> tuple[GenState, RngState]:
    if state.step_index >= cfg.steps or state.t <= cfg.t_end:
        raise ContractError(f"generation already reached t_end ({state.t} <= {cfg.t_end})")
    t = state.t
    t_next = float(cfg.time_grid()[state.step_index + 1])
    dt = t_next - t
    null_ids = np.full_like(np.asarray(class_ids), NULL_CLASS)
    v_cond, cond_states = field(state.z, t, class_ids, state.cond_states)
    v_uncond, uncond_states = field(state.z, t, null_ids, state.uncond_states)
    v = cfg_combine(v_cond, v_uncond, cfg.cfg_scale)

    w = cfg.diffusion_scale * t
    if cfg.mode == ODE_EULER or w == 0.0:
        z = state.z + v * dt
    else:
        # reverse-time drift v - (w/2) score, integrated with dt < 0
        score = score_from_velocity(state.z, v, t)
        xi, rng = gaussian_array(state.z.shape, rng)
        z = state.z + v * dt + 0.5 * w * score * abs(dt) + np.sqrt(w * abs(dt)) * xi
    z = z.astype(state.z.dtype)
    return GenState(z, t_next, state.step_index + 1, cond_states, uncond_states), rng


def generate(
    field: VelocityField,
    class_ids: np.ndarray,
    cfg: SamplerConfig,
    rng: RngState,
    on_step: Callable[[GenState], None] | None = None,
    progress: bool = False,
) -> tuple[np.ndarray, RngState]:
    """Draws z ~ N(0, I) at t_start and runs `cfg.steps` steps; returns latents (B, d, h, w)."""
    class_ids = np.asarray(class_ids, dtype=np.int64)
    batch = class_ids.shape[0]
    z, rng = gaussian_array((batch,) + tuple(field.latent_shape), rng)
    state = GenState(
        z.astype(float_dtype()), cfg.t_start, 0, field.initial_states(batch), field.initial_states(batch)
    )
    for _ in tqdm(range(cfg.steps), disable=not progress, desc="sample"):
        state, rng = step(state, field, class_ids, cfg, rng)
        if on_step is not None:
            on_step(state)
    LOGGER.info(f"generated {batch} latents: {cfg.steps} {cfg.mode} steps, cfg {cfg.cfg_scale}, cache {cfg.use_cache}")
    return state.z, rng


def sample_model(
    model: ARFlowModel,
    class_id: int,
    count: int,
    cfg: SamplerConfig,
    seed: int,
    batch_size: int = 64,
    progress: bool = False,
) -> np.ndarray:
    """`count` latents of one class from `model` (normally the EMA weights), generated in batches."""
    if count < 0:
        raise ContractError(f"count must be >= 0, got {count}")
    field = ModelVelocityField(model, use_cache=cfg.use_cache)
    out = np.empty((count,) + model.config.latent_shape, dtype=float_dtype())
    rng = RngState(seed)
    for index, start in enumerate(range(0, count, batch_size)):
        stop = min(start + batch_size, count)
        ids = np.full(stop - start, class_id, dtype=np.int64)
        out[start:stop], _ = generate(field, ids, cfg, rng.stream(index), progress=progress)
    return out
