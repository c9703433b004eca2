from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from arflow.flow import numcore as nc
from arflow.flow.errors import ConfigError, ContractError
from arflow.flow.model import ARFlowModel
from arflow.flow.numcore import RngState
from arflow.flow.sampler import (
    ODE_EULER,
    SDE_EULER_MARUYAMA,
    GenState,
    ModelVelocityField,
    SamplerConfig,
    cfg_combine,
    generate,
    sample_model,
    step,
)
from tests.conftest import randomize


class PointTargetField:
    """Exact velocity of the straight path from any noise draw to a single point."""

    def __init__(self, target: np.ndarray) -> None:
        self.target = target
        self.latent_shape = target.shape
        self.calls = 0

    def initial_states(self, batch: int):
        return None

    def __call__(self, z, t, class_ids, states):
        self.calls += 1
        return (z - self.target) / t, states


class GaussianTargetField:
    """Exact marginal velocity when the data is N(mean, spread^2 I)."""

    def __init__(self, mean: float, spread: float, shape=(1, 2, 2)) -> None:
        self.mean, self.spread = mean, spread
        self.latent_shape = shape

    def initial_states(self, batch: int):
        return None

    def __call__(self, z, t, class_ids, states):
        a = 1.0 - t
        var = a * a * self.spread**2 + t * t
        centered = z - a * self.mean
        x_hat = self.mean + a * self.spread**2 / var * centered
        eps_hat = t / var * centered
        return eps_hat - x_hat, states


def _target(seed: int = 0, shape=(2, 4, 4)) -> np.ndarray:
    values, _ = nc.gaussian_array(shape, RngState(seed))
    return values


@pytest.mark.parametrize("steps", [1, 8, 32])
def test_euler_lands_on_the_point_target(steps):
    target = _target()
    field = PointTargetField(target)
    z, _ = generate(field, np.zeros(4, dtype=np.int64), SamplerConfig(steps=steps, t_end=0.0), RngState(1))
    assert np.abs(z - target).max() < 1e-4
    assert field.calls == 2 * steps


def test_single_step_with_default_end_time():
    target = _target(2)
    cfg = SamplerConfig(steps=1)
    noise, _ = nc.gaussian_array((1,) + target.shape, RngState(3))
    z, _ = generate(PointTargetField(target), np.zeros(1, dtype=np.int64), cfg, RngState(3))
    expected = target + cfg.t_end * (noise[0].astype(np.float32) - target)
    np.testing.assert_allclose(z[0], expected, atol=1e-5)


def test_zero_diffusion_sde_is_the_ode():
    field = PointTargetField(_target(4))
    ids = np.zeros(3, dtype=np.int64)
    ode, rng_ode = generate(field, ids, SamplerConfig(steps=8), RngState(5))
    sde_cfg = SamplerConfig(steps=8, mode=SDE_EULER_MARUYAMA, diffusion_scale=0.0)
    sde, rng_sde = generate(field, ids, sde_cfg, RngState(5))
    np.testing.assert_array_equal(ode, sde)
    assert rng_ode == rng_sde


def test_sde_concentrates_on_the_point_target():
    target = _target(6, shape=(1, 2, 2))
    cfg = SamplerConfig(steps=64, mode=SDE_EULER_MARUYAMA, t_end=0.0)
    z, rng = generate(PointTargetField(target), np.zeros(512, dtype=np.int64), cfg, RngState(7))
    assert np.abs(z.mean(axis=0) - target).max() < 0.02
    assert z.std(axis=0).max() < 0.1
    assert rng != RngState(7)


@pytest.mark.parametrize("diffusion_scale", [0.0, 1.0, 2.0])
def test_sde_keeps_the_data_spread(diffusion_scale):
    cfg = SamplerConfig(steps=200, mode=SDE_EULER_MARUYAMA, diffusion_scale=diffusion_scale)
    z, _ = generate(GaussianTargetField(1.5, 0.5), np.zeros(4000, dtype=np.int64), cfg, RngState(9))
    assert abs(z.mean() - 1.5) < 0.05
    assert abs(z.std() - 0.5) < 0.05


def test_guidance_algebra():
    a, rng = nc.gaussian_array(6, RngState(0))
    b, _ = nc.gaussian_array(6, rng)
    assert cfg_combine(a, b, 1.0) is a
    assert cfg_combine(a, b, 0.0) is b
    np.testing.assert_allclose(cfg_combine(a, b, 2.0) - cfg_combine(a, b, 1.0), a - b, atol=1e-12)


def test_unit_guidance_is_conditional_generation(tiny_config):
    model = randomize(ARFlowModel(tiny_config, RngState(0)))
    field = ModelVelocityField(model)
    ids = np.array([0, 2])
    cfg = SamplerConfig(steps=4)
    guided, _ = generate(field, ids, cfg, RngState(9))

    z, _ = nc.gaussian_array((2,) + tiny_config.latent_shape, RngState(9))
    z = z.astype(np.float32)
    states = field.initial_states(2)
    grid = cfg.time_grid()
    for i in range(cfg.steps):
        v, states = field(z, float(grid[i]), ids, states)
        z = (z + v * (float(grid[i + 1]) - float(grid[i]))).astype(np.float32)
    np.testing.assert_array_equal(guided, z)


def test_every_step_folds_one_chunk_into_both_caches(tiny_config):
    model = randomize(ARFlowModel(tiny_config, RngState(0)))
    seen = []

    def record(state: GenState) -> None:
        seen.append((state.step_index, state.t, state.cond_states[0].chunk_index, state.uncond_states[0].chunk_index))

    cfg = SamplerConfig(steps=3, cfg_scale=2.0)
    generate(ModelVelocityField(model), np.array([1]), cfg, RngState(0), on_step=record)
    assert [entry[0] for entry in seen] == [1, 2, 3]
    assert [entry[2] for entry in seen] == [entry[3] for entry in seen] == [1, 2, 3]
    assert seen[-1][1] == pytest.approx(0.004)


def test_cache_and_guidance_change_samples(tiny_config):
    model = randomize(ARFlowModel(tiny_config, RngState(0)))
    base = sample_model(model, 1, 3, SamplerConfig(steps=4), seed=2)
    assert base.shape == (3,) + tiny_config.latent_shape
    np.testing.assert_array_equal(sample_model(model, 1, 3, SamplerConfig(steps=4), seed=2), base)
    uncached = sample_model(model, 1, 3, SamplerConfig(steps=4, use_cache=False), seed=2)
    guided = sample_model(model, 1, 3, SamplerConfig(steps=4, cfg_scale=3.0), seed=2)
    assert np.abs(uncached - base).max() > 0
    assert np.abs(guided - base).max() > 0


def test_sampling_in_batches_matches_one_batch_per_stream(tiny_config):
    model = randomize(ARFlowModel(tiny_config, RngState(0)))
    cfg = SamplerConfig(steps=2)
    split = sample_model(model, 0, 5, cfg, seed=4, batch_size=3)
    first, _ = generate(ModelVelocityField(model), np.zeros(3, dtype=np.int64), cfg, RngState(4).stream(0))
    np.testing.assert_array_equal(split[:3], first)
    assert sample_model(model, 0, 0, cfg, seed=4).shape == (0,) + tiny_config.latent_shape


def test_step_past_the_end_is_rejected():
    field = PointTargetField(_target())
    cfg = SamplerConfig(steps=1)
    state = GenState(np.zeros((1,) + field.latent_shape), cfg.t_end, 1, None, None)
    with pytest.raises(ContractError):
        step(state, field, np.zeros(1, dtype=np.int64), cfg, RngState(0))


def test_config_validation():
    grid = SamplerConfig(steps=4, t_end=0.0).time_grid()
    np.testing.assert_allclose(grid, [1.0, 0.75, 0.5, 0.25, 0.0])
    assert replace(SamplerConfig(), mode=ODE_EULER).mode == "ode_euler"
    for bad in ({"steps": 0}, {"cfg_scale": 0.5}, {"mode": "heun"}, {"t_start": 0.5, "t_end": 0.5}):
        with pytest.raises(ConfigError):
            SamplerConfig(**bad)


def test_negative_counts_are_rejected(tiny_config):
    with pytest.raises(ContractError):
        sample_model(ARFlowModel(tiny_config), 0, -1, SamplerConfig(), seed=0)
