"""Long-running trend checks on the desk model; run with `pdm run tests_slow`."""
from __future__ import annotations

from dataclasses import replace

import pytest

from arflow.flow.bench import DEFAULT_T_LIST, fit_scaling_exponent, sweep
from arflow.flow.evaluation import mmd2_unbiased
from arflow.flow.model import PRESETS
from arflow.flow.sampler import SamplerConfig, sample_model
from arflow.flow.sequence import DatasetSpec, make_dataset
from arflow.flow.training import TrainConfig, run_training

pytestmark = pytest.mark.slow

DESK_DATA = DatasetSpec(kind="mixture", num_classes=4, items_per_class=256, latent_shape=(4, 8, 8), spread=0.5, seed=0)
DESK_TRAIN = TrainConfig(learning_rate=1e-4, batch_size=8, total_steps=2000, seed=0, checkpoint_every=2000)


@pytest.fixture(scope="module")
def desk_runs():
    dataset = make_dataset(DESK_DATA)
    return {n: run_training(PRESETS["desk"], replace(DESK_TRAIN, seq_len=n), dataset) for n in (1, 2, 5)}, dataset


def test_longer_sequences_train_to_lower_loss(desk_runs):
    runs, _ = desk_runs
    final = {n: result.window_mean(100) for n, result in runs.items()}
    assert final[5] < final[2] < final[1]


def test_dropping_the_cache_degrades_samples(desk_runs):
    runs, dataset = desk_runs
    model = runs[5].trainer.model
    reference = dataset.class_items(0)
    cached = mmd2_unbiased(sample_model(model, 0, 256, SamplerConfig(), seed=3), reference)
    uncached = mmd2_unbiased(sample_model(model, 0, 256, SamplerConfig(use_cache=False), seed=3), reference)
    assert uncached >= 1.5 * cached


def test_more_steps_do_not_hurt(desk_runs):
    runs, dataset = desk_runs
    model = runs[5].trainer.model
    reference = dataset.class_items(0)
    coarse = mmd2_unbiased(sample_model(model, 0, 256, SamplerConfig(steps=4), seed=3), reference)
    fine = mmd2_unbiased(sample_model(model, 0, 256, SamplerConfig(steps=32), seed=3), reference)
    assert fine <= coarse


@pytest.mark.parametrize("mechanism, low, high", [("hybrid", 0.8, 1.3), ("softmax_full", 1.7, 2.3)])
def test_wall_clock_scaling(mechanism, low, high):
    points = sweep(mechanism, DEFAULT_T_LIST, C=64, d=64, heads=1, repeats=5)
    slope, _ = fit_scaling_exponent(points)
    assert low <= slope <= high
