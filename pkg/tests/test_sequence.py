from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from arflow.flow.errors import ConfigError, ContractError, DataFormatError, ShapeError
from arflow.flow.numcore import RngState, uniform_array
from arflow.flow.sequence import (
    CategoryDataset,
    DatasetSpec,
    build_batch,
    build_sequence,
    class_pattern,
    decode_latents,
    draw_times,
    encode_latents,
    load_dataset,
    make_dataset,
    make_gaussian_mixture_dataset,
    make_pattern_image_dataset,
    read_latents,
    save_dataset,
    stack_sequences,
    write_latents,
)


def test_single_chunk_sequence_is_a_plain_flow_sample(tiny_dataset):
    seq, _ = build_sequence(tiny_dataset, 0, 1, RngState(0))
    assert seq.n == 1
    chunk = seq.chunks[0]
    np.testing.assert_array_equal(chunk.z_star, tiny_dataset.class_items(0)[seq.item_indices[0]])


def test_times_are_a_descending_permutation_of_the_raw_draws(tiny_dataset):
    seq, _ = build_sequence(tiny_dataset, 1, 5, RngState(3))
    times = seq.time_array()
    assert np.all(np.diff(times) <= 0)
    np.testing.assert_array_equal(np.sort(times), np.sort(seq.raw_times))
    # five class-item draws consume two Philox blocks before the times are drawn
    expected, _ = uniform_array(5, RngState(3, 2))
    np.testing.assert_array_equal(seq.raw_times, expected)


@given(st.integers(min_value=1, max_value=8), st.integers(min_value=0, max_value=10_000))
def test_ordering_holds_for_every_sequence(n, seed):
    ds = make_dataset(DatasetSpec(num_classes=2, items_per_class=4, latent_shape=(1, 2, 2), seed=1))
    seq, _ = build_sequence(ds, seed % 2, n, RngState(seed), "logit_normal" if seed % 3 == 0 else "uniform")
    times = seq.time_array()
    assert np.all(np.diff(times) <= 0)
    assert np.all((times > 0) & (times < 1))
    for chunk in seq.chunks:
        np.testing.assert_allclose(chunk.v_target, chunk.eps - chunk.z_star, atol=1e-6)


def test_sequences_are_deterministic(tiny_dataset):
    a, rng_a = build_sequence(tiny_dataset, 2, 4, RngState(11))
    b, rng_b = build_sequence(tiny_dataset, 2, 4, RngState(11))
    np.testing.assert_array_equal(a.latents(), b.latents())
    np.testing.assert_array_equal(a.targets(), b.targets())
    assert rng_a == rng_b


def test_sequences_mix_source_items():
    ds = make_dataset(DatasetSpec(num_classes=1, items_per_class=16, latent_shape=(1, 2, 2)))
    sources = [build_sequence(ds, 0, 5, RngState(0).stream(i))[0].item_indices for i in range(200)]
    mixed = sum(len(set(indices.tolist())) > 1 for indices in sources)
    assert mixed > 190


def test_chunk_noise_is_uncorrelated_across_a_sequence():
    ds = make_dataset(DatasetSpec(num_classes=1, items_per_class=4, latent_shape=(1, 2, 2)))
    rng = RngState(21)
    first, second = [], []
    for _ in range(10_000):
        seq, rng = build_sequence(ds, 0, 2, rng)
        first.append(seq.chunks[0].eps.ravel())
        second.append(seq.chunks[1].eps.ravel())
    rho = np.corrcoef(np.concatenate(first), np.concatenate(second))[0, 1]
    assert abs(rho) < 0.02


def test_sequence_preconditions(tiny_dataset):
    with pytest.raises(ContractError):
        build_sequence(tiny_dataset, 0, 0, RngState(0))
    with pytest.raises(ContractError):
        build_sequence(tiny_dataset, 3, 2, RngState(0))
    with pytest.raises(ConfigError):
        draw_times(3, RngState(0), "beta")


def test_batch_stacks_into_model_inputs(tiny_dataset):
    batch, rng = build_batch(tiny_dataset, 4, 3, RngState(5))
    latents, times, targets, class_ids = stack_sequences(batch)
    assert latents.shape == targets.shape == (4, 3, 2, 4, 4)
    assert times.shape == (4, 3)
    assert class_ids.shape == (4,)
    assert rng != RngState(5)
    again, _ = build_batch(tiny_dataset, 4, 3, RngState(5))
    np.testing.assert_array_equal(stack_sequences(again)[0], latents)


def test_mixed_lengths_cannot_be_stacked(tiny_dataset):
    one, _ = build_sequence(tiny_dataset, 0, 1, RngState(0))
    two, _ = build_sequence(tiny_dataset, 0, 2, RngState(0))
    with pytest.raises(ContractError):
        stack_sequences([one, two])


def test_mixture_without_spread_repeats_the_class_mean():
    ds = make_gaussian_mixture_dataset(3, 5, (2, 2, 2), 0.0, RngState(1))
    for k in range(3):
        items = ds.class_items(k)
        np.testing.assert_array_equal(items, np.broadcast_to(items[0], items.shape))
    means = ds.items[:, 0].reshape(3, -1)
    assert min(np.linalg.norm(means[i] - means[j]) for i in range(3) for j in range(i + 1, 3)) > 0


def test_mixture_class_means_converge():
    rng = RngState(2)
    ds = make_gaussian_mixture_dataset(2, 10_000, (2, 2, 2), 0.1, rng)
    centred = make_gaussian_mixture_dataset(2, 1, (2, 2, 2), 0.0, rng)
    for k in range(2):
        np.testing.assert_allclose(ds.class_items(k).mean(axis=0), centred.class_items(k)[0], atol=0.01)


def test_pattern_dataset():
    shape = (3, 4, 4)
    flat = make_pattern_image_dataset(4, 3, shape, 0.0, RngState(0))
    for k in range(4):
        expected = np.broadcast_to(class_pattern(k, 4, shape), (3,) + shape)
        np.testing.assert_allclose(flat.class_items(k), expected, atol=1e-6)
    noisy = make_pattern_image_dataset(2, 10_000, shape, 0.1, RngState(0))
    np.testing.assert_allclose(noisy.class_items(1).mean(axis=0), class_pattern(1, 2, shape), atol=0.01)
    again = make_pattern_image_dataset(2, 10_000, shape, 0.1, RngState(0))
    np.testing.assert_array_equal(noisy.items, again.items)


def test_dataset_spec_validation():
    with pytest.raises(ConfigError):
        DatasetSpec(kind="imagenet")
    with pytest.raises(ConfigError):
        DatasetSpec(latent_shape=(4, 8))
    with pytest.raises(ShapeError):
        CategoryDataset(np.zeros((2, 3, 4)))


def test_dataset_files_round_trip_byte_identically(tmp_path, tiny_dataset):
    first = tmp_path / "a.arfds"
    second = tmp_path / "b.arfds"
    save_dataset(tiny_dataset, first)
    loaded = load_dataset(first)
    save_dataset(loaded, second)
    assert first.read_bytes() == second.read_bytes()
    assert loaded.num_classes == tiny_dataset.num_classes == int.from_bytes(first.read_bytes()[6:10], "little")
    np.testing.assert_array_equal(loaded.items, tiny_dataset.items)


def test_empty_latent_files_are_valid(tmp_path):
    path = tmp_path / "empty.arfds"
    write_latents(path, np.zeros((1, 0, 2, 4, 4), dtype=np.float32))
    assert read_latents(path).shape == (1, 0, 2, 4, 4)


def test_malformed_dataset_files(tiny_dataset):
    payload = encode_latents(tiny_dataset.items)
    with pytest.raises(DataFormatError):
        decode_latents(payload[:-3])
    with pytest.raises(DataFormatError):
        decode_latents(b"XXXXXX" + payload[6:])
    with pytest.raises(DataFormatError):
        decode_latents(payload[:10])
