from __future__ import annotations

from typing import Callable

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from arflow.flow import numcore as nc
from arflow.flow.errors import ContractError, NumericError, ShapeError
from arflow.flow.numcore import RngState, Tape, Tensor


def _random(shape, seed: int, low: float = -1.0, high: float = 1.0) -> Tensor:
    u, _ = nc.uniform_array(shape, RngState(seed))
    return nc.parameter(low + (high - low) * u)


def _weights(shape, seed: int) -> np.ndarray:
    values, _ = nc.gaussian_array(shape, RngState(seed))
    return values


def check_gradient(fn: Callable[[], Tensor], *tensors: Tensor, h: float = 1e-5, rtol: float = 2e-4) -> None:
    with Tape() as tape:
        loss = fn()
    grads = nc.backward(loss, tape, params=list(tensors), accumulate=False)
    for tensor in tensors:
        numeric = nc.numerical_gradient(fn, tensor, h=h)
        np.testing.assert_allclose(grads[id(tensor)], numeric, rtol=rtol, atol=1e-7)


def _projected(out: Tensor, seed: int = 99) -> Tensor:
    """Scalar sum(out * w) for a fixed random w, so every output entry reaches the loss."""
    return nc.sum(nc.mul(out, _weights(out.shape, seed)))


def test_matmul_gradient_matches_finite_differences(float64):
    a = _random((5, 7), 1)
    b = _random((7, 3), 2)
    with Tape() as tape:
        loss = _projected(nc.matmul(a, b))
    grads = nc.backward(loss, tape, params=[a, b], accumulate=False)
    for tensor in (a, b):
        numeric = nc.numerical_gradient(lambda: _projected(nc.matmul(a, b)), tensor, h=1e-3)
        assert np.max(np.abs(grads[id(tensor)] - numeric)) < 1e-6


def test_batched_matmul_gradients(float64):
    a = _random((2, 3, 4, 5), 3)
    b = _random((2, 3, 5, 2), 4)
    w = _random((5, 6), 5)
    check_gradient(lambda: _projected(nc.matmul(a, b)), a, b)
    check_gradient(lambda: _projected(nc.matmul(a, w)), a, w)


@pytest.mark.parametrize(
    "op",
    [nc.sigmoid, nc.log_sigmoid, nc.exp, nc.silu, nc.gelu, nc.neg, lambda x: nc.scale(x, -2.5)],
    ids=["sigmoid", "log_sigmoid", "exp", "silu", "gelu", "neg", "scale"],
)
def test_elementwise_gradients(float64, op):
    x = _random((3, 4), 6, low=-3.0, high=3.0)
    check_gradient(lambda: _projected(op(x)), x)


def test_log_gradient(float64):
    x = _random((3, 4), 7, low=0.2, high=2.0)
    check_gradient(lambda: _projected(nc.log(x)), x)


def test_broadcasting_binary_gradients(float64):
    a = _random((2, 3, 4), 8)
    b = _random((4,), 9)
    c = _random((2, 1, 4), 10)
    check_gradient(lambda: _projected(nc.add(a, b)), a, b)
    check_gradient(lambda: _projected(nc.sub(c, a)), a, c)
    check_gradient(lambda: _projected(nc.mul(a, c)), a, c)


def test_shape_op_gradients(float64):
    x = _random((2, 3, 4), 11)
    y = _random((2, 2, 4), 12)
    check_gradient(lambda: _projected(nc.transpose(x, (2, 0, 1))), x)
    check_gradient(lambda: _projected(nc.reshape(x, (6, 4))), x)
    check_gradient(lambda: _projected(nc.concat([x, y], axis=1)), x, y)
    check_gradient(lambda: _projected(nc.slice_axis(x, 2, 1, 3)), x)
    check_gradient(lambda: _projected(nc.split(x, 2, axis=2)[1]), x)


def test_reduction_gradients(float64):
    x = _random((3, 4, 5), 13)
    check_gradient(lambda: _projected(nc.sum(x, axis=1)), x)
    check_gradient(lambda: _projected(nc.mean(x, axis=(0, 2), keepdims=True)), x)
    check_gradient(lambda: nc.mean(nc.mul(x, x)), x)


def test_layer_norm_gradient(float64):
    x = _random((3, 6), 14, low=-2.0, high=2.0)
    gain = _random((6,), 15, low=0.5, high=1.5)
    bias = _random((6,), 16)
    check_gradient(lambda: _projected(nc.layer_norm(x, gain, bias)), x, gain, bias)
    check_gradient(lambda: _projected(nc.layer_norm(x)), x)


def test_softmax_and_masked_fill_gradient(float64):
    x = _random((2, 4, 4), 17, low=-2.0, high=2.0)
    mask = np.triu(np.ones((4, 4), dtype=bool), k=1)
    check_gradient(lambda: _projected(nc.softmax_rows(x, 0.7)), x)
    check_gradient(lambda: _projected(nc.softmax_rows(nc.masked_fill(x, mask), 1.0)), x)


def test_embedding_gradient_scatters_repeated_rows(float64):
    table = _random((5, 3), 18)
    indices = np.array([[0, 2], [2, 4]])
    check_gradient(lambda: _projected(nc.embedding(table, indices)), table)


def test_square_error_mean_matches_scalar_loop(float64):
    pred = _random((3, 5), 19)
    target = _weights((3, 5), 20)
    expected = 0.0
    for p, t in zip(pred.data.reshape(-1), target.reshape(-1)):
        expected += (p - t) ** 2
    assert nc.square_error_mean(pred, target).item() == pytest.approx(expected / 15, abs=1e-6)
    check_gradient(lambda: nc.square_error_mean(pred, target), pred)


def test_softmax_rows_are_distributions():
    x = Tensor(_weights((4, 4), 21) * 5.0)
    y = nc.softmax_rows(x).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(y > 0)


def test_softmax_of_masked_rows_stays_finite():
    x = Tensor(np.zeros((3, 3)))
    y = nc.softmax_rows(nc.masked_fill(x, np.triu(np.ones((3, 3), dtype=bool), k=1))).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y[0], [1.0, 0.0, 0.0], atol=1e-6)


def test_layer_norm_standardizes_rows(float64):
    x = Tensor(_weights((8, 32), 22) * 3.0 + 2.0)
    y = nc.layer_norm(x).data.astype(np.float64)
    assert np.all(np.abs(y.mean(axis=-1)) < 1e-6)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)


def test_backward_accumulates_into_grad_slots():
    x = nc.parameter(np.array([1.0, 2.0]))
    for _ in range(2):
        with Tape() as tape:
            loss = nc.sum(nc.mul(x, x))
        nc.backward(loss, tape)
    np.testing.assert_allclose(x.grad, [4.0, 8.0])
    x.zero_grad()
    assert x.grad is None


def test_unused_parameters_receive_zero_gradients():
    used = nc.parameter(np.ones(3))
    unused = nc.parameter(np.ones((2, 2)))
    with Tape() as tape:
        loss = nc.sum(used)
    grads = nc.backward(loss, tape, params=[used, unused], accumulate=False)
    np.testing.assert_array_equal(grads[id(unused)], np.zeros((2, 2)))
    assert unused.grad is None


def test_backward_rejects_non_scalar_and_foreign_losses():
    x = nc.parameter(np.ones(3))
    with Tape() as tape:
        out = nc.scale(x, 2.0)
    with pytest.raises(ContractError):
        nc.backward(out, tape)
    with Tape() as other:
        loss = nc.sum(x)
    with pytest.raises(ContractError):
        nc.backward(loss, tape)
    assert len(other) == 1


def test_nothing_is_recorded_without_a_tape():
    x = nc.parameter(np.ones(3))
    out = nc.sum(nc.mul(x, x))
    assert not out.requires_grad
    assert nc.active_tape() is None


def test_shape_errors_carry_the_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\)"):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        nc.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ShapeError):
        nc.split(Tensor(np.ones((5,))), 2)


def test_float64_mode_is_scoped():
    assert Tensor([1.0]).data.dtype == np.float32
    with nc.float64_mode():
        assert Tensor([1.0]).data.dtype == np.float64
        assert nc.is_float64()
    assert Tensor([1.0]).data.dtype == np.float32


def test_debug_mode_flags_non_finite_outputs():
    nc.set_debug(True)
    try:
        with pytest.raises(NumericError):
            nc.log(Tensor(np.zeros(2)))
    finally:
        nc.set_debug(False)


def test_rng_is_deterministic_and_advances_by_blocks():
    a, state_a = nc.uniform_array(10, RngState(5))
    b, state_b = nc.uniform_array(10, RngState(5))
    np.testing.assert_array_equal(a, b)
    assert state_a == state_b == RngState(5, 3)
    c, _ = nc.uniform_array(10, state_a)
    assert not np.array_equal(a, c)


def test_rng_streams_are_distinct():
    root = RngState(3)
    draws = [nc.uniform_array(4, root.stream(i))[0] for i in range(3)]
    draws.append(nc.uniform_array(4, root.stream(0).stream(1))[0])
    draws.append(nc.uniform_array(4, root.stream(1).stream(0))[0])
    for i, first in enumerate(draws):
        for second in draws[i + 1 :]:
            assert not np.array_equal(first, second)
    assert root.stream(2) == RngState(3).stream(2)


def test_rng_state_serializes():
    state = RngState(2**63 + 11, 42)
    assert RngState.from_dict(state.to_dict()) == state
    with pytest.raises(ContractError):
        RngState(-1)
    with pytest.raises(ContractError):
        RngState(1, -5)


@given(st.integers(min_value=0, max_value=2**64 - 1), st.integers(min_value=0, max_value=2**40))
def test_uniforms_lie_strictly_inside_unit_interval(seed, counter):
    values, _ = nc.uniform_array(64, RngState(seed, counter))
    assert np.all(values > 0.0) and np.all(values < 1.0)


def test_gaussian_moments():
    values, _ = nc.gaussian_array(200_000, RngState(1))
    assert abs(values.mean()) < 0.01
    assert abs(values.std() - 1.0) < 0.01


def test_integers_cover_range():
    values, _ = nc.integers_array(10_000, 7, RngState(4))
    assert values.min() == 0 and values.max() == 6
    with pytest.raises(ContractError):
        nc.integers_array(3, 0, RngState(4))


def test_xavier_uniform_bounds():
    w, rng = nc.xavier_uniform(30, 10, RngState(0))
    assert w.requires_grad
    assert np.max(np.abs(w.data)) <= np.sqrt(6.0 / 40) + 1e-6
    assert rng.counter > 0
