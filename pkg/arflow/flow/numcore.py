"""
Tensor arithmetic with tape-based reverse-mode differentiation.

Tensors wrap contiguous numpy arrays in the active float dtype. Ops executed while a `Tape` is active on the current
thread record a node per op (inputs, output, backward rule) whenever an input requires gradients; `backward` then walks
the tape once in reverse. Without an active tape nothing is recorded, which is how inference runs.

Randomness is explicit: `RngState` is a (seed, counter) pair over numpy's counter-based Philox generator and every draw
returns the advanced state alongside the values.
"""
from __future__ import annotations

import math
import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Sequence, Union

import numpy as np
from scipy import special

from .errors import ContractError, NumericError, ShapeError

_FLOAT64: bool = os.environ.get("ARFLOW_F64", "0") == "1"
_DEBUG: bool = os.environ.get("ARFLOW_DEBUG", "0") == "1"
# large negative stand-in for -inf so stored values stay finite
MASK_VALUE = -1.0e9


def float_dtype() -> np.dtype[Any]:
    """Active float dtype."""
    return np.dtype(np.float64 if _FLOAT64 else np.float32)


def is_float64() -> bool:
    return _FLOAT64


def set_float64(enabled: bool) -> None:
    """Switches the global precision mode. Existing tensors keep their dtype."""
    global _FLOAT64  # pylint: disable=global-statement
    _FLOAT64 = enabled


@contextmanager
def float64_mode(enabled: bool = True) -> Iterator[None]:
    previous = _FLOAT64
    set_float64(enabled)
    try:
        yield
    finally:
        set_float64(previous)


def set_debug(enabled: bool) -> None:
    """Enables finiteness checks on every op output."""
    global _DEBUG  # pylint: disable=global-statement
    _DEBUG = enabled


def _check_finite(data: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {where}")


class Tensor:
    """Dense array plus gradient slot."""

    data: np.ndarray
    requires_grad: bool
    grad: np.ndarray | None
    name: str | None

    # numpy defers mixed ndarray/Tensor arithmetic to Tensor
    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None) -> None:
        self.data = np.ascontiguousarray(np.asarray(data, dtype=float_dtype()))
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        if _DEBUG:
            _check_finite(self.data, name or "tensor construction")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: TensorLike) -> Tensor:
        return add(self, other)

    def __radd__(self, other: TensorLike) -> Tensor:
        return add(other, self)

    def __sub__(self, other: TensorLike) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: TensorLike) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: TensorLike) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: TensorLike) -> Tensor:
        return mul(other, self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        label = f"{self.name}: " if self.name else ""
        return f"Tensor({label}shape={self.shape}, dtype={self.data.dtype}{flag})"


TensorLike = Union[Tensor, np.ndarray, float, int]
BackwardRule = Callable[[np.ndarray], Sequence[Union[np.ndarray, None]]]


def as_tensor(value: TensorLike) -> Tensor:
    """Wraps constants; tensors pass through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(data: Any, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=float_dtype()), requires_grad=requires_grad)


@dataclass
class TapeNode:
    """One recorded op."""

    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(id(t) for t in self.inputs)

    @property
    def output_id(self) -> int:
        return id(self.output)


class Tape:
    """Ordered record of ops. Rebuilt every forward pass; never shared across threads."""

    nodes: list[TapeNode]

    def __init__(self) -> None:
        self.nodes = []

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *_exc: object) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "tapes must be exited in the order they were entered"

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)


_LOCAL = threading.local()


def _tape_stack() -> list[Tape]:
    if not hasattr(_LOCAL, "tapes"):
        _LOCAL.tapes = []
    return _LOCAL.tapes


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _result(data: np.ndarray, inputs: Sequence[Tensor], rule: BackwardRule, op: str) -> Tensor:
    tape = active_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked)
    if _DEBUG:
        _check_finite(out.data, op)
    if tracked:
        assert tape is not None
        tape.record(TapeNode(tuple(inputs), out, rule))
    return out


def backward(
    loss: Tensor,
    tape: Tape,
    params: Sequence[Tensor] | None = None,
    accumulate: bool = True,
) -> dict[int, np.ndarray]:
    """
    Reverse accumulation over `tape` starting from scalar `loss`.

    Returns leaf gradients keyed by `id(tensor)`. Params given in `params` but unreachable from the loss get zeros.
    With `accumulate` the gradients are also added into each leaf's `.grad`.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {node.output_id for node in tape.nodes}
    if id(loss) not in produced:
        raise ContractError("loss was not produced on this tape")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        grad_out = pending.pop(node.output_id, None)
        if grad_out is None:
            continue
        for tensor, grad_in in zip(node.inputs, node.backward(grad_out)):
            if grad_in is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            target = pending if key in produced else leaf_grads
            if key not in produced:
                leaves[key] = tensor
            if key in target:
                target[key] = target[key] + grad_in
            else:
                target[key] = grad_in
    for key, grad in leaf_grads.items():
        leaf_grads[key] = np.array(grad, dtype=leaves[key].data.dtype).reshape(leaves[key].shape)
    for p in params or ():
        if id(p) not in leaf_grads:
            leaf_grads[id(p)] = np.zeros_like(p.data)
            leaves[id(p)] = p
    if accumulate:
        for key, grad in leaf_grads.items():
            leaf = leaves[key]
            leaf.grad = grad.copy() if leaf.grad is None else leaf.grad + grad
    return leaf_grads


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sums `grad` down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as err:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from err


def add(a: TensorLike, b: TensorLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _broadcast_shape(ta, tb, "add")

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)

    return _result(ta.data + tb.data, (ta, tb), _backward, "add")


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _broadcast_shape(ta, tb, "sub")

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, ta.shape), _unbroadcast(-g, tb.shape)

    return _result(ta.data - tb.data, (ta, tb), _backward, "sub")


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _broadcast_shape(ta, tb, "mul")

    def _backward(g: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None]:
        ga = _unbroadcast(g * tb.data, ta.shape) if ta.requires_grad else None
        gb = _unbroadcast(g * ta.data, tb.shape) if tb.requires_grad else None
        return ga, gb

    return _result(ta.data * tb.data, (ta, tb), _backward, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * factor,)

    return _result(x.data * factor, (x,), _backward, "scale")


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as err:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} x {b.shape}") from err

    def _backward(g: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None]:
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # weight shared across all leading axes of `a`
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(data, (a, b), _backward, "matmul")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permutes axes; swaps the last two when `axes` is omitted."""
    if axes is None:
        perm = list(range(x.ndim))
        perm[-1], perm[-2] = perm[-2], perm[-1]
    else:
        perm = list(axes)
    inverse = np.argsort(perm)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.transpose(g, inverse),)

    return _result(np.transpose(x.data, perm), (x,), _backward, "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as err:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from err

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.reshape(x.shape),)

    return _result(data, (x,), _backward, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat along axis {axis}: shapes {[t.shape for t in tensors]}") from err
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, bounds, axis=axis)

    return _result(data, tuple(tensors), _backward, "concat")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index: list[slice] = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    key = tuple(index)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return _result(x.data[key], (x,), _backward, "slice")


def split(x: Tensor, sections: int, axis: int = 0) -> list[Tensor]:
    """Splits into `sections` equal parts along `axis`."""
    extent = x.shape[axis]
    if sections < 1 or extent % sections:
        raise ShapeError(f"cannot split extent {extent} of {x.shape} into {sections} equal parts")
    width = extent // sections
    return [slice_axis(x, axis, i * width, (i + 1) * width) for i in range(sections)]


def masked_fill(x: Tensor, mask: np.ndarray, value: float = MASK_VALUE) -> Tensor:
    """Replaces entries where `mask` is true with a constant; those entries get no gradient."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.where(mask, 0.0, g),)

    return _result(np.where(mask, value, x.data), (x,), _backward, "masked_fill")


def sigmoid(x: Tensor) -> Tensor:
    s = special.expit(x.data)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * s * (1.0 - s),)

    return _result(s, (x,), _backward, "sigmoid")


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)), stable for large |x|."""

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * special.expit(-x.data),)

    return _result(special.log_expit(x.data), (x,), _backward, "log_sigmoid")


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * e,)

    return _result(e, (x,), _backward, "exp")


def log(x: Tensor) -> Tensor:
    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g / x.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)
    return _result(data, (x,), _backward, "log")


def silu(x: Tensor) -> Tensor:
    s = special.expit(x.data)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * (s + x.data * s * (1.0 - s)),)

    return _result(x.data * s, (x,), _backward, "silu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    th = np.tanh(u)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        du = _GELU_C * (1.0 + 3.0 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th**2) * du),)

    return _result(0.5 * x.data * (1.0 + th), (x,), _backward, "gelu")


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """Normalizes over the last axis, then applies the optional learnable gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv = 1.0 / np.sqrt((centred**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    inputs = [x] + [t for t in (gain, bias) if t is not None]

    def _backward(g: np.ndarray) -> list[np.ndarray]:
        g_hat = g * gain.data if gain is not None else g
        gx = inv * (
            g_hat - g_hat.mean(axis=-1, keepdims=True) - xhat * (g_hat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [gx]
        if gain is not None:
            grads.append(_unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return grads

    return _result(out, inputs, _backward, "layer_norm")


def sum(  # pylint: disable=redefined-builtin
    x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), _backward, "sum")


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax_rows(x: Tensor, scale: float = 1.0) -> Tensor:  # pylint: disable=redefined-outer-name
    """Softmax of `scale * x` over the last axis, stabilized by the row max."""
    z = x.data * scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (scale * y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), _backward, "softmax_rows")


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gathers rows of `table`; the gradient scatter-adds back."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding indices out of range for table of {table.shape[0]} rows")

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(table.data[idx], (table,), _backward, "embedding")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias over the last axis."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def square_error_mean(pred: Tensor, target: TensorLike) -> Tensor:
    """Mean over all elements of (pred - target)^2."""
    diff = sub(pred, target)
    return mean(mul(diff, diff))


# randomness

_BLOCK_WORDS = 4  # Philox4x64 emits four 64-bit words per counter increment


@dataclass(frozen=True)
class RngState:
    """Counter-based generator position; identical states yield identical streams."""

    seed: int
    counter: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ContractError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.counter < 0:
            raise ContractError(f"counter must be non-negative, got {self.counter}")

    def stream(self, index: int) -> RngState:
        """Independent child stream, e.g. one per batch item or training step."""
        entropy = [self.seed, self.counter & (2**64 - 1), self.counter >> 64, index]
        words = np.random.SeedSequence(entropy).generate_state(
            2, dtype=np.uint32
        )
        return RngState(seed=int(words[0]) | (int(words[1]) << 32), counter=0)

    def to_dict(self) -> dict[str, int]:
        return {"seed": self.seed, "counter": self.counter}

    @classmethod
    def from_dict(cls, payload: dict[str, int]) -> RngState:
        return cls(seed=int(payload["seed"]), counter=int(payload["counter"]))


def _raw_words(n: int, rng: RngState) -> tuple[np.ndarray, RngState]:
    if n <= 0:
        return np.empty(0, dtype=np.uint64), rng
    blocks = -(-n // _BLOCK_WORDS)
    bit_gen = np.random.Philox(key=rng.seed, counter=rng.counter)
    words = bit_gen.random_raw(blocks * _BLOCK_WORDS)[:n]
    return words, RngState(rng.seed, rng.counter + blocks)


def uniform_array(shape: Sequence[int] | int, rng: RngState) -> tuple[np.ndarray, RngState]:
    """Float64 uniforms strictly inside (0, 1)."""
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    words, rng = _raw_words(int(np.prod(shape)), rng)
    values = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return values.reshape(shape), rng


def gaussian_array(shape: Sequence[int] | int, rng: RngState) -> tuple[np.ndarray, RngState]:
    """Float64 standard normals via Box-Muller."""
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    n = int(np.prod(shape))
    pairs = -(-n // 2)
    u, rng = uniform_array(2 * pairs, rng)
    radius = np.sqrt(-2.0 * np.log(u[:pairs]))
    theta = 2.0 * np.pi * u[pairs:]
    values = np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])[:n]
    return values.reshape(shape), rng


def integers_array(shape: Sequence[int] | int, high: int, rng: RngState) -> tuple[np.ndarray, RngState]:
    """Uniform integers in [0, high)."""
    if high < 1:
        raise ContractError(f"integer range must be non-empty, got high={high}")
    u, rng = uniform_array(shape, rng)
    return np.minimum(np.floor(u * high).astype(np.int64), high - 1), rng


def uniform(shape: Sequence[int] | int, rng: RngState) -> tuple[Tensor, RngState]:
    values, rng = uniform_array(shape, rng)
    return Tensor(values), rng


def gaussian(shape: Sequence[int] | int, rng: RngState) -> tuple[Tensor, RngState]:
    values, rng = gaussian_array(shape, rng)
    return Tensor(values), rng


def xavier_uniform(fan_in: int, fan_out: int, rng: RngState, name: str | None = None) -> tuple[Tensor, RngState]:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    u, rng = uniform_array((fan_in, fan_out), rng)
    return parameter((2.0 * u - 1.0) * limit, name=name), rng


def normal_init(shape: Sequence[int], std: float, rng: RngState, name: str | None = None) -> tuple[Tensor, RngState]:
    values, rng = gaussian_array(shape, rng)
    return parameter(values * std, name=name), rng


def numerical_gradient(fn: Callable[[], TensorLike], tensor: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar `fn()` with respect to every entry of `tensor`."""
    grad = np.zeros(tensor.shape, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = float(np.asarray(as_tensor(fn()).data).reshape(-1)[0])
        flat[i] = original - h
        minus = float(np.asarray(as_tensor(fn()).data).reshape(-1)[0])
        flat[i] = original
        grad.reshape(-1)[i] = (plus - minus) / (2.0 * h)
    return grad
