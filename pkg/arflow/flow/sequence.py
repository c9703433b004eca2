"""
Training sequences and the toy category datasets standing in for autoencoder latents.

A training sequence holds N items of one class, each corrupted at its own time. Chunks are ordered by descending time,
so the noisiest chunk comes first and every chunk is conditioned on the noisier ones before it.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from .errors import ConfigError, ContractError, DataFormatError, ShapeError
from .fileio import write_bytes_atomic
from .interpolant import FlowTime, InterpolantSample, corrupt
from .logger import get_logger
from .numcore import RngState, float_dtype, gaussian_array, integers_array, uniform_array

LOGGER = get_logger()

DATASET_MAGIC = b"ARFDS1"
_HEADER = struct.Struct("<5I")
TIME_DENSITIES = ("uniform", "logit_normal")
DATASET_KINDS = ("mixture", "pattern")


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for a toy category dataset; `path` is where make-data writes it."""

    kind: str = "mixture"
    num_classes: int = 4
    items_per_class: int = 256
    latent_shape: tuple[int, int, int] = (4, 8, 8)
    # item spread for the mixture, jitter for the pattern dataset
    spread: float = 0.5
    seed: int = 0
    path: str = "dataset.arfds"

    def __post_init__(self) -> None:
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"unknown dataset kind '{self.kind}', expected one of {DATASET_KINDS}")
        if self.num_classes < 1 or self.items_per_class < 1:
            raise ConfigError("dataset needs at least one class and one item per class")
        if len(self.latent_shape) != 3 or min(self.latent_shape) < 1:
            raise ConfigError(f"latent_shape must be three positive extents, got {self.latent_shape}")
        if self.spread < 0:
            raise ConfigError(f"spread must be non-negative, got {self.spread}")


class CategoryDataset:
    """Equal-sized classes of latents, stored as one (classes, items, d, h, w) float32 array."""

    items: np.ndarray

    def __init__(self, items: np.ndarray) -> None:
        items = np.ascontiguousarray(items, dtype=np.float32)
        if items.ndim != 5:
            raise ShapeError(f"dataset items must have shape (classes, items, d, h, w), got {items.shape}")
        if items.shape[0] < 1 or items.shape[1] < 1:
            raise ContractError(f"every class needs at least one item, got shape {items.shape}")
        items.setflags(write=False)
        self.items = items

    @property
    def num_classes(self) -> int:
        return int(self.items.shape[0])

    @property
    def items_per_class(self) -> int:
        return int(self.items.shape[1])

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        d, h, w = self.items.shape[2:]
        return int(d), int(h), int(w)

    def class_items(self, class_id: int) -> np.ndarray:
        if not 0 <= class_id < self.num_classes:
            raise ContractError(f"class id {class_id} outside [0, {self.num_classes})")
        return self.items[class_id]

    def __repr__(self) -> str:
        return (
            f"CategoryDataset(classes={self.num_classes}, items_per_class={self.items_per_class}, "
            f"latent_shape={self.latent_shape})"
        )


@dataclass(frozen=True)
class TrainingSequence:
    class_id: int
    chunks: tuple[InterpolantSample, ...]
    item_indices: np.ndarray
    raw_times: np.ndarray

    @property
    def n(self) -> int:
        return len(self.chunks)

    @property
    def times(self) -> tuple[FlowTime, ...]:
        return tuple(c.t for c in self.chunks)

    def time_array(self) -> np.ndarray:
        return np.array([c.t.t for c in self.chunks], dtype=np.float64)

    def latents(self) -> np.ndarray:
        return np.stack([c.z_t for c in self.chunks])

    def targets(self) -> np.ndarray:
        return np.stack([c.v_target for c in self.chunks])


def draw_times(n: int, rng: RngState, density: str = "uniform") -> tuple[np.ndarray, RngState]:
    if density == "uniform":
        return uniform_array(n, rng)
    if density == "logit_normal":
        normals, rng = gaussian_array(n, rng)
        return special.expit(normals), rng
    raise ConfigError(f"unknown time density '{density}', expected one of {TIME_DENSITIES}")


def build_sequence(
    ds: CategoryDataset, class_id: int, n: int, rng: RngState, time_density: str = "uniform"
) -> tuple[TrainingSequence, RngState]:
    """Draws n items with replacement, n times, sorts times descending (stable) and corrupts each item."""
    if n < 1:
        raise ContractError(f"sequence length must be >= 1, got {n}")
    pool = ds.class_items(class_id)
    if pool.shape[0] < 1:
        raise ContractError(f"class {class_id} has no items")
    indices, rng = integers_array(n, pool.shape[0], rng)
    raw_times, rng = draw_times(n, rng, time_density)
    order = np.argsort(-raw_times, kind="stable")
    dtype = float_dtype()
    chunks = []
    for pos in order:
        eps, rng = gaussian_array(ds.latent_shape, rng)
        z_star = pool[indices[pos]].astype(dtype)
        chunks.append(corrupt(z_star, eps.astype(dtype), float(raw_times[pos])))
    seq = TrainingSequence(class_id=class_id, chunks=tuple(chunks), item_indices=indices, raw_times=raw_times)
    return seq, rng


def build_batch(
    ds: CategoryDataset, batch_size: int, n: int, rng: RngState, time_density: str = "uniform"
) -> tuple[list[TrainingSequence], RngState]:
    """Each element draws its own class, then builds its sequence on a private substream."""
    if batch_size < 1:
        raise ContractError(f"batch size must be >= 1, got {batch_size}")
    classes, rng = integers_array(batch_size, ds.num_classes, rng)
    batch = [build_sequence(ds, int(classes[b]), n, rng.stream(b), time_density)[0] for b in range(batch_size)]
    return batch, rng


def stack_sequences(batch: list[TrainingSequence]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns latents (B, N, d, h, w), times (B, N), velocity targets (B, N, d, h, w) and class ids (B,)."""
    if not batch:
        raise ContractError("empty batch")
    lengths = {seq.n for seq in batch}
    if len(lengths) != 1:
        raise ContractError(f"all sequences in a batch must share N, got lengths {sorted(lengths)}")
    latents = np.stack([seq.latents() for seq in batch])
    times = np.stack([seq.time_array() for seq in batch])
    targets = np.stack([seq.targets() for seq in batch])
    class_ids = np.array([seq.class_id for seq in batch], dtype=np.int64)
    return latents, times, targets, class_ids


def make_gaussian_mixture_dataset(
    num_classes: int, items_per_class: int, latent_shape: tuple[int, int, int], spread: float, rng: RngState
) -> CategoryDataset:
    """Class k: items ~ N(mu_k, spread^2 I), mu_k ~ N(0, I) drawn on substream k."""
    if num_classes < 1 or items_per_class < 1:
        raise ContractError("counts must be positive")
    shape = tuple(latent_shape)
    items = np.empty((num_classes, items_per_class) + shape, dtype=np.float64)
    for k in range(num_classes):
        mu, _ = gaussian_array(shape, rng.stream(k))
        noise, _ = gaussian_array((items_per_class,) + shape, rng.stream(num_classes + k))
        items[k] = mu + spread * noise
    return CategoryDataset(items)


def class_pattern(class_id: int, num_classes: int, latent_shape: tuple[int, int, int]) -> np.ndarray:
    """Phase-shifted cosine grating, one phase per channel; orientation and frequency set by the class."""
    d, h, w = latent_shape
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    theta = np.pi * class_id / num_classes
    freq = 1 + class_id % 3
    ramp = xx * np.cos(theta) + yy * np.sin(theta)
    return np.stack([np.cos(2.0 * np.pi * (freq * ramp + c / d)) for c in range(d)])


def make_pattern_image_dataset(
    num_classes: int, items_per_class: int, latent_shape: tuple[int, int, int], jitter: float, rng: RngState
) -> CategoryDataset:
    if num_classes < 1 or items_per_class < 1:
        raise ContractError("counts must be positive")
    shape = tuple(latent_shape)
    items = np.empty((num_classes, items_per_class) + shape, dtype=np.float64)
    for k in range(num_classes):
        noise, _ = gaussian_array((items_per_class,) + shape, rng.stream(k))
        items[k] = class_pattern(k, num_classes, latent_shape) + jitter * noise
    return CategoryDataset(items)


def make_dataset(spec: DatasetSpec) -> CategoryDataset:
    rng = RngState(spec.seed)
    if spec.kind == "mixture":
        ds = make_gaussian_mixture_dataset(spec.num_classes, spec.items_per_class, spec.latent_shape, spec.spread, rng)
    else:
        ds = make_pattern_image_dataset(spec.num_classes, spec.items_per_class, spec.latent_shape, spec.spread, rng)
    LOGGER.info(f"built {spec.kind} dataset: {ds}")
    return ds


def encode_latents(items: np.ndarray) -> bytes:
    """ARFDS1 bytes for a (classes, items, d, h, w) array; item counts may be zero."""
    if items.ndim != 5:
        raise ShapeError(f"expected (classes, items, d, h, w), got {items.shape}")
    header = _HEADER.pack(*(int(n) for n in items.shape))
    return DATASET_MAGIC + header + np.ascontiguousarray(items, dtype="<f4").tobytes()


def decode_latents(payload: bytes) -> np.ndarray:
    if len(payload) < len(DATASET_MAGIC) + _HEADER.size:
        raise DataFormatError(f"dataset file too short ({len(payload)} bytes)")
    if payload[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise DataFormatError(f"bad dataset magic {payload[:len(DATASET_MAGIC)]!r}")
    shape = _HEADER.unpack_from(payload, len(DATASET_MAGIC))
    body = payload[len(DATASET_MAGIC) + _HEADER.size :]
    expected = int(np.prod(shape)) * 4
    if len(body) != expected:
        raise DataFormatError(f"dataset header {shape} implies {expected} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(shape)


def write_latents(path: Path | str, items: np.ndarray) -> None:
    write_bytes_atomic(path, encode_latents(items))


def read_latents(path: Path | str) -> np.ndarray:
    return decode_latents(Path(path).read_bytes())


def save_dataset(ds: CategoryDataset, path: Path | str) -> None:
    write_latents(path, ds.items)
    LOGGER.info(f"saved {ds} to {path}")


def load_dataset(path: Path | str) -> CategoryDataset:
    return CategoryDataset(read_latents(path))
