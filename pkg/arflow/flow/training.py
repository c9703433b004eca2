"""
Training: the sequence velocity objective, AdamW, EMA, label dropout and ARFCKPT1 checkpoints.

Every step draws its batch from `RngState(seed).stream(step)`, so a run resumed from a checkpoint only needs the step
counter (plus parameters, EMA and optimizer moments) to reproduce the uninterrupted loss trace bit for bit.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Protocol, Sequence

import numpy as np
from tqdm import tqdm

from .errors import ConfigError, DataFormatError, NumericError, ShapeError
from .fileio import atomic_write, write_bytes_atomic, write_text_atomic
from .interpolant import velocity_loss_term
from .logger import get_logger
from .model import NULL_CLASS, ARFlowModel, ModelConfig, ModelOutput
from .numcore import RngState, Tape, Tensor, backward, float_dtype, is_float64, uniform_array
from .sequence import TIME_DENSITIES, CategoryDataset, TrainingSequence, build_batch, stack_sequences

LOGGER = get_logger()

CHECKPOINT_MAGIC = b"ARFCKPT1"
CHECKPOINT_VERSION = 1
METRICS_HEADER = "step,loss,grad_norm,wall_ms"
CHECKPOINT_GROUPS = ("params", "ema", "adam_m", "adam_v")
# stream index reserved for parameter initialization, far above any step index
INIT_STREAM = 2**62


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    ema_decay: float = 0.9999
    label_drop_prob: float = 0.1
    seq_len: int = 5
    total_steps: int = 2000
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 50
    max_grad_norm: Optional[float] = None
    time_density: str = "uniform"
    threads: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1], got {self.ema_decay}")
        if not 0.0 <= self.label_drop_prob < 1.0:
            raise ConfigError(f"label_drop_prob must lie in [0, 1), got {self.label_drop_prob}")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be > 0 and weight_decay >= 0")
        if self.batch_size < 1 or self.seq_len < 1 or self.total_steps < 0:
            raise ConfigError("batch_size and seq_len must be >= 1, total_steps >= 0")
        if self.checkpoint_every < 1 or self.log_every < 1 or self.threads < 1:
            raise ConfigError("checkpoint_every, log_every and threads must be >= 1")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ConfigError(f"max_grad_norm must be positive, got {self.max_grad_norm}")
        if self.time_density not in TIME_DENSITIES:
            raise ConfigError(f"unknown time density '{self.time_density}', expected one of {TIME_DENSITIES}")


@dataclass
class OptimizerState:
    """AdamW moments keyed by parameter name."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: dict[str, Tensor]) -> OptimizerState:
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss: float
    grad_norm: float
    wall_ms: float

    def csv_line(self) -> str:
        return f"{self.step},{self.loss!r},{self.grad_norm!r},{self.wall_ms:.3f}"


class VelocityModel(Protocol):
    def forward(self, latents: Any, times: np.ndarray, class_ids: np.ndarray) -> ModelOutput:
        ...


def adamw_step(
    params: dict[str, Tensor], grads: dict[str, np.ndarray], opt: OptimizerState, cfg: TrainConfig
) -> OptimizerState:
    """Bias-corrected Adam with decoupled weight decay; parameters are replaced in place."""
    step = opt.step + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    correction1 = 1.0 - b1**step
    correction2 = 1.0 - b2**step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for '{name}' has shape {g.shape}, parameter has {p.shape}")
        m = b1 * opt.m[name] + (1.0 - b1) * g
        v = b2 * opt.v[name] + (1.0 - b2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + cfg.adam_eps)
        decayed = p.data * (1.0 - cfg.learning_rate * cfg.weight_decay)
        p.data = (decayed - cfg.learning_rate * update).astype(p.data.dtype)
        opt.m[name] = m.astype(p.data.dtype)
        opt.v[name] = v.astype(p.data.dtype)
    opt.step = step
    return opt


def ema_update(ema_params: dict[str, Tensor], params: dict[str, Tensor], decay: float) -> dict[str, Tensor]:
    for name, ema in ema_params.items():
        ema.data = (decay * ema.data + (1.0 - decay) * params[name].data).astype(ema.data.dtype)
    return ema_params


def drop_labels(class_ids: np.ndarray, prob: float, rng: RngState) -> tuple[np.ndarray, RngState]:
    """Replaces each class id by NULL_CLASS with probability `prob`."""
    ids = np.asarray(class_ids, dtype=np.int64)
    u, rng = uniform_array(ids.shape, rng)
    return np.where(u < prob, NULL_CLASS, ids), rng


def training_inputs(
    batch: Sequence[TrainingSequence], rng: RngState, label_drop_prob: float = 0.0
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Stacked (latents, times, targets, class ids) with labels dropped to NULL_CLASS."""
    latents, times, targets, class_ids = stack_sequences(list(batch))
    class_ids, _ = drop_labels(class_ids, label_drop_prob, rng)
    return latents, times, targets, class_ids


def stacked_loss(
    model: VelocityModel, latents: np.ndarray, times: np.ndarray, targets: np.ndarray, class_ids: np.ndarray
) -> Tensor:
    out = model.forward(latents, times, class_ids)
    return velocity_loss_term(out.velocity, targets.astype(float_dtype()))


def sequence_loss(
    model: VelocityModel, batch: Sequence[TrainingSequence], rng: RngState, label_drop_prob: float = 0.0
) -> Tensor:
    """Mean velocity error over every chunk of every sequence, after label dropout."""
    return stacked_loss(model, *training_inputs(batch, rng, label_drop_prob))


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


class Trainer:
    """Model, EMA copy, optimizer state and step counter for one training run."""

    model: ARFlowModel
    ema: ARFlowModel
    opt: OptimizerState
    dataset: CategoryDataset
    config: TrainConfig
    step: int

    def __init__(
        self,
        model: ARFlowModel,
        dataset: CategoryDataset,
        config: TrainConfig,
        ema: ARFlowModel | None = None,
        opt: OptimizerState | None = None,
        step: int = 0,
    ) -> None:
        if dataset.latent_shape != model.config.latent_shape:
            raise ConfigError(f"dataset latents {dataset.latent_shape} != model latents {model.config.latent_shape}")
        if dataset.num_classes > model.config.num_classes:
            raise ConfigError(f"dataset has {dataset.num_classes} classes, model only {model.config.num_classes}")
        self.model = model
        self.ema = ema if ema is not None else model.copy(trainable=False)
        self.opt = opt if opt is not None else OptimizerState.zeros(model.params)
        self.dataset = dataset
        self.config = config
        self.step = step

    def step_rng(self, step: int) -> RngState:
        return RngState(self.config.seed).stream(step)

    def _shard_gradients(
        self, latents: np.ndarray, times: np.ndarray, targets: np.ndarray, class_ids: np.ndarray
    ) -> tuple[float, dict[str, np.ndarray]]:
        params = self.model.parameters()
        with Tape() as tape:
            loss = stacked_loss(self.model, latents, times, targets, class_ids)
        by_id = backward(loss, tape, params=params, accumulate=False)
        return loss.item(), {name: by_id[id(p)] for name, p in self.model.params.items()}

    def compute_gradients(self, step: int) -> tuple[float, dict[str, np.ndarray]]:
        cfg = self.config
        rng = self.step_rng(step)
        batch, _ = build_batch(self.dataset, cfg.batch_size, cfg.seq_len, rng.stream(0), cfg.time_density)
        latents, times, targets, class_ids = training_inputs(batch, rng.stream(1), cfg.label_drop_prob)
        shards = np.array_split(np.arange(cfg.batch_size), min(cfg.threads, cfg.batch_size))
        if len(shards) == 1:
            return self._shard_gradients(latents, times, targets, class_ids)
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            results = list(
                pool.map(
                    lambda idx: self._shard_gradients(latents[idx], times[idx], targets[idx], class_ids[idx]), shards
                )
            )
        # fixed shard order keeps the reduction deterministic
        weights = [len(idx) / cfg.batch_size for idx in shards]
        loss = sum(w * shard_loss for w, (shard_loss, _) in zip(weights, results))
        grads = {name: sum(w * g[name] for w, (_, g) in zip(weights, results)) for name in self.model.params}
        return float(loss), grads

    def update(self) -> StepRecord:
        start = time.perf_counter()
        loss, grads = self.compute_gradients(self.step)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite training loss at step {self.step + 1}")
        norm = grad_norm(grads)
        if self.config.max_grad_norm is not None and norm > self.config.max_grad_norm:
            factor = self.config.max_grad_norm / (norm + 1e-12)
            grads = {name: g * factor for name, g in grads.items()}
        adamw_step(self.model.params, grads, self.opt, self.config)
        ema_update(self.ema.params, self.model.params, self.config.ema_decay)
        self.step += 1
        return StepRecord(self.step, loss, norm, (time.perf_counter() - start) * 1000.0)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            model_config=self.model.config,
            train_config=self.config,
            step=self.step,
            params={n: p.data.copy() for n, p in self.model.params.items()},
            ema={n: p.data.copy() for n, p in self.ema.params.items()},
            adam_m={n: a.copy() for n, a in self.opt.m.items()},
            adam_v={n: a.copy() for n, a in self.opt.v.items()},
            opt_step=self.opt.step,
            rng=RngState(self.config.seed),
        )

    @classmethod
    def from_checkpoint(
        cls, ckpt: Checkpoint, dataset: CategoryDataset, config: TrainConfig | None = None
    ) -> Trainer:
        """Restores a run; `config` may extend `total_steps` but defaults to the stored one."""
        model = ckpt.model(ema=False)
        ema = ckpt.model(ema=True)
        opt = OptimizerState(m=dict(ckpt.adam_m), v=dict(ckpt.adam_v), step=ckpt.opt_step)
        return cls(model, dataset, config or ckpt.train_config, ema=ema, opt=opt, step=ckpt.step)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    step: int
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    opt_step: int
    rng: RngState
    float_bits: int = field(default_factory=lambda: 64 if is_float64() else 32)

    def model(self, ema: bool = True) -> ARFlowModel:
        source = self.ema if ema else self.params
        params = {n: Tensor(a, requires_grad=not ema, name=n) for n, a in source.items()}
        return ARFlowModel(self.model_config, params=params)

    def metadata(self) -> dict[str, Any]:
        return {
            "model_config": dataclasses.asdict(self.model_config),
            "train_config": dataclasses.asdict(self.train_config),
            "step": self.step,
            "opt_step": self.opt_step,
            "rng": self.rng.to_dict(),
            "float_bits": self.float_bits,
        }

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        arrays = []
        for group in CHECKPOINT_GROUPS:
            values = getattr(self, group)
            arrays.extend((f"{group}/{name}", values[name]) for name in values)
        return arrays


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    dtype = "<f8" if ckpt.float_bits == 64 else "<f4"
    meta = json.dumps(ckpt.metadata(), sort_keys=True).encode("utf-8")
    arrays = ckpt.named_arrays()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta)), meta, struct.pack("<I", len(arrays))]
    for name, array in arrays:
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return b"".join(parts)


class _Reader:
    """Bounds-checked cursor over checkpoint bytes."""

    def __init__(self, payload: bytes) -> None:
        self.payload = payload
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.payload):
            raise DataFormatError(f"checkpoint truncated at byte {self.offset} (needed {n} more)")
        chunk = self.payload[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_checkpoint(payload: bytes) -> Checkpoint:
    reader = _Reader(payload)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise DataFormatError("bad checkpoint magic")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(reader.take(reader.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise DataFormatError(f"checkpoint metadata is not valid JSON: {err}") from err
    float_bits = int(meta.get("float_bits", 32))
    width, dtype = (8, "<f8") if float_bits == 64 else (4, "<f4")
    groups: dict[str, dict[str, np.ndarray]] = {group: {} for group in CHECKPOINT_GROUPS}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        data = np.frombuffer(reader.take(width * int(np.prod(shape))), dtype=dtype).reshape(shape)
        group, _, key = name.partition("/")
        if group not in groups:
            raise DataFormatError(f"unknown checkpoint array group '{group}'")
        groups[group][key] = data.astype(float_dtype())
    if reader.offset != len(payload):
        raise DataFormatError(f"{len(payload) - reader.offset} trailing bytes after checkpoint arrays")
    try:
        ckpt = Checkpoint(
            model_config=ModelConfig(**meta["model_config"]),
            train_config=TrainConfig(**meta["train_config"]),
            step=int(meta["step"]),
            params=groups["params"],
            ema=groups["ema"],
            adam_m=groups["adam_m"],
            adam_v=groups["adam_v"],
            opt_step=int(meta["opt_step"]),
            rng=RngState.from_dict(meta["rng"]),
            float_bits=float_bits,
        )
    except (KeyError, TypeError) as err:
        raise DataFormatError(f"checkpoint metadata incomplete: {err}") from err
    if any(set(getattr(ckpt, group)) != set(ckpt.params) for group in CHECKPOINT_GROUPS):
        raise DataFormatError("checkpoint array groups do not name the same parameters")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> None:
    write_bytes_atomic(path, encode_checkpoint(ckpt))


def load_checkpoint(path: Path | str) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def save_metadata(metadata: dict[str, Any], output_path: Path) -> None:
    """ """
    write_text_atomic(output_path / "metadata.json", json.dumps(metadata, indent=2, sort_keys=True))


def write_metrics(path: Path, records: Sequence[StepRecord]) -> None:
    with atomic_write(path, "w") as f:
        f.write(METRICS_HEADER + "\n")
        for record in records:
            f.write(record.csv_line() + "\n")


def read_metrics(path: Path | str) -> list[StepRecord]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    try:
        return [
            StepRecord(int(r["step"]), float(r["loss"]), float(r["grad_norm"]), float(r["wall_ms"])) for r in rows
        ]
    except (KeyError, ValueError) as err:
        raise DataFormatError(f"malformed metrics file {path}: {err}") from err


@dataclass
class TrainingResult:
    trainer: Trainer
    records: list[StepRecord]

    def window_mean(self, window: int = 50) -> float:
        losses = [r.loss for r in self.records[-window:]]
        return float(np.mean(losses)) if losses else float("nan")


def run_training(
    model_config: ModelConfig,
    train_config: TrainConfig,
    dataset: CategoryDataset,
    out_dir: Path | str | None = None,
    resume: Path | str | None = None,
    progress: bool = False,
) -> TrainingResult:
    """
    Trains for `train_config.total_steps` steps. With `out_dir`, writes metadata.json, metrics.csv and checkpoints
    (`checkpoint_{step:06d}.arfckpt` plus `latest.arfckpt`). With `resume`, continues from that checkpoint.
    """
    t_zero = time.time()
    records: list[StepRecord] = []
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.model_config != model_config:
            LOGGER.warning("model config differs from the checkpoint; using the checkpoint's")
        trainer = Trainer.from_checkpoint(ckpt, dataset, train_config)
        LOGGER.info(f"resumed from {resume} at step {trainer.step}")
    else:
        model = ARFlowModel(model_config, RngState(train_config.seed).stream(INIT_STREAM))
        trainer = Trainer(model, dataset, train_config)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        metrics_path = out_path / "metrics.csv"
        if resume is not None and metrics_path.exists():
            records = [r for r in read_metrics(metrics_path) if r.step <= trainer.step]
        save_metadata(
            {
                "model_config": dataclasses.asdict(trainer.model.config),
                "train_config": dataclasses.asdict(train_config),
                "dataset": {"num_classes": dataset.num_classes, "items_per_class": dataset.items_per_class},
                "num_parameters": trainer.model.num_parameters(),
                "float_bits": 64 if is_float64() else 32,
                "resumed_from": str(resume) if resume is not None else None,
            },
            out_path,
        )
    LOGGER.info(f"training {trainer.model} for {train_config.total_steps} steps")

    for _ in tqdm(range(trainer.step, train_config.total_steps), disable=not progress, desc="train"):
        record = trainer.update()
        records.append(record)
        last = record.step == train_config.total_steps
        if record.step % train_config.log_every == 0 or last:
            LOGGER.info(f"step: {record.step}, loss: {record.loss:.6f}, duration: {record.wall_ms:.1f} ms")
            if out_path is not None:
                write_metrics(out_path / "metrics.csv", records)
        if out_path is not None and (record.step % train_config.checkpoint_every == 0 or last):
            ckpt = trainer.checkpoint()
            save_checkpoint(ckpt, out_path / f"checkpoint_{record.step:06d}.arfckpt")
            save_checkpoint(ckpt, out_path / "latest.arfckpt")
    LOGGER.info(f"Training ended. Total duration: {time.time() - t_zero} seconds")
    return TrainingResult(trainer, records)
