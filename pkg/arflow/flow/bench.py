"""
Scaling benchmark for the attention forms.

FLOP and buffer counts are closed-form; wall time is the median of repeated forward passes after warmup. For stable
numbers run single-threaded (OMP_NUM_THREADS=1 / OPENBLAS_NUM_THREADS=1 set before the interpreter starts).
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from tqdm import tqdm

from .attention import MECHANISMS, AttentionParams, HybridAttnConfig, attend
from .errors import ConfigError, ContractError, DataFormatError
from .fileio import atomic_write
from .logger import get_logger
from .numcore import RngState, Tensor, gaussian_array

LOGGER = get_logger()

BENCH_HEADER = "mechanism,T,C,d,heads,median_ns,flops"
DEFAULT_T_LIST = (256, 512, 1024, 2048, 4096, 8192)


@dataclass(frozen=True)
class BenchPoint:
    mechanism: str
    T: int
    C: int
    d: int
    heads: int
    wall_ns: int
    flops: int

    def csv_line(self) -> str:
        return f"{self.mechanism},{self.T},{self.C},{self.d},{self.heads},{self.wall_ns},{self.flops}"


def flop_terms(mechanism: str, T: int, C: int, d: int, heads: int) -> dict[str, int]:
    """Multiply-add counts (2 per MAC) of one forward pass, term by term."""
    hidden = heads * d
    terms = {"projections": 8 * T * hidden * hidden}
    if mechanism == "softmax_full":
        terms["softmax_scores"] = 2 * T * T * d * heads
        terms["softmax_weighted_sum"] = 2 * T * T * d * heads
        return terms
    if mechanism not in MECHANISMS:
        raise ConfigError(f"unknown attention mechanism '{mechanism}', expected one of {MECHANISMS}")
    if mechanism == "hybrid":
        terms["gate_projection"] = 2 * T * hidden * heads
    terms["state_update"] = 2 * T * d * d * heads
    terms["inter_readout"] = 2 * T * d * d * heads
    terms["intra_scores"] = 2 * T * C * d * heads
    terms["intra_weighted_sum"] = 2 * T * C * d * heads
    return terms


def flop_count(mechanism: str, T: int, C: int, d: int, heads: int) -> int:
    return sum(flop_terms(mechanism, T, C, d, heads).values())


def peak_live_elements(mechanism: str, T: int, C: int, d: int, heads: int) -> int:
    """Largest simultaneously live buffer footprint: score matrices, state and the four projected activations."""
    activations = 4 * T * heads * d
    if mechanism == "softmax_full":
        return heads * T * T + activations
    if mechanism not in MECHANISMS:
        raise ConfigError(f"unknown attention mechanism '{mechanism}', expected one of {MECHANISMS}")
    return heads * T * C + heads * d * d + activations


def median_wall_ns(fn: Callable[[], object], repeats: int, warmup: int = 1) -> int:
    for _ in range(warmup):
        fn()
    timings = []
    for _ in range(repeats):
        start = time.perf_counter_ns()
        fn()
        timings.append(time.perf_counter_ns() - start)
    return max(int(np.median(timings)), 1)


def sweep(
    mechanism: str,
    t_list: Sequence[int],
    C: int = 64,
    d: int = 64,
    heads: int = 1,
    repeats: int = 5,
    warmup: int = 1,
    seed: int = 0,
    csv_path: Path | str | None = None,
    progress: bool = False,
) -> list[BenchPoint]:
    if repeats < 5:
        raise ContractError(f"at least 5 repeats are needed for a stable median, got {repeats}")
    if list(t_list) != sorted(t_list) or any(t < C or t % C for t in t_list):
        raise ContractError(f"T list must be ascending multiples of C={C}, got {list(t_list)}")
    config = HybridAttnConfig(num_heads=heads, head_dim=d, chunk_size=C)
    params, rng = AttentionParams.init(config, RngState(seed))
    points = []
    for T in tqdm(t_list, disable=not progress, desc=mechanism):
        values, rng = gaussian_array((1, T, config.hidden_size), rng)
        tokens = Tensor(values)
        wall = median_wall_ns(lambda: attend(mechanism, tokens, config, params), repeats, warmup)
        point = BenchPoint(mechanism, T, C, d, heads, wall, flop_count(mechanism, T, C, d, heads))
        LOGGER.info(f"bench {mechanism}: T={T}, median {wall / 1e6:.3f} ms, flops {point.flops}")
        points.append(point)
    if csv_path is not None:
        write_bench_csv(csv_path, points)
    return points


def write_bench_csv(path: Path | str, points: Sequence[BenchPoint]) -> None:
    with atomic_write(path, "w") as f:
        f.write(BENCH_HEADER + "\n")
        for point in points:
            f.write(point.csv_line() + "\n")


def read_bench_csv(path: Path | str) -> list[BenchPoint]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    try:
        return [
            BenchPoint(r["mechanism"], *(int(r[key]) for key in ("T", "C", "d", "heads", "median_ns", "flops")))
            for r in rows
        ]
    except (KeyError, ValueError) as err:
        raise DataFormatError(f"malformed bench file {path}: {err}") from err


def fit_log_log(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Least-squares slope and r^2 of log y against log x."""
    log_x = np.log(np.asarray(xs, dtype=np.float64))
    log_y = np.log(np.asarray(ys, dtype=np.float64))
    if log_x.size < 2:
        raise ContractError("need at least two points to fit a slope")
    if np.ptp(log_y) == 0.0:
        return 0.0, 1.0
    fit = stats.linregress(log_x, log_y)
    return float(fit.slope), float(fit.rvalue**2)


def fit_scaling_exponent(points: Sequence[BenchPoint]) -> tuple[float, float]:
    return fit_log_log([p.T for p in points], [p.wall_ns for p in points])
