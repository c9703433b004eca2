"""Sample-quality statistics: unbiased RBF-kernel MMD^2 and first/second moment errors."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import ContractError, ShapeError
from .fileio import atomic_write

EVAL_HEADER = "mmd,mean_error,cov_error,num_samples,seed"


def _flatten(samples: np.ndarray) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeError(f"samples need a leading sample axis, got shape {x.shape}")
    return x.reshape(x.shape[0], -1)


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    """Median pairwise Euclidean distance over the pooled set; 1.0 when all points coincide."""
    distances = pdist(np.concatenate([_flatten(x), _flatten(y)]))
    median = float(np.median(distances)) if distances.size else 0.0
    return median if median > 0 else 1.0


def rbf_kernel(x: np.ndarray, y: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-cdist(_flatten(x), _flatten(y), "sqeuclidean") / (2.0 * bandwidth**2))


def mmd2_unbiased(x: np.ndarray, y: np.ndarray, bandwidth: Optional[float] = None) -> float:
    """Unbiased MMD^2 estimate; may be slightly negative when the two sets share a distribution."""
    x, y = _flatten(x), _flatten(y)
    n, m = x.shape[0], y.shape[0]
    if n < 2 or m < 2:
        raise ContractError(f"unbiased MMD needs at least two samples per set, got {n} and {m}")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"sample widths differ: {x.shape[1]} vs {y.shape[1]}")
    bw = bandwidth if bandwidth is not None else median_bandwidth(x, y)
    k_xx = rbf_kernel(x, x, bw)
    k_yy = rbf_kernel(y, y, bw)
    k_xy = rbf_kernel(x, y, bw)
    term_xx = (k_xx.sum() - np.trace(k_xx)) / (n * (n - 1))
    term_yy = (k_yy.sum() - np.trace(k_yy)) / (m * (m - 1))
    return float(term_xx + term_yy - 2.0 * k_xy.mean())


def mmd2_standard_error(x: np.ndarray, y: np.ndarray, bandwidth: Optional[float] = None) -> float:
    """Leading-order standard error of the paired statistic; needs equal set sizes."""
    x, y = _flatten(x), _flatten(y)
    n = x.shape[0]
    if y.shape[0] != n or n < 2:
        raise ContractError("standard error needs two sets of equal size >= 2")
    bw = bandwidth if bandwidth is not None else median_bandwidth(x, y)
    k_xy = rbf_kernel(x, y, bw)
    h = rbf_kernel(x, x, bw) + rbf_kernel(y, y, bw) - k_xy - k_xy.T
    np.fill_diagonal(h, 0.0)
    row_means = h.sum(axis=1) / (n - 1)
    return float(np.sqrt(4.0 * np.var(row_means) / n))


def mean_error(samples: np.ndarray, reference: np.ndarray) -> float:
    return float(np.linalg.norm(_flatten(samples).mean(axis=0) - _flatten(reference).mean(axis=0)))


def cov_error(samples: np.ndarray, reference: np.ndarray) -> float:
    """Frobenius norm of the covariance difference."""
    diff = np.cov(_flatten(samples), rowvar=False) - np.cov(_flatten(reference), rowvar=False)
    return float(np.linalg.norm(np.atleast_2d(diff)))


@dataclass(frozen=True)
class EvalReport:
    mmd: float
    mean_error: float
    cov_error: float
    num_samples: int
    seed: int

    def csv_line(self) -> str:
        return f"{self.mmd!r},{self.mean_error!r},{self.cov_error!r},{self.num_samples},{self.seed}"


def evaluate(samples: np.ndarray, reference: np.ndarray, seed: int = 0) -> EvalReport:
    return EvalReport(
        mmd=mmd2_unbiased(samples, reference),
        mean_error=mean_error(samples, reference),
        cov_error=cov_error(samples, reference),
        num_samples=int(np.asarray(samples).shape[0]),
        seed=seed,
    )


def write_eval_csv(path: Path | str, reports: Sequence[EvalReport]) -> None:
    with atomic_write(path, "w") as f:
        f.write(EVAL_HEADER + "\n")
        for report in reports:
            f.write(report.csv_line() + "\n")
