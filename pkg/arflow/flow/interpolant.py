"""
Linear stochastic interpolant between data (t = 0) and Gaussian noise (t = 1).

    z_t = alpha_t * z_star + sigma_t * eps,   alpha_t = 1 - t,   sigma_t = t
    v   = d_alpha * z_star + d_sigma * eps = eps - z_star

The target velocity does not depend on t, so the exact flow from a noise draw to its data point is a straight line.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union, overload

import numpy as np

from .errors import ContractError, ShapeError, SingularityError
from .numcore import Tensor, square_error_mean


@dataclass(frozen=True)
class FlowTime:
    t: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.t <= 1.0:
            raise ContractError(f"flow time must lie in [0, 1], got {self.t}")

    @property
    def alpha(self) -> float:
        return 1.0 - self.t

    @property
    def sigma(self) -> float:
        return self.t

    @property
    def d_alpha(self) -> float:
        return -1.0

    @property
    def d_sigma(self) -> float:
        return 1.0


TimeLike = Union[FlowTime, float]


def as_flow_time(t: TimeLike) -> FlowTime:
    return t if isinstance(t, FlowTime) else FlowTime(float(t))


@dataclass(frozen=True)
class InterpolantSample:
    """ """

    z_star: np.ndarray
    eps: np.ndarray
    t: FlowTime
    z_t: np.ndarray
    v_target: np.ndarray


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def corrupt(z_star: np.ndarray, eps: np.ndarray, t: TimeLike) -> InterpolantSample:
    ft = as_flow_time(t)
    z_star = np.asarray(z_star)
    eps = np.asarray(eps)
    _check_same_shape(z_star, eps, "corrupt")
    z_t = ft.alpha * z_star + ft.sigma * eps
    v_target = ft.d_alpha * z_star + ft.d_sigma * eps
    return InterpolantSample(z_star=z_star, eps=eps, t=ft, z_t=z_t, v_target=v_target)


@overload
def velocity_loss_term(v_pred: Tensor, sample: InterpolantSample | np.ndarray) -> Tensor:
    ...


@overload
def velocity_loss_term(v_pred: np.ndarray, sample: InterpolantSample | np.ndarray) -> float:
    ...


def velocity_loss_term(v_pred: Tensor | np.ndarray, sample: InterpolantSample | np.ndarray) -> Tensor | float:
    """Mean squared velocity error. A Tensor prediction yields a differentiable scalar Tensor."""
    target = sample.v_target if isinstance(sample, InterpolantSample) else np.asarray(sample)
    if v_pred.shape != target.shape:
        raise ShapeError(f"velocity prediction shape {v_pred.shape} does not match target {target.shape}")
    if isinstance(v_pred, Tensor):
        return square_error_mean(v_pred, target)
    diff = np.asarray(v_pred, dtype=np.float64) - target
    return float(np.mean(diff * diff))


def denoiser_from_velocity(z_t: np.ndarray, v: np.ndarray, t: TimeLike) -> np.ndarray:
    """Clean-latent estimate z_t - t * v."""
    ft = as_flow_time(t)
    _check_same_shape(np.asarray(z_t), np.asarray(v), "denoiser_from_velocity")
    return z_t - ft.t * v


def noise_from_velocity(z_t: np.ndarray, v: np.ndarray, t: TimeLike) -> np.ndarray:
    """Noise estimate z_t + (1 - t) * v."""
    ft = as_flow_time(t)
    _check_same_shape(np.asarray(z_t), np.asarray(v), "noise_from_velocity")
    return z_t + (1.0 - ft.t) * v


def score_from_velocity(z_t: np.ndarray, v: np.ndarray, t: TimeLike) -> np.ndarray:
    """Score of the marginal at time t, -eps_hat / t. Undefined at t = 0."""
    ft = as_flow_time(t)
    if ft.t <= 0.0:
        raise SingularityError("score is undefined at t = 0")
    return -noise_from_velocity(z_t, v, ft) / ft.t
