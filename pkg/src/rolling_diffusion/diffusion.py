"""Forward noising, Gaussian posterior, parameterizations and the rolling loss."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InvalidIntervalError, SingularityError
from .schedules import COSINE, NoiseLevel, ScheduleKind, ScheduleSpec, SnrSchedule

__all__ = [
    "LossWeighting",
    "PredictionKind",
    "WindowState",
    "choose_schedule",
    "convert_prediction",
    "draw_lin_mask",
    "forward_sample",
    "loss_weights",
    "posterior_params",
    "rolling_loss",
    "window_loss",
]


class PredictionKind(str, enum.Enum):
    X = "x"
    EPS = "eps"
    V = "v"


class LossWeighting(str, enum.Enum):
    EPS_MSE = "eps_mse"
    X_MSE = "x_mse"
    KL_EXACT = "kl_exact"


@dataclass
class WindowState:
    """Latents ``z`` of shape ``(..., W, D)`` and their local times ``(..., W)``."""

    z: np.ndarray
    local_times: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.local_times = np.asarray(self.local_times, dtype=np.float64)
        if self.z.ndim < 2:
            raise ConfigError(f"z must have shape (..., W, D), got {self.z.shape}")
        if self.local_times.shape[-1] != self.z.shape[-2]:
            raise ConfigError(
                f"{self.local_times.shape[-1]} local times for a window of {self.z.shape[-2]} frames"
            )
        if np.any(np.diff(self.local_times, axis=-1) < 0):
            raise ConfigError("local times must be nondecreasing across the window")

    @property
    def W(self) -> int:
        return self.z.shape[-2]

    def copy(self) -> "WindowState":
        return WindowState(self.z.copy(), self.local_times.copy())


def _frame_level(level: NoiseLevel):
    return level.alpha[..., None], level.sigma[..., None]


def forward_sample(x, local_times, eps, schedule: SnrSchedule = COSINE) -> WindowState:
    """Noise every frame ``w`` at its own level: ``z^w = alpha(t_w) x^w + sigma(t_w) eps^w``."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    local_times = np.asarray(local_times, dtype=np.float64)
    if x.shape != eps.shape:
        raise ConfigError(f"x {x.shape} and eps {eps.shape} differ in shape")
    if x.ndim < 2 or local_times.shape != x.shape[:-1]:
        raise ConfigError(f"local times {local_times.shape} do not match frames {x.shape[:-1]}")
    if np.any((local_times < 0.0) | (local_times > 1.0)):
        raise ConfigError("local times must lie in [0, 1]")
    a, s = _frame_level(schedule.noise_level(local_times))
    return WindowState(a * x + s * eps, local_times)


def posterior_params(z, x_hat, t_k, s_k, schedule: SnrSchedule = COSINE):
    """Mean and variance of ``q(z_s | z_t, x = x_hat)`` for a variance-preserving process.

    ``t_k`` and ``s_k`` broadcast against ``z.shape[:-1]``. Returns ``(mean, var)``
    where ``var`` has the shape of the broadcast times.
    """
    z = np.asarray(z, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    t_k = np.asarray(t_k, dtype=np.float64)
    s_k = np.asarray(s_k, dtype=np.float64)
    if np.any(s_k >= t_k):
        raise InvalidIntervalError("posterior requires s < t for every frame")
    lt = schedule.noise_level(t_k)
    ls = schedule.noise_level(s_k)
    # r = SNR(t) / SNR(s) in (0, 1]; expm1 keeps 1 - r accurate as s -> t
    dlog = lt.logsnr - ls.logsnr
    r = np.exp(dlog)
    one_minus_r = -np.expm1(dlog)
    coef_z = (r * ls.alpha / lt.alpha)[..., None]
    coef_x = (one_minus_r * ls.alpha)[..., None]
    mean = coef_z * z + coef_x * x_hat
    var = ls.sigma**2 * one_minus_r
    return mean, var


def _nonzero(c, name: str):
    if np.any(np.asarray(c) == 0.0):
        raise SingularityError(f"conversion divides by {name} = 0")
    return c


def convert_prediction(kind_in, kind_out, value, z, level: NoiseLevel):
    """Convert between x, eps and v parameterizations at fixed ``(alpha, sigma)``.

    ``level.alpha`` and ``level.sigma`` must broadcast against ``value``.
    """
    kind_in, kind_out = PredictionKind(kind_in), PredictionKind(kind_out)
    value = np.asarray(value, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(level.alpha, dtype=np.float64)
    s = np.asarray(level.sigma, dtype=np.float64)
    if kind_in is kind_out:
        return value.copy()
    if kind_in is PredictionKind.X:
        if kind_out is PredictionKind.EPS:
            return (z - a * value) / _nonzero(s, "sigma")
        return (a * z - value) / _nonzero(s, "sigma")
    if kind_in is PredictionKind.EPS:
        if kind_out is PredictionKind.X:
            return (z - s * value) / _nonzero(a, "alpha")
        return (value - s * z) / _nonzero(a, "alpha")
    if kind_out is PredictionKind.X:
        return a * z - s * value
    return s * z + a * value


def _dx_dout(kind: PredictionKind, a, s):
    """Derivative of the x-estimate w.r.t. the raw network output (elementwise)."""
    if kind is PredictionKind.X:
        return np.ones_like(a)
    if kind is PredictionKind.EPS:
        return -s / a
    return -s


def loss_weights(weighting, local_times, dtw_dt, schedule: SnrSchedule = COSINE) -> np.ndarray:
    """Per-frame weight ``a(t_w)`` applied to squared x-space errors."""
    weighting = LossWeighting(weighting)
    local_times = np.asarray(local_times, dtype=np.float64)
    if weighting is LossWeighting.X_MSE:
        return np.ones_like(local_times)
    snr = np.exp(schedule.noise_level(local_times).logsnr)
    if weighting is LossWeighting.EPS_MSE:
        return snr
    # eps-space KL weight -dlambda/dt_w * dt_w/dt, moved to x-space by SNR
    return snr * schedule.neg_dlogsnr_dt(local_times) * np.asarray(dtw_dt, dtype=np.float64)


def window_loss(model, x, local_times, eps, weights, schedule: SnrSchedule = COSINE,
                with_grad: bool = False, use_ema: bool = False):
    """Weighted x-space loss for a batch of windows at given local times.

    Arrays are ``x, eps: (B, W, D)``, ``local_times, weights: (B, W)``. The loss
    is summed over frames and values and averaged over the batch. Returns
    ``(loss, per_frame)`` or ``(loss, per_frame, grad)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ConfigError(f"expected a batch of windows (B, W, D), got {x.shape}")
    state = forward_sample(x, local_times, eps, schedule)
    level = schedule.noise_level(state.local_times)
    a, s = _frame_level(level)
    out = model.forward(state.z, state.local_times, use_ema=use_ema)
    kind = PredictionKind(model.prediction)
    x_hat = convert_prediction(kind, PredictionKind.X, out, state.z, NoiseLevel(a, s, level.logsnr[..., None]))
    resid = x - x_hat
    weights = np.asarray(weights, dtype=np.float64)
    per = weights * np.sum(resid**2, axis=-1)
    B = x.shape[0]
    loss = float(per.sum() / B)
    per_frame = per.mean(axis=0)
    if not with_grad:
        return loss, per_frame
    g_xhat = -2.0 * weights[..., None] * resid / B
    g_out = g_xhat * _dx_dout(kind, a, s)
    grad = model.backward(state.z, state.local_times, g_out)
    return loss, per_frame, grad


def rolling_loss(model, x, t, eps, spec: ScheduleSpec, weighting=LossWeighting.EPS_MSE,
                 schedule: SnrSchedule = COSINE, with_grad: bool = False):
    """Rolling training loss at global time(s) ``t`` under the local-time map ``spec``.

    ``x`` and ``eps`` may be a single window ``(W, D)`` or a batch ``(B, W, D)``
    with ``t`` of shape ``(B,)``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
        eps = np.asarray(eps, dtype=np.float64)[None]
    if x.shape[-2] != spec.W:
        raise ConfigError(f"window has {x.shape[-2]} frames, schedule expects {spec.W}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), x.shape[:1])
    lt = spec.local_times(t)
    weights = loss_weights(weighting, lt, spec.dlocal_dt(t), schedule)
    return window_loss(model, x, lt, eps, weights, schedule, with_grad=with_grad)


def _check_beta(beta: float):
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"Bernoulli rate beta must lie in [0, 1], got {beta}")


def draw_lin_mask(beta: float, rng: np.random.Generator, size) -> np.ndarray:
    """Boolean draws ``y ~ B(beta)``; ``True`` selects the linear rolling schedule."""
    _check_beta(beta)
    return rng.random(size) < beta


def choose_schedule(beta: float, rng: np.random.Generator,
                    boundary_kind=ScheduleKind.INIT) -> ScheduleKind:
    """Pick the rolling schedule with probability ``beta``, else the boundary one."""
    return ScheduleKind.LIN if draw_lin_mask(beta, rng, None) else ScheduleKind(boundary_kind)
