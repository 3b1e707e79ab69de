"""Time algebra: SNR schedule, per-frame local times and frame partitions.

Global diffusion time ``t`` runs from 1 (pure noise) to 0 (data). Every frame
``w`` of a window of ``W`` frames is assigned its own local time ``t_w`` in
[0, 1]; the SNR schedule is then evaluated at ``t_w``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, NamedTuple, Protocol

import numpy as np

from .errors import ConfigError, InvalidIntervalError

__all__ = [
    "CosineSchedule",
    "FramePartition",
    "GlobalRollingMap",
    "NoiseLevel",
    "ScheduleKind",
    "ScheduleSpec",
    "clip01",
    "local_time",
    "noise_level",
    "partition_frames",
]


class NoiseLevel(NamedTuple):
    alpha: np.ndarray
    sigma: np.ndarray
    logsnr: np.ndarray


class SnrSchedule(Protocol):
    t_min: float

    def noise_level(self, t) -> NoiseLevel: ...

    def neg_dlogsnr_dt(self, t) -> np.ndarray: ...


@dataclass(frozen=True)
class CosineSchedule:
    """Variance-preserving cosine schedule ``alpha = cos(pi t / 2)``.

    Times are clamped to ``[t_min, 1 - t_min]`` so that log-SNR stays finite
    at both ends.
    """

    t_min: float = 1e-4

    def __post_init__(self):
        if not 0.0 < self.t_min < 0.5:
            raise ConfigError(f"t_min must lie in (0, 0.5), got {self.t_min}")

    @property
    def t_max(self) -> float:
        return 1.0 - self.t_min

    def clamp(self, t) -> np.ndarray:
        return np.clip(np.asarray(t, dtype=np.float64), self.t_min, self.t_max)

    def noise_level(self, t) -> NoiseLevel:
        tc = self.clamp(t)
        half_pi_t = 0.5 * np.pi * tc
        alpha = np.cos(half_pi_t)
        sigma = np.sin(half_pi_t)
        logsnr = 2.0 * (np.log(alpha) - np.log(sigma))
        return NoiseLevel(alpha, sigma, logsnr)

    def neg_dlogsnr_dt(self, t) -> np.ndarray:
        # lambda = 2 log cot(pi t / 2)  =>  -dlambda/dt = 2 pi / sin(pi t)
        tc = self.clamp(t)
        return 2.0 * np.pi / np.sin(np.pi * tc)


COSINE = CosineSchedule()


def noise_level(t, schedule: SnrSchedule = COSINE) -> NoiseLevel:
    """Return ``(alpha, sigma, log SNR)`` at local time(s) ``t``."""
    return schedule.noise_level(t)


def clip01(x):
    return np.minimum(1.0, np.maximum(0.0, x))


class ScheduleKind(str, enum.Enum):
    LIN = "lin"
    INIT = "init"
    INIT_RESCALED = "init_rescaled"
    # Standard (non-rolling) diffusion: every generated frame shares ``t``.
    CONST = "const"


@dataclass(frozen=True)
class ScheduleSpec:
    """A local-time map for a window of ``W`` frames with ``n_cln`` clean frames.

    ``warp`` is the monotone map ``g`` applied to the linear rolling time; it
    defaults to the identity and only affects ``LIN``.
    """

    kind: ScheduleKind
    W: int
    n_cln: int = 0
    warp: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if int(self.W) != self.W or self.W < 1:
            raise ConfigError(f"W must be a positive integer, got {self.W}")
        if not 0 <= self.n_cln < self.W:
            raise ConfigError(f"n_cln must satisfy 0 <= n_cln < W, got n_cln={self.n_cln}, W={self.W}")
        if self.kind is ScheduleKind.INIT_RESCALED and self.n_cln != 0:
            raise ConfigError("init_rescaled is only defined for n_cln = 0")

    @property
    def n_gen(self) -> int:
        return self.W - self.n_cln

    def local_times(self, t) -> np.ndarray:
        """Local times for all frames; ``t`` of shape ``(...)`` gives ``(..., W)``."""
        t = np.asarray(t, dtype=np.float64)[..., None]
        w = np.arange(self.W, dtype=np.float64)
        n = float(self.n_cln)
        m = float(self.n_gen)
        cond = w < self.n_cln
        if self.kind is ScheduleKind.LIN:
            out = clip01((w + t - n) / m)
            if self.warp is not None:
                out = clip01(self.warp(out))
        elif self.kind is ScheduleKind.INIT:
            out = np.where(cond, 0.0, clip01((w - n) / m + t))
        elif self.kind is ScheduleKind.INIT_RESCALED:
            # integer numerator keeps t = 0 and t = 1 exact; the running max
            # guards monotonicity in w against rounding when t is near 1
            out = np.maximum.accumulate(clip01((w + t * (self.W - w)) / self.W), axis=-1)
        else:
            out = np.where(cond, 0.0, clip01(t))
        return np.broadcast_to(out, t.shape[:-1] + (self.W,)).copy()

    def dlocal_dt(self, t) -> np.ndarray:
        """Derivative of each local time w.r.t. global time; zero where clipped."""
        t = np.asarray(t, dtype=np.float64)[..., None]
        w = np.arange(self.W, dtype=np.float64)
        n = float(self.n_cln)
        m = float(self.n_gen)
        cond = w < self.n_cln
        if self.kind is ScheduleKind.LIN:
            arg = (w + t - n) / m
            inside = (arg > 0.0) & (arg < 1.0)
            out = np.where(inside, 1.0 / m, 0.0)
            if self.warp is not None:
                h = 1e-6
                lo, hi = np.clip(arg - h, 0, 1), np.clip(arg + h, 0, 1)
                span = np.where(hi > lo, hi - lo, 1.0)
                out = np.where(inside, (self.warp(hi) - self.warp(lo)) / span / m, 0.0)
        elif self.kind is ScheduleKind.INIT:
            arg = (w - n) / m + t
            out = np.where(~cond & (arg > 0.0) & (arg < 1.0), 1.0, 0.0)
        elif self.kind is ScheduleKind.INIT_RESCALED:
            out = 1.0 - w / self.W + 0.0 * t
        else:
            out = np.where(cond | (t <= 0.0) | (t >= 1.0), 0.0, 1.0)
        return np.broadcast_to(out, t.shape[:-1] + (self.W,)).copy()

    def rolling_state(self) -> np.ndarray:
        """Local times of the shift-invariant window state (``LIN`` at ``t = 0``)."""
        return ScheduleSpec(ScheduleKind.LIN, self.W, self.n_cln).local_times(0.0)


@dataclass(frozen=True)
class GlobalRollingMap:
    """Rolling map over a whole sequence of ``K`` frames with window width ``W``.

    ``t_k = clip((k - K + (K + W) t) / W)``: all frames are clean at ``t = 0``,
    all are pure noise at ``t = 1``, and a band of ``W`` frames is partially
    noised in between.
    """

    K: int
    W: int

    def local_times(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)[..., None]
        k = np.arange(self.K, dtype=np.float64)
        return clip01((k - self.K + (self.K + self.W) * t) / self.W)


def local_time(spec: ScheduleSpec, w: int, t: float) -> float:
    if not 0 <= w < spec.W:
        raise IndexError(f"frame index {w} out of range for W={spec.W}")
    return float(spec.local_times(t)[w])


@dataclass(frozen=True)
class FramePartition:
    clean: tuple[int, ...]
    noise: tuple[int, ...]
    win: tuple[int, ...]


def partition_frames(spec, s: float, t: float) -> FramePartition:
    """Split frames into clean / noise / win sets for a step from ``t`` to ``s``.

    ``spec`` is anything with a ``local_times(t)`` method.
    """
    if not 0.0 <= s < t <= 1.0:
        raise InvalidIntervalError(f"need 0 <= s < t <= 1, got s={s}, t={t}")
    sw = spec.local_times(s)
    tw = spec.local_times(t)
    clean = (sw == 0.0) & (tw == 0.0)
    noise = (sw == 1.0) & (tw == 1.0)
    win = (sw >= 0.0) & (sw < 1.0) & (tw > sw) & (tw <= 1.0)
    return FramePartition(
        tuple(np.flatnonzero(clean).tolist()),
        tuple(np.flatnonzero(noise).tolist()),
        tuple(np.flatnonzero(win).tolist()),
    )
