"""Samplers: ancestral steps, boundary initialization, rolling and block rollouts.

All samplers take a *denoiser*: any object with
``predict_x(z, local_times) -> x_hat`` over batches ``(B, W, D)``. Both the
trained network and the closed-form AR(1) oracle qualify. Model evaluations
are counted by wrapping the denoiser in :class:`EvalCounter`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import WindowState, posterior_params
from .errors import ConfigError, ContractError, InvalidIntervalError
from .schedules import COSINE, ScheduleKind, ScheduleSpec, SnrSchedule, partition_frames

__all__ = [
    "EvalCounter",
    "SampleTrace",
    "SamplerConfig",
    "ancestral_step",
    "boundary_sample",
    "generate_rolling",
    "rollout",
    "standard_block_rollout",
]


@dataclass(frozen=True)
class SamplerConfig:
    """Sampling budget and window geometry.

    ``evals_per_frame`` is the number of model calls spent per emitted frame.
    Rolling sampling takes that many denoising steps per one-frame shift; the
    block baseline spends ``evals_per_frame * (W - n_cln)`` steps per block.
    Either way each frame is denoised over ``evals_per_frame * (W - n_cln)``
    steps in total. ``boundary_steps`` defaults to the same figure.
    """

    W: int
    n_cln: int = 0
    evals_per_frame: int = 8
    boundary_steps: int | None = None
    boundary_kind: ScheduleKind = ScheduleKind.INIT
    seed: int = 0
    use_ema: bool = True

    def __post_init__(self):
        object.__setattr__(self, "boundary_kind", ScheduleKind(self.boundary_kind))
        if not 0 <= self.n_cln < self.W:
            raise ConfigError(f"need 0 <= n_cln < W, got n_cln={self.n_cln}, W={self.W}")
        if self.evals_per_frame < 1:
            raise ConfigError("evals_per_frame must be at least 1")
        if self.boundary_kind not in (ScheduleKind.INIT, ScheduleKind.INIT_RESCALED):
            raise ConfigError(f"boundary schedule must be init or init_rescaled, got {self.boundary_kind.value}")
        if self.boundary_steps is not None and self.boundary_steps < 1:
            raise ConfigError("boundary_steps must be at least 1")

    @property
    def T(self) -> int:
        """Denoising steps per one-frame shift of the rolling window."""
        return self.evals_per_frame

    @property
    def block_steps(self) -> int:
        return self.evals_per_frame * (self.W - self.n_cln)

    @property
    def T_boundary(self) -> int:
        return self.boundary_steps if self.boundary_steps is not None else self.block_steps


@dataclass
class SampleTrace:
    """Emitted frames of a batch of rollouts.

    ``context`` holds the clean conditioning frames the rollout started from,
    ``frames`` the generated frames ``(B, N, D)`` in emission order, and
    ``emission_steps[i]`` the cumulative model-call count when frame ``i`` was
    emitted. ``model_eval_count`` counts calls made during rollout;
    ``boundary_eval_count`` those spent initializing the window.
    """

    context: np.ndarray
    frames: np.ndarray
    emission_steps: list[int] = field(default_factory=list)
    model_eval_count: int = 0
    boundary_eval_count: int = 0

    @property
    def num_frames(self) -> int:
        return self.frames.shape[1]

    @property
    def total_eval_count(self) -> int:
        return self.model_eval_count + self.boundary_eval_count


class EvalCounter:
    """Wraps a denoiser and counts ``predict_x`` calls."""

    def __init__(self, denoiser, **predict_kwargs):
        self.denoiser = denoiser
        self.kwargs = predict_kwargs
        self.count = 0

    def predict_x(self, z, local_times):
        self.count += 1
        return self.denoiser.predict_x(z, local_times, **self.kwargs)


def _counter(denoiser, use_ema: bool) -> EvalCounter:
    if isinstance(denoiser, EvalCounter):
        return denoiser
    return EvalCounter(denoiser, use_ema=use_ema)


def ancestral_step(denoiser, state: WindowState, spec: ScheduleSpec, t: float, s: float,
                   rng: np.random.Generator, schedule: SnrSchedule = COSINE) -> WindowState:
    """One generative step from global time ``t`` to ``s`` for a batch of windows.

    Clean frames are copied, pure-noise frames are redrawn from N(0, I) and
    window frames are sampled from the Gaussian posterior with ``x`` replaced by
    one denoiser prediction. The denoiser is not called when no frame is in the
    window.
    """
    if not 0.0 <= s < t <= 1.0:
        raise InvalidIntervalError(f"need 0 <= s < t <= 1, got s={s}, t={t}")
    z = state.z if state.z.ndim == 3 else state.z[None]
    if z.shape[1] != spec.W:
        raise ConfigError(f"window of {z.shape[1]} frames does not match W={spec.W}")
    tw = spec.local_times(t)
    sw = spec.local_times(s)
    part = partition_frames(spec, s, t)
    out = z.copy()
    if part.noise:
        noise = list(part.noise)
        out[:, noise] = rng.standard_normal((z.shape[0], len(noise), z.shape[2]))
    if part.win:
        win = list(part.win)
        x_hat = denoiser.predict_x(z, np.broadcast_to(tw, z.shape[:2]).copy())
        mean, var = posterior_params(z[:, win], x_hat[:, win], tw[win], sw[win], schedule)
        out[:, win] = mean + np.sqrt(var)[:, None] * rng.standard_normal(mean.shape)
    lt = np.broadcast_to(sw, z.shape[:2]).copy()
    if state.z.ndim == 2:
        return WindowState(out[0], sw.copy())
    return WindowState(out, lt)


def _run_schedule(denoiser, state: WindowState, spec: ScheduleSpec, T: int,
                  rng: np.random.Generator, schedule: SnrSchedule) -> WindowState:
    # t = i / T, integer i, keeps local times exact at the grid endpoints
    for i in range(T, 0, -1):
        state = ancestral_step(denoiser, state, spec, i / T, (i - 1) / T, rng, schedule)
    return state


def _as_batch(conditioning, n_cln: int, D: int | None = None) -> np.ndarray:
    c = np.asarray(conditioning, dtype=np.float64)
    if c.ndim == 2:
        c = c[None]
    if c.ndim != 3 or c.shape[1] != n_cln:
        raise ConfigError(f"conditioning must be (B, n_cln={n_cln}, D), got {c.shape}")
    return c


def boundary_sample(denoiser, conditioning, config: SamplerConfig, rng: np.random.Generator,
                    D: int | None = None, schedule: SnrSchedule = COSINE) -> WindowState:
    """Denoise from pure noise to the rolling state with the boundary schedule.

    ``conditioning`` is ``(B, n_cln, D)``; when ``n_cln = 0`` pass an array of
    shape ``(B, 0, D)``. Conditioning frames stay fixed throughout. The result
    has local times ``LIN`` at ``t = 0``, i.e. ``(0/W, 1/W, ..., (W-1)/W)`` when
    ``n_cln = 0``.
    """
    cond = _as_batch(conditioning, config.n_cln)
    B, _, D = cond.shape
    spec = ScheduleSpec(config.boundary_kind, config.W, config.n_cln)
    noise = rng.standard_normal((B, config.W - config.n_cln, D))
    state = WindowState(np.concatenate([cond, noise], axis=1),
                        np.broadcast_to(spec.local_times(1.0), (B, config.W)).copy())
    state = _run_schedule(_counter(denoiser, config.use_ema), state, spec, config.T_boundary, rng, schedule)
    rolling = spec.rolling_state()
    return WindowState(state.z, np.broadcast_to(rolling, (B, config.W)).copy())


def rollout(denoiser, init: WindowState, config: SamplerConfig, num_frames: int,
            rng: np.random.Generator, schedule: SnrSchedule = COSINE) -> SampleTrace:
    """Roll the window forward, emitting one clean frame per shift.

    Each iteration drops the oldest frame, appends a fresh N(0, I) frame, runs
    ``T`` denoising steps under the linear rolling schedule from ``t = 1`` to
    ``t = 0`` and emits the frame at index ``n_cln``, which has just reached
    local time 0. Exactly ``T * num_frames`` model calls are made.
    """
    spec = ScheduleSpec(ScheduleKind.LIN, config.W, config.n_cln)
    z = init.z if init.z.ndim == 3 else init.z[None]
    lt = np.broadcast_to(init.local_times, z.shape[:2])
    if z.shape[1] != config.W or not np.allclose(lt, spec.rolling_state(), rtol=0, atol=1e-12):
        raise ContractError("rollout must start from a window in the rolling state")
    if num_frames < 0:
        raise ConfigError("num_frames must be non-negative")
    counter = _counter(denoiser, config.use_ema)
    start = counter.count
    B, W, D = z.shape
    frames = np.empty((B, num_frames, D))
    steps = []
    state = WindowState(z.copy(), np.broadcast_to(spec.rolling_state(), (B, W)).copy())
    for k in range(num_frames):
        shifted = np.concatenate([state.z[:, 1:], rng.standard_normal((B, 1, D))], axis=1)
        state = WindowState(shifted, np.broadcast_to(spec.local_times(1.0), (B, W)).copy())
        state = _run_schedule(counter, state, spec, config.T, rng, schedule)
        frames[:, k] = state.z[:, config.n_cln]
        steps.append(counter.count - start)
    return SampleTrace(context=z[:, :config.n_cln].copy(), frames=frames, emission_steps=steps,
                       model_eval_count=counter.count - start)


def generate_rolling(denoiser, conditioning, config: SamplerConfig, num_frames: int,
                     rng: np.random.Generator, schedule: SnrSchedule = COSINE) -> SampleTrace:
    """Boundary initialization followed by a rollout; ``num_frames`` generated frames.

    The first generated frame is the one the boundary pass already brought to
    local time 0; the remaining ``num_frames - 1`` come from :func:`rollout`.
    """
    cond = _as_batch(conditioning, config.n_cln)
    counter = _counter(denoiser, config.use_ema)
    if num_frames == 0:
        return SampleTrace(context=cond.copy(), frames=np.empty((cond.shape[0], 0, cond.shape[2])))
    init = boundary_sample(counter, cond, config, rng, schedule=schedule)
    boundary_evals = counter.count
    trace = rollout(counter, init, config, num_frames - 1, rng, schedule)
    first = init.z[:, config.n_cln:config.n_cln + 1]
    return SampleTrace(
        context=cond.copy(),
        frames=np.concatenate([first, trace.frames], axis=1),
        emission_steps=[0] + trace.emission_steps,
        model_eval_count=trace.model_eval_count,
        boundary_eval_count=boundary_evals,
    )


def standard_block_rollout(denoiser, conditioning, config: SamplerConfig, num_frames: int,
                           rng: np.random.Generator, schedule: SnrSchedule = COSINE) -> SampleTrace:
    """Block-autoregressive baseline: generate ``W - n_cln`` frames jointly per block.

    Every generated frame in a block shares one diffusion time, denoised over
    ``config.block_steps`` steps; the last ``n_cln`` frames of the window then
    become the conditioning for the next block.
    """
    cond = _as_batch(conditioning, config.n_cln)
    if num_frames < 0:
        raise ConfigError("num_frames must be non-negative")
    B, n, D = cond.shape
    spec = ScheduleSpec(ScheduleKind.CONST, config.W, config.n_cln)
    counter = _counter(denoiser, config.use_ema)
    start = counter.count
    frames = np.empty((B, 0, D))
    steps = []
    ctx = cond
    block = config.W - config.n_cln
    while frames.shape[1] < num_frames:
        state = WindowState(np.concatenate([ctx, rng.standard_normal((B, block, D))], axis=1),
                            np.broadcast_to(spec.local_times(1.0), (B, config.W)).copy())
        state = _run_schedule(counter, state, spec, config.block_steps, rng, schedule)
        take = min(block, num_frames - frames.shape[1])
        frames = np.concatenate([frames, state.z[:, n:n + take]], axis=1)
        steps += [counter.count - start] * take
        ctx = state.z[:, config.W - n:]
    return SampleTrace(context=cond.copy(), frames=frames, emission_steps=steps,
                       model_eval_count=counter.count - start)
