"""Training loop: windowed data, schedule mixing, loss, Adam, EMA, checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import SequenceDataset, WindowSampler
from .diffusion import LossWeighting, draw_lin_mask, loss_weights, window_loss
from .errors import ConfigError, NumericalError
from .net import Adam, DenoiserModel, ema_update, load_checkpoint, save_checkpoint
from .schedules import COSINE, ScheduleKind, ScheduleSpec

__all__ = ["TrainConfig", "TrainResult", "draw_training_times", "train"]

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "loss", "loss_per_frame_mean", "schedule_kind_fraction", "wallclock"]


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run.

    ``mode="rolling"`` mixes the linear rolling schedule (probability ``beta``)
    with ``boundary_kind``; ``mode="standard"`` trains the block baseline where
    all generated frames share the global time.
    """

    W: int = 8
    n_cln: int = 2
    beta: float = 0.9
    mode: str = "rolling"
    boundary_kind: str = "init"
    batch_size: int = 64
    steps: int = 20000
    lr: float = 1e-4
    ema_decay: float = 0.999
    weighting: str = "eps_mse"
    window_stride: int = 1
    hidden: int = 256
    depth: int = 3
    emb_dim: int = 16
    prediction: str = "v"
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 100

    def __post_init__(self):
        if not 0 <= self.n_cln < self.W:
            raise ConfigError(f"need 0 <= n_cln < W, got n_cln={self.n_cln}, W={self.W}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.mode not in ("rolling", "standard"):
            raise ConfigError(f"mode must be 'rolling' or 'standard', got {self.mode!r}")
        if ScheduleKind(self.boundary_kind) not in (ScheduleKind.INIT, ScheduleKind.INIT_RESCALED):
            raise ConfigError(f"boundary_kind must be init or init_rescaled, got {self.boundary_kind!r}")
        LossWeighting(self.weighting)
        if self.batch_size < 1 or self.steps < 0 or self.log_every < 1 or self.checkpoint_every < 0:
            raise ConfigError("batch_size and log_every must be positive; steps and checkpoint_every non-negative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    def schedule_specs(self) -> tuple[ScheduleSpec, ScheduleSpec]:
        """``(primary, alternative)`` specs; ``beta`` picks the primary."""
        if self.mode == "standard":
            const = ScheduleSpec(ScheduleKind.CONST, self.W, self.n_cln)
            return const, const
        return (ScheduleSpec(ScheduleKind.LIN, self.W, self.n_cln),
                ScheduleSpec(self.boundary_kind, self.W, self.n_cln))


def draw_training_times(config: TrainConfig, rng: np.random.Generator, batch_size: int):
    """One global time per window, a schedule per window, then local times.

    Returns ``(local_times, dlocal_dt, lin_mask)`` with shapes ``(B, W)``,
    ``(B, W)`` and ``(B,)``.
    """
    t = rng.random(batch_size)
    primary, alternative = config.schedule_specs()
    if config.mode == "standard":
        lin = np.zeros(batch_size, dtype=bool)
    else:
        lin = draw_lin_mask(config.beta, rng, batch_size)
    sel = lin[:, None]
    lt = np.where(sel, primary.local_times(t), alternative.local_times(t))
    dt = np.where(sel, primary.dlocal_dt(t), alternative.dlocal_dt(t))
    return lt, dt, lin


@dataclass
class TrainResult:
    model: DenoiserModel
    optimizer: Adam
    rng: np.random.Generator
    log_rows: list = field(default_factory=list)
    lin_draws: int = 0
    total_draws: int = 0


def _build_model(config: TrainConfig, D: int) -> DenoiserModel:
    return DenoiserModel(config.W, D, hidden=config.hidden, depth=config.depth,
                         emb_dim=config.emb_dim, ema_decay=config.ema_decay,
                         prediction=config.prediction, seed=config.seed)


def train(config: TrainConfig, dataset: SequenceDataset, out_dir=None, resume_from=None,
          stop_at: int | None = None) -> TrainResult:
    """Run (or resume) training for ``config.steps`` optimizer steps.

    With ``out_dir`` set, writes ``metrics.csv``, periodic
    ``checkpoint_<step>.npz`` files and ``checkpoint_final.npz``. ``stop_at``
    ends the run early at that step (used to produce resumable checkpoints).
    On a non-finite loss the last good parameters are saved to
    ``checkpoint_abort.npz`` and :class:`NumericalError` is raised.
    """
    out = Path(out_dir) if out_dir is not None else None
    if resume_from is not None:
        model, optimizer, rng, meta = load_checkpoint(resume_from)
        if optimizer is None or rng is None:
            raise ConfigError(f"{resume_from} lacks optimizer or RNG state; cannot resume")
        if model.W != config.W or model.D != dataset.D:
            raise ConfigError("checkpoint shape does not match config/dataset")
        counts = meta["extra"].get("lin_draws", 0), meta["extra"].get("total_draws", 0)
    else:
        seeds = np.random.SeedSequence(config.seed).spawn(1)
        rng = np.random.default_rng(seeds[0])
        model = _build_model(config, dataset.D)
        optimizer = Adam(model.num_params, lr=config.lr)
        counts = 0, 0
    result = TrainResult(model, optimizer, rng, [], *counts)
    sampler = WindowSampler(dataset, config.W, config.window_stride, rng)
    end = config.steps if stop_at is None else min(stop_at, config.steps)

    writer = None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = out / "metrics.csv"
        new_file = resume_from is None or not metrics.exists()
        fh = open(metrics, "w" if new_file else "a", newline="")
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(METRICS_HEADER)

    def extra():
        return {"train_config": asdict(config), "lin_draws": result.lin_draws,
                "total_draws": result.total_draws}

    start_time = time.perf_counter()
    try:
        for step in range(optimizer.step, end):
            x = sampler.sample(config.batch_size)
            lt, dt, lin = draw_training_times(config, rng, config.batch_size)
            eps = rng.standard_normal(x.shape)
            weights = loss_weights(config.weighting, lt, dt, COSINE)
            loss, per_frame, grad = window_loss(model, x, lt, eps, weights, COSINE, with_grad=True)
            if not math.isfinite(loss) or not np.isfinite(grad.sum()):
                if out is not None:
                    save_checkpoint(out / "checkpoint_abort.npz", model, optimizer, rng, extra())
                raise NumericalError(f"non-finite loss {loss} at step {step}; last good state retained")
            optimizer.apply(model, grad)
            ema_update(model)
            result.lin_draws += int(lin.sum())
            result.total_draws += lin.size
            if step % config.log_every == 0:
                row = [step, loss, float(per_frame.mean()),
                       result.lin_draws / result.total_draws,
                       round(time.perf_counter() - start_time, 3)]
                result.log_rows.append(row)
                if writer is not None:
                    writer.writerow(row)
                log.info("step %d loss %.5g", step, loss)
            if out is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_{step + 1}.npz", model, optimizer, rng, extra())
        if out is not None:
            name = "checkpoint_final.npz" if end == config.steps else f"checkpoint_{end}.npz"
            save_checkpoint(out / name, model, optimizer, rng, extra())
    finally:
        if fh is not None:
            fh.close()
    return result
