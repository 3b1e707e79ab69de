"""Rolling diffusion for sequences of vector frames, in numpy.

Frames inside a sliding window are noised at different levels, later frames
more, so the window can be denoised and advanced one frame at a time.
"""

from .diffusion import (
    LossWeighting,
    PredictionKind,
    WindowState,
    convert_prediction,
    forward_sample,
    loss_weights,
    posterior_params,
    rolling_loss,
)
from .errors import (
    ConfigError,
    ContractError,
    DataIOError,
    InvalidIntervalError,
    NumericalError,
    RollingDiffusionError,
    SingularityError,
)
from .metrics import SpectralStats, accumulate_stats, dft_magnitudes, fsd, fsd_at_horizons, mse_at_horizon
from .net import Adam, DenoiserModel, load_checkpoint, save_checkpoint
from .sample import (
    SampleTrace,
    SamplerConfig,
    ancestral_step,
    boundary_sample,
    generate_rolling,
    rollout,
    standard_block_rollout,
)
from .schedules import COSINE, CosineSchedule, ScheduleKind, ScheduleSpec, partition_frames
from .train import TrainConfig

__version__ = "0.1.0"
