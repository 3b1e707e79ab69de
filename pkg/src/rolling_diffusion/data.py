"""Synthetic sequence datasets, window sampling and the AR(1) oracle denoiser."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataIOError, NumericalError
from .schedules import COSINE, SnrSchedule

__all__ = [
    "Ar1Oracle",
    "Ar1Params",
    "Lorenz96Params",
    "SequenceDataset",
    "WindowSampler",
    "chunk_windows",
    "generate_ar1",
    "generate_lorenz96",
    "lorenz96_rhs",
    "read_dataset",
    "rk4_step",
    "split_indices",
    "write_dataset",
]


@dataclass
class SequenceDataset:
    """``sequences`` has shape ``(N, K, D)``."""

    sequences: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sequences = np.ascontiguousarray(self.sequences, dtype=np.float64)
        if self.sequences.ndim != 3:
            raise ConfigError(f"sequences must be (N, K, D), got {self.sequences.shape}")
        if not np.all(np.isfinite(self.sequences)):
            raise NumericalError("dataset contains non-finite values")

    @property
    def N(self) -> int:
        return self.sequences.shape[0]

    @property
    def K(self) -> int:
        return self.sequences.shape[1]

    @property
    def D(self) -> int:
        return self.sequences.shape[2]

    def subset(self, idx) -> "SequenceDataset":
        return SequenceDataset(self.sequences[np.asarray(idx)], dict(self.metadata))


def split_indices(N: int, fractions=(0.9, 0.05, 0.05)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Contiguous train/validation/test split by sequence index.

    Sequences are generated i.i.d., so a contiguous split is unbiased. Each
    split gets at least one sequence when ``N >= 3``.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n_val = int(round(fractions[1] * N))
    n_test = int(round(fractions[2] * N))
    if N >= 3:
        n_val, n_test = max(n_val, 1), max(n_test, 1)
    n_train = N - n_val - n_test
    if n_train < 1:
        raise ConfigError(f"dataset of {N} sequences is too small to split")
    idx = np.arange(N)
    return idx[:n_train], idx[n_train:n_train + n_val], idx[n_train + n_val:]


# -- AR(1) ---------------------------------------------------------------------


@dataclass(frozen=True)
class Ar1Params:
    D: int = 4
    rho: float = 0.9
    noise_scale: float | None = None  # None -> sqrt(1 - rho^2), the stationary choice

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ConfigError(f"rho must lie in (0, 1), got {self.rho}")
        if self.D < 1:
            raise ConfigError("D must be positive")
        if self.noise_scale is not None and self.noise_scale < 0:
            raise ConfigError("noise_scale must be non-negative")

    @property
    def scale(self) -> float:
        return float(np.sqrt(1.0 - self.rho**2)) if self.noise_scale is None else float(self.noise_scale)


def generate_ar1(params: Ar1Params, N: int, K: int, seed: int) -> SequenceDataset:
    """``x_0 ~ N(0, I)``, ``x_{k+1} = rho x_k + noise_scale xi``, independently per dimension."""
    if N < 1 or K < 1:
        raise ConfigError("N and K must be at least 1")
    rng = np.random.default_rng(seed)
    xs = np.empty((N, K, params.D))
    xs[:, 0] = rng.standard_normal((N, params.D))
    xi = rng.standard_normal((N, K - 1, params.D))
    for k in range(1, K):
        xs[:, k] = params.rho * xs[:, k - 1] + params.scale * xi[:, k - 1]
    meta = {"generator": "ar1", "seed": seed, "params": asdict(params), "N": N, "K": K}
    return SequenceDataset(xs, meta)


def ar1_covariance(rho: float, K: int) -> np.ndarray:
    """Stationary covariance ``rho^|i - j|`` of ``K`` consecutive AR(1) values."""
    k = np.arange(K)
    return rho ** np.abs(k[:, None] - k[None, :])


class Ar1Oracle:
    """Exact posterior mean ``E[x | z]`` for stationary unit-variance AR(1) windows.

    Dimensions are independent, each a Gaussian vector over frames with
    covariance ``C``. With ``z = A x + S eps`` (``A``, ``S`` diagonal per-frame
    noise coefficients) the optimal denoiser is
    ``E[x | z] = C A (A C A + S^2)^{-1} z``.
    Exposes the same ``predict_x`` interface as :class:`~rolling_diffusion.net.DenoiserModel`.
    """

    def __init__(self, rho: float, W: int, schedule: SnrSchedule = COSINE):
        self.rho, self.W = rho, W
        self.schedule = schedule
        self.cov = ar1_covariance(rho, W)

    def gain(self, local_times) -> np.ndarray:
        """Linear map ``G`` (``W x W``) with ``E[x | z] = G z`` along the frame axis."""
        lvl = self.schedule.noise_level(np.asarray(local_times, dtype=np.float64))
        a, s = lvl.alpha, lvl.sigma
        czz = a[:, None] * self.cov * a[None, :] + np.diag(s**2)
        cxz = self.cov * a[None, :]
        return np.linalg.solve(czz, cxz.T).T

    def predict_x(self, z, local_times, **_):
        z = np.asarray(z, dtype=np.float64)
        local_times = np.asarray(local_times, dtype=np.float64)
        if local_times.ndim == 1:
            return np.einsum("vw,bwd->bvd", self.gain(local_times), z)
        if np.all(local_times == local_times[:1]):
            return np.einsum("vw,bwd->bvd", self.gain(local_times[0]), z)
        out = np.empty_like(z)
        # group by identical local-time rows so one solve serves a whole batch
        uniq, inv = np.unique(local_times, axis=0, return_inverse=True)
        for i, row in enumerate(uniq):
            sel = np.flatnonzero(inv.ravel() == i)
            out[sel] = np.einsum("vw,bwd->bvd", self.gain(row), z[sel])
        return out


# -- Lorenz-96 -------------------------------------------------------------------


@dataclass(frozen=True)
class Lorenz96Params:
    D: int = 32
    F: float = 8.0
    dt: float = 0.01
    stride: int = 20
    warmup: int = 1000
    init_std: float = 0.1

    def __post_init__(self):
        if self.D < 4:
            raise ConfigError(f"Lorenz-96 needs D >= 4, got {self.D}")
        if self.dt <= 0 or self.stride < 1 or self.warmup < 0:
            raise ConfigError("dt must be positive, stride >= 1 and warmup >= 0")
        if self.dt * max(abs(self.F), 1.0) > 0.4:
            raise ConfigError(f"dt={self.dt} is too large for stable RK4 at F={self.F}")


def lorenz96_rhs(x, F: float):
    """``dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F`` with periodic indices."""
    return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1) - x + F


def rk4_step(x, dt: float, F: float):
    k1 = lorenz96_rhs(x, F)
    k2 = lorenz96_rhs(x + 0.5 * dt * k1, F)
    k3 = lorenz96_rhs(x + 0.5 * dt * k2, F)
    k4 = lorenz96_rhs(x + dt * k3, F)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _integrate(x, n_steps: int, params: Lorenz96Params):
    # overflow is reported by _check_finite with the offending sequence
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(n_steps):
            x = rk4_step(x, params.dt, params.F)
    return x


def _check_finite(x, stage: str):
    bad = ~np.all(np.isfinite(x), axis=-1)
    if np.any(bad):
        raise NumericalError(f"Lorenz-96 blew up during {stage} in sequence {int(np.flatnonzero(bad)[0])}")


def generate_lorenz96(params: Lorenz96Params, N: int, K: int, seed: int,
                      standardize: bool = True, split=(0.9, 0.05, 0.05)) -> SequenceDataset:
    """Integrate ``N`` independent trajectories and save ``K`` frames each.

    Each trajectory starts at the fixed point ``x_i = F`` plus a Gaussian
    perturbation drawn from its own child seed. After ``warmup`` discarded RK4
    steps a frame is saved every ``stride`` steps. With ``standardize`` the
    values are shifted and scaled by the scalar mean and standard deviation of
    the training split.
    """
    if N < 1 or K < 1:
        raise ConfigError("N and K must be at least 1")
    children = np.random.SeedSequence(seed).spawn(N)
    x = np.stack([
        params.F + params.init_std * np.random.default_rng(c).standard_normal(params.D)
        for c in children
    ])
    x = _integrate(x, params.warmup, params)
    _check_finite(x, "warmup")
    frames = np.empty((N, K, params.D))
    for k in range(K):
        if k:
            x = _integrate(x, params.stride, params)
            _check_finite(x, f"frame {k}")
        frames[:, k] = x
    meta = {"generator": "lorenz96", "seed": seed, "params": asdict(params), "N": N, "K": K,
            "split": list(split)}
    if standardize:
        train_idx, _, _ = split_indices(N, split) if N >= 3 else (np.arange(N), None, None)
        mean = float(frames[train_idx].mean())
        std = float(frames[train_idx].std())
        frames = (frames - mean) / std
        meta["standardization"] = {"mean": mean, "std": std}
    return SequenceDataset(frames, meta)


# -- windows -------------------------------------------------------------------------


class WindowSampler:
    """Uniform random windows of ``W`` frames, ``stride_frames`` apart in the source.

    Every ``(sequence, offset)`` pair is equally likely; there are
    ``K - (W - 1) * stride_frames`` valid offsets per sequence.
    """

    def __init__(self, ds: SequenceDataset, W: int, stride_frames: int = 1,
                 rng: np.random.Generator | None = None):
        if W < 1 or stride_frames < 1:
            raise ConfigError("W and stride_frames must be positive")
        span = (W - 1) * stride_frames + 1
        if ds.K < span:
            raise ConfigError(f"sequences of K={ds.K} frames cannot hold a window spanning {span}")
        self.ds, self.W, self.stride = ds, W, stride_frames
        self.n_offsets = ds.K - span + 1
        self.rng = rng if rng is not None else np.random.default_rng()
        self._frame_idx = np.arange(W) * stride_frames

    def sample_index(self, size):
        flat = self.rng.integers(0, self.ds.N * self.n_offsets, size=size)
        return flat // self.n_offsets, flat % self.n_offsets

    def sample(self, batch_size: int) -> np.ndarray:
        seq, off = self.sample_index(batch_size)
        return self.ds.sequences[seq[:, None], off[:, None] + self._frame_idx]

    def __iter__(self):
        while True:
            seq, off = self.sample_index(None)
            yield self.ds.sequences[seq, off + self._frame_idx]


def chunk_windows(ds: SequenceDataset, W: int, stride_frames: int = 1, seed: int = 0):
    """Endless iterator of ``(W, D)`` windows with uniformly drawn start offsets."""
    return iter(WindowSampler(ds, W, stride_frames, np.random.default_rng(seed)))


# -- binary file format ---------------------------------------------------------------

MAGIC = b"RDSEQ\x00\x00\x01"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQQQI")  # magic, version, N, K, D, metadata length


def write_dataset(path, ds: SequenceDataset):
    """Header (magic, version, N, K, D, JSON metadata) then little-endian float64 frames."""
    meta = json.dumps(ds.metadata, sort_keys=True).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, ds.N, ds.K, ds.D, len(meta)))
            fh.write(meta)
            fh.write(ds.sequences.astype("<f8", copy=False).tobytes())
    except OSError as exc:
        raise DataIOError(f"cannot write dataset {path}: {exc}") from exc


def read_dataset(path) -> SequenceDataset:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read dataset {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise DataIOError(f"{path}: truncated header")
    magic, version, N, K, D, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise DataIOError(f"{path}: not a version-{FORMAT_VERSION} sequence file")
    start = _HEADER.size + mlen
    expected = start + 8 * N * K * D
    if len(raw) != expected:
        raise DataIOError(f"{path}: expected {expected} bytes, found {len(raw)}")
    meta = json.loads(raw[_HEADER.size:start].decode())
    data = np.frombuffer(raw, dtype="<f8", offset=start).reshape(N, K, D).astype(np.float64)
    return SequenceDataset(data, meta)
