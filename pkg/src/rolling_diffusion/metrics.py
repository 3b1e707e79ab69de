"""Evaluation metrics: DFT magnitudes, Frechet spectral distance, MSE at horizon."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, NumericalError

__all__ = [
    "SpectralAccumulator",
    "SpectralStats",
    "accumulate_stats",
    "dft_magnitudes",
    "fsd",
    "fsd_at_horizons",
    "mse_at_horizon",
    "spectral_features",
]


def _dft_matrix(D: int) -> np.ndarray:
    n = np.arange(D)
    k = np.arange(D // 2 + 1)
    return np.exp(-2j * np.pi * np.outer(k, n) / D)


def dft_magnitudes(frame) -> np.ndarray:
    """Magnitudes of the ``D // 2 + 1`` non-redundant DFT bins of a real frame.

    Computed by an explicit ``O(D^2)`` sum. Accepts a single frame ``(D,)`` or
    a stack ``(..., D)``.

    Raises:
        ConfigError: if ``D < 2``.
    """
    x = np.asarray(frame, dtype=np.float64)
    D = x.shape[-1]
    if D < 2:
        raise ConfigError(f"DFT needs at least 2 values per frame, got {D}")
    return np.abs(x @ _dft_matrix(D).T)


spectral_features = dft_magnitudes


@dataclass(frozen=True)
class SpectralStats:
    """Sample mean ``(F,)``, unbiased covariance ``(F, F)`` and count of feature vectors."""

    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError(f"spectral statistics need n >= 2 samples, got {self.n}")
        F = self.mean.shape[0]
        if self.mean.ndim != 1 or self.cov.shape != (F, F):
            raise ConfigError(f"mean {self.mean.shape} and cov {self.cov.shape} are inconsistent")

    @property
    def F(self) -> int:
        return self.mean.shape[0]


class SpectralAccumulator:
    """Single-pass mean/covariance accumulator (Welford updates, Chan merges).

    ``merge`` combines two accumulators exactly, so shards can be reduced in a
    fixed order and give the same result as one sequential pass up to rounding.
    """

    def __init__(self, F: int | None = None):
        self.n = 0
        self.mean = None if F is None else np.zeros(F)
        self.m2 = None if F is None else np.zeros((F, F))

    def _init(self, F: int):
        self.mean = np.zeros(F)
        self.m2 = np.zeros((F, F))

    def update(self, vec) -> None:
        v = np.asarray(vec, dtype=np.float64)
        if v.ndim != 1:
            raise ConfigError(f"expected a feature vector, got shape {v.shape}")
        if self.mean is None:
            self._init(v.shape[0])
        elif v.shape[0] != self.mean.shape[0]:
            raise ConfigError(f"feature length {v.shape[0]} differs from {self.mean.shape[0]}")
        self.n += 1
        delta = v - self.mean
        self.mean += delta / self.n
        self.m2 += np.outer(delta, v - self.mean)

    def update_batch(self, vecs) -> None:
        """Fold in a block ``(m, F)`` via a two-pass block moment and a merge."""
        block = np.asarray(vecs, dtype=np.float64)
        if block.ndim != 2 or block.shape[0] == 0:
            raise ConfigError(f"expected a non-empty (m, F) block, got {block.shape}")
        other = SpectralAccumulator()
        other.n = block.shape[0]
        other.mean = block.mean(axis=0)
        centered = block - other.mean
        other.m2 = centered.T @ centered
        self.merge(other)

    def merge(self, other: "SpectralAccumulator") -> "SpectralAccumulator":
        if other.n == 0:
            return self
        if self.n == 0:
            self.n, self.mean, self.m2 = other.n, other.mean.copy(), other.m2.copy()
            return self
        if other.mean.shape != self.mean.shape:
            raise ConfigError("cannot merge accumulators of different feature length")
        n = self.n + other.n
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.n / n)
        self.m2 = self.m2 + other.m2 + np.outer(delta, delta) * (self.n * other.n / n)
        self.n = n
        return self

    def stats(self) -> SpectralStats:
        if self.n < 2:
            raise ConfigError(f"insufficient data: {self.n} feature vectors, need at least 2")
        cov = self.m2 / (self.n - 1)
        return SpectralStats(self.mean.copy(), 0.5 * (cov + cov.T), self.n)


def accumulate_stats(frames: Iterable) -> SpectralStats:
    """Unbiased mean and covariance of feature vectors in one streaming pass.

    Raises:
        ConfigError: with fewer than two vectors.
    """
    acc = SpectralAccumulator()
    for vec in frames:
        acc.update(vec)
    return acc.stats()


def _psd_sqrt(mat: np.ndarray):
    w, V = np.linalg.eigh(mat)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T, w


def fsd(a: SpectralStats, b: SpectralStats) -> float:
    """Frechet distance between Gaussians with the moments of ``a`` and ``b``.

    ``|mu_a - mu_b|^2 + tr(S_a) + tr(S_b) - 2 tr((S_a^1/2 S_b S_a^1/2)^1/2)``.
    The cross term uses symmetric eigendecompositions with eigenvalues floored
    at zero, so no complex arithmetic is needed. Small negative results from
    rounding are clamped to 0.

    Raises:
        ConfigError: if the feature dimensions differ.
        NumericalError: if an eigendecomposition fails or the moments are not finite.
    """
    if a.F != b.F:
        raise ConfigError(f"feature dimension mismatch: {a.F} vs {b.F}")
    for name, st in (("a", a), ("b", b)):
        if not (np.all(np.isfinite(st.mean)) and np.all(np.isfinite(st.cov))):
            raise NumericalError(f"statistics {name} contain non-finite values")
    try:
        root_a, _ = _psd_sqrt(a.cov)
        inner = root_a @ b.cov @ root_a
        inner = 0.5 * (inner + inner.T)
        w = np.linalg.eigvalsh(inner)
    except np.linalg.LinAlgError as exc:
        cond_a = np.linalg.cond(a.cov)
        cond_b = np.linalg.cond(b.cov)
        raise NumericalError(
            f"eigendecomposition failed ({exc}); cond(cov_a)={cond_a:.3g}, cond(cov_b)={cond_b:.3g}"
        ) from exc
    cross = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)
    return max(value, 0.0)


def _frames_of(generated) -> np.ndarray:
    frames = getattr(generated, "frames", generated)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.ndim != 3:
        raise ConfigError(f"expected frames (B, N, D), got {frames.shape}")
    return frames


def _check_horizons(horizons: Sequence[int], available: int, what: str):
    hs = [int(h) for h in horizons]
    bad = [h for h in hs if h < 1 or h > available]
    if bad:
        raise ConfigError(f"horizons {bad} not available; {what} covers horizons 1..{available}")
    return hs


def mse_at_horizon(generated, reference, horizons: Sequence[int]) -> np.ndarray:
    """Mean squared error of generated frame ``k`` against reference frame ``k``.

    Horizons are 1-based: ``k = 1`` is the first generated frame. ``generated``
    is a :class:`~rolling_diffusion.sample.SampleTrace` or frames ``(B, N, D)``
    and ``reference`` the matching ground truth ``(B, N_ref, D)``. The error is
    averaged over rollouts and frame values.

    Raises:
        ConfigError: if a horizon exceeds the trace or the reference.
    """
    gen = _frames_of(generated)
    ref = _frames_of(reference)
    if gen.shape[0] != ref.shape[0] or gen.shape[2] != ref.shape[2]:
        raise ConfigError(f"generated {gen.shape} and reference {ref.shape} are incompatible")
    hs = _check_horizons(horizons, min(gen.shape[1], ref.shape[1]), "the trace")
    return np.array([np.mean((gen[:, k - 1] - ref[:, k - 1]) ** 2) for k in hs])


def fsd_at_horizons(generated, reference, horizons: Sequence[int], bucket: int = 1) -> np.ndarray:
    """FSD between generated and reference frames, one value per horizon.

    For horizon ``k`` the DFT features of frames ``k - bucket + 1 .. k`` of all
    rollouts are pooled on each side. The reference frames need not come from
    the same rollouts, only the same horizons.
    """
    if bucket < 1:
        raise ConfigError("bucket must be at least 1")
    gen = _frames_of(generated)
    ref = _frames_of(reference)
    if gen.shape[2] != ref.shape[2]:
        raise ConfigError(f"frame sizes differ: {gen.shape[2]} vs {ref.shape[2]}")
    hs = _check_horizons(horizons, min(gen.shape[1], ref.shape[1]), "the trace")
    out = []
    for k in hs:
        lo = max(0, k - bucket)
        stats = []
        for frames in (gen, ref):
            acc = SpectralAccumulator()
            acc.update_batch(dft_magnitudes(frames[:, lo:k]).reshape(-1, gen.shape[2] // 2 + 1))
            stats.append(acc.stats())
        out.append(fsd(*stats))
    return np.array(out)
