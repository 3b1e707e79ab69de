"""Small window denoiser with hand-written backward pass, Adam and EMA.

The network sees a whole window at once: all ``W`` noisy frames are flattened
and concatenated with a sinusoidal embedding of every frame's local time, fed
through an MLP with residual hidden blocks, and mapped back to ``W x D``
outputs. A linear skip path from the input frames to the output lets the model
represent linear denoisers exactly. Output and skip weights start at zero, so a
fresh model predicts the zero vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import PredictionKind, convert_prediction
from .errors import ConfigError, ContractError, DataIOError, NumericalError
from .schedules import COSINE, SnrSchedule

__all__ = [
    "Adam",
    "DenoiserModel",
    "TimeEmbedding",
    "adam_step",
    "ema_update",
    "load_checkpoint",
    "save_checkpoint",
]

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_K = 0.044715


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_K * x**3)))


def gelu_grad(x):
    th = np.tanh(_GELU_C * (x + _GELU_K * x**3))
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * _GELU_C * (1.0 + 3.0 * _GELU_K * x**2)


@dataclass(frozen=True)
class TimeEmbedding:
    """Sinusoidal features ``[sin(f t), cos(f t)]`` with geometric frequencies.

    The lowest angular frequency is 1 rad per unit time, so the features do not
    repeat on any interval shorter than ``2 pi``.
    """

    E: int = 16
    f_min: float = 1.0
    f_max: float = 100.0

    def __post_init__(self):
        if self.E < 2 or self.E % 2:
            raise ConfigError(f"embedding width must be a positive even integer, got {self.E}")

    @property
    def frequencies(self) -> np.ndarray:
        return np.geomspace(self.f_min, self.f_max, self.E // 2)

    def __call__(self, t) -> np.ndarray:
        arg = np.asarray(t, dtype=np.float64)[..., None] * self.frequencies
        return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


class DenoiserModel:
    """MLP denoiser over a window of ``W`` frames of dimension ``D``.

    Parameters live in one flat vector ``params``; ``ema_params`` is a shadow
    copy of the same length. ``forward`` caches intermediates for ``backward``;
    any parameter change invalidates that cache.
    """

    def __init__(self, W: int, D: int, hidden: int = 256, depth: int = 3, emb_dim: int = 16,
                 ema_decay: float = 0.9999, prediction: str = "v", seed: int = 0):
        if W < 1 or D < 1 or hidden < 1 or depth < 1:
            raise ConfigError("W, D, hidden and depth must all be positive")
        if not 0.0 <= ema_decay <= 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1], got {ema_decay}")
        self.W, self.D = int(W), int(D)
        self.hidden, self.depth = int(hidden), int(depth)
        self.embedding = TimeEmbedding(emb_dim)
        self.ema_decay = float(ema_decay)
        self.prediction = PredictionKind(prediction)
        self.n_in = self.W * self.D + self.W * self.embedding.E
        self.n_out = self.W * self.D

        shapes = [("in_w", (self.n_in, self.hidden)), ("in_b", (self.hidden,))]
        for k in range(1, self.depth):
            shapes += [(f"res{k}_w", (self.hidden, self.hidden)), (f"res{k}_b", (self.hidden,))]
        shapes += [("out_w", (self.hidden, self.n_out)), ("out_b", (self.n_out,)),
                   ("skip_w", (self.W * self.D, self.n_out))]
        self._layout = {}
        offset = 0
        for name, shape in shapes:
            size = int(np.prod(shape))
            self._layout[name] = (offset, shape)
            offset += size
        self.num_params = offset

        rng = np.random.default_rng(seed)
        params = np.zeros(self.num_params)
        for name, (off, shape) in self._layout.items():
            if name.endswith("_w") and name not in ("out_w", "skip_w"):
                bound = 1.0 / np.sqrt(shape[0])
                params[off:off + shape[0] * shape[1]] = rng.uniform(-bound, bound, shape[0] * shape[1])
        self.params = params
        self.ema_params = params.copy()
        self._version = 0
        self._cache = None

    # -- parameter access -------------------------------------------------

    @property
    def architecture(self) -> dict:
        return {
            "W": self.W, "D": self.D, "hidden": self.hidden, "depth": self.depth,
            "emb_dim": self.embedding.E, "ema_decay": self.ema_decay,
            "prediction": self.prediction.value,
        }

    def set_params(self, params, ema_params=None):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.num_params,):
            raise ConfigError(f"expected {self.num_params} parameters, got {params.shape}")
        self.params = params.copy()
        if ema_params is not None:
            ema_params = np.asarray(ema_params, dtype=np.float64)
            if ema_params.shape != params.shape:
                raise ConfigError("ema_params must match params in length")
            self.ema_params = ema_params.copy()
        self._version += 1

    def touch(self):
        """Mark ``params`` as modified in place; invalidates the forward cache."""
        self._version += 1

    def _views(self, flat):
        return {
            name: flat[off:off + int(np.prod(shape))].reshape(shape)
            for name, (off, shape) in self._layout.items()
        }

    # -- forward / backward ------------------------------------------------

    def _inputs(self, z, local_times):
        z = np.asarray(z, dtype=np.float64)
        local_times = np.asarray(local_times, dtype=np.float64)
        if z.ndim != 3 or z.shape[1:] != (self.W, self.D):
            raise ConfigError(f"expected z of shape (B, {self.W}, {self.D}), got {z.shape}")
        if local_times.shape != z.shape[:2]:
            raise ConfigError(f"local times {local_times.shape} do not match z {z.shape}")
        B = z.shape[0]
        zf = z.reshape(B, self.W * self.D)
        emb = self.embedding(local_times).reshape(B, self.W * self.embedding.E)
        return z, local_times, zf, np.concatenate([zf, emb], axis=1)

    def forward(self, z, local_times, use_ema: bool = False) -> np.ndarray:
        """Raw network output (in the model's prediction parameterization), ``(B, W, D)``."""
        z, local_times, zf, inp = self._inputs(z, local_times)
        p = self._views(self.ema_params if use_ema else self.params)
        pre = inp @ p["in_w"] + p["in_b"]
        h = gelu(pre)
        pres, hs = [pre], [h]
        for k in range(1, self.depth):
            pre = h @ p[f"res{k}_w"] + p[f"res{k}_b"]
            h = h + gelu(pre)
            pres.append(pre)
            hs.append(h)
        out = h @ p["out_w"] + p["out_b"] + zf @ p["skip_w"]
        if not use_ema:
            self._cache = (self._version, z.copy(), local_times.copy(), zf, inp, pres, hs)
        return out.reshape(z.shape)

    def backward(self, z, local_times, grad_out) -> np.ndarray:
        """Gradient of ``sum(forward(z, t) * grad_out)`` w.r.t. ``params``."""
        if self._cache is None:
            raise ContractError("backward called before forward")
        version, cz, ct, zf, inp, pres, hs = self._cache
        if version != self._version:
            raise ContractError("parameters changed since the cached forward pass")
        if not (np.array_equal(cz, z) and np.array_equal(ct, local_times)):
            raise ContractError("backward inputs differ from the cached forward pass")
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape != cz.shape:
            raise ConfigError(f"grad_out shape {g.shape} != output shape {cz.shape}")
        g = g.reshape(g.shape[0], self.n_out)
        p = self._views(self.params)
        grads = np.zeros(self.num_params)
        gv = self._views(grads)
        gv["out_w"][...] = hs[-1].T @ g
        gv["out_b"][...] = g.sum(axis=0)
        gv["skip_w"][...] = zf.T @ g
        gh = g @ p["out_w"].T
        for k in range(self.depth - 1, 0, -1):
            gpre = gh * gelu_grad(pres[k])
            gv[f"res{k}_w"][...] = hs[k - 1].T @ gpre
            gv[f"res{k}_b"][...] = gpre.sum(axis=0)
            gh = gh + gpre @ p[f"res{k}_w"].T
        gpre = gh * gelu_grad(pres[0])
        gv["in_w"][...] = inp.T @ gpre
        gv["in_b"][...] = gpre.sum(axis=0)
        return grads

    def predict_x(self, z, local_times, schedule: SnrSchedule = COSINE, use_ema: bool = False):
        """Data estimate ``x_hat`` for a batch of windows."""
        out = self.forward(z, local_times, use_ema=use_ema)
        level = schedule.noise_level(local_times)
        return convert_prediction(self.prediction, PredictionKind.X, out, z,
                                  level._replace(alpha=level.alpha[..., None], sigma=level.sigma[..., None]))

    def ema_update(self):
        ema_update(self)


def _adam_inplace(params, grads, m, v, step, lr, beta1, beta2, eps, buf):
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise NumericalError(f"non-finite gradient in {bad.size} entries (first index {bad[0]}) at step {step}")
    m *= beta1
    np.multiply(grads, 1.0 - beta1, out=buf)
    m += buf
    v *= beta2
    np.multiply(grads, grads, out=buf)
    buf *= 1.0 - beta2
    v += buf
    # lr * m_hat / (sqrt(v_hat) + eps) with the bias corrections folded into scalars
    np.sqrt(v, out=buf)
    buf /= np.sqrt(1.0 - beta2**step)
    buf += eps
    np.divide(m, buf, out=buf)
    buf *= lr / (1.0 - beta1**step)
    params -= buf


def adam_step(params, grads, m, v, step: int, lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update; ``step`` is the 1-based index of this update.

    Returns ``(params, m, v)`` as new arrays; the inputs are left untouched.
    """
    grads = np.asarray(grads, dtype=np.float64)
    params, m, v = (np.array(a, dtype=np.float64) for a in (params, m, v))
    _adam_inplace(params, grads, m, v, step, lr, beta1, beta2, eps, np.empty_like(params))
    return params, m, v


class Adam:
    """Adam moments bound to a flat parameter vector; updates run in place."""

    def __init__(self, num_params: int, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(num_params)
        self.v = np.zeros(num_params)
        self.step = 0
        self._buf = np.empty(num_params)

    def apply(self, model: DenoiserModel, grads):
        _adam_inplace(model.params, np.asarray(grads, dtype=np.float64), self.m, self.v,
                      self.step + 1, self.lr, self.beta1, self.beta2, self.eps, self._buf)
        self.step += 1
        model.touch()


def ema_update(model: DenoiserModel):
    """``ema <- decay * ema + (1 - decay) * params``, in place."""
    d = model.ema_decay
    model.ema_params *= d
    model.ema_params += (1.0 - d) * model.params


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_FORMAT = "rolling-diffusion-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: DenoiserModel, optimizer: Adam | None = None,
                    rng: np.random.Generator | None = None, extra: dict | None = None):
    """Write params, EMA, Adam moments, step and RNG state to an ``.npz`` file."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": model.architecture,
        "step": optimizer.step if optimizer else 0,
        "adam": ({"lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                  "eps": optimizer.eps} if optimizer else None),
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "extra": extra or {},
    }
    arrays = {"params": model.params, "ema_params": model.ema_params}
    if optimizer is not None:
        arrays["adam_m"], arrays["adam_v"] = optimizer.m, optimizer.v
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
        tmp.replace(path)
    except OSError as exc:
        raise DataIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    """Return ``(model, optimizer_or_None, rng_or_None, meta)``."""
    try:
        with np.load(path, allow_pickle=False) as f:
            meta = json.loads(f["meta"].tobytes().decode())
            arrays = {k: f[k] for k in f.files if k != "meta"}
    except (OSError, ValueError, KeyError) as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
        raise DataIOError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    model = DenoiserModel(**meta["architecture"])
    model.set_params(arrays["params"], arrays["ema_params"])
    optimizer = None
    if meta["adam"] is not None:
        optimizer = Adam(model.num_params, **meta["adam"])
        optimizer.m, optimizer.v = arrays["adam_m"].copy(), arrays["adam_v"].copy()
        optimizer.step = meta["step"]
    rng = None
    if meta["rng_state"] is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
    return model, optimizer, rng, meta
