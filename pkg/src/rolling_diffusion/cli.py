"""Command-line front end: generate data, train, roll out, evaluate, compare.

Every subcommand reads one JSON experiment config (``--config``); ``--seed``
overrides its top-level seed. Exit codes: 0 success, 2 configuration error,
3 numerical error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import (
    Ar1Params,
    Lorenz96Params,
    SequenceDataset,
    generate_ar1,
    generate_lorenz96,
    read_dataset,
    split_indices,
    write_dataset,
)
from .errors import ConfigError, DataIOError, RollingDiffusionError
from .metrics import fsd_at_horizons, mse_at_horizon
from .net import load_checkpoint
from .sample import SamplerConfig, generate_rolling, standard_block_rollout
from .train import TrainConfig, train

__all__ = ["ExperimentConfig", "main", "load_config"]

log = logging.getLogger("rolling_diffusion")

RESULTS_HEADER = ["method", "n_cln", "W", "horizon", "fsd", "mse"]


# -- configuration -------------------------------------------------------------------


@dataclass(frozen=True)
class DataSection:
    generator: str = "lorenz96"
    N: int = 400
    K: int = 256
    D: int = 32
    split: tuple = (0.9, 0.05, 0.05)
    standardize: bool = True
    # Lorenz-96
    F: float = 8.0
    dt: float = 0.01
    stride: int = 20
    warmup: int = 1000
    init_std: float = 0.1
    # AR(1)
    rho: float = 0.9
    noise_scale: float | None = None

    def __post_init__(self):
        if self.generator not in ("lorenz96", "ar1"):
            raise ConfigError(f"data.generator must be 'lorenz96' or 'ar1', got {self.generator!r}")
        object.__setattr__(self, "split", tuple(self.split))
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ConfigError(f"data.split must be three non-negative fractions summing to 1, got {self.split}")
        if self.N < 1 or self.K < 1 or self.D < 2:
            raise ConfigError("data.N and data.K must be positive and data.D at least 2")


@dataclass(frozen=True)
class ModelSection:
    hidden: int = 256
    depth: int = 3
    emb_dim: int = 16
    prediction: str = "v"
    ema_decay: float = 0.999


@dataclass(frozen=True)
class TrainSection:
    W: int = 8
    n_cln: int = 2
    beta: float = 0.9
    mode: str = "rolling"
    boundary_kind: str = "init"
    batch_size: int = 64
    steps: int = 20000
    lr: float = 1e-4
    weighting: str = "eps_mse"
    window_stride: int = 1
    checkpoint_every: int = 0
    log_every: int = 100


@dataclass(frozen=True)
class SampleSection:
    evals_per_frame: int = 8
    boundary_steps: int | None = None
    boundary_kind: str = "init"
    use_ema: bool = True
    num_frames: int = 48
    offset_stride: int = 16
    max_rollouts: int | None = None
    pgm_strips: int = 0


@dataclass(frozen=True)
class EvalSection:
    horizons: tuple = (8, 24, 48)
    fsd_bucket: int = 1

    def __post_init__(self):
        object.__setattr__(self, "horizons", tuple(int(h) for h in self.horizons))
        if not self.horizons or min(self.horizons) < 1:
            raise ConfigError("eval.horizons must be a non-empty list of positive integers")
        if self.fsd_bucket < 1:
            raise ConfigError("eval.fsd_bucket must be at least 1")


_SECTIONS = {"data": DataSection, "model": ModelSection, "train": TrainSection,
             "sample": SampleSection, "eval": EvalSection}


def _build_section(cls, raw, name: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {unknown}; allowed: {sorted(known)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    """A complete, JSON-serializable description of one experiment."""

    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output_dir: str = "runs/experiment"
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        allowed = set(_SECTIONS) | {"output_dir", "seed"}
        unknown = sorted(set(raw) - allowed)
        if unknown:
            raise ConfigError(f"unknown top-level keys {unknown}; allowed: {sorted(allowed)}")
        kwargs = {name: _build_section(sec, raw.get(name, {}), name) for name, sec in _SECTIONS.items()}
        if "output_dir" in raw:
            kwargs["output_dir"] = str(raw["output_dir"])
        if "seed" in raw:
            if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
                raise ConfigError("seed must be an integer")
            kwargs["seed"] = raw["seed"]
        config = cls(**kwargs)
        try:
            config.train_config()  # validates train/model fields up front
            config.sampler_config()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid train/model/sample setting: {exc}") from exc
        return config

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def stage_seed(self, stage: int) -> int:
        """Independent integer seed for pipeline stage ``stage`` (0 data, 1 train, 2 sample)."""
        return int(np.random.SeedSequence(self.seed).spawn(3)[stage].generate_state(1)[0])

    def train_config(self, mode: str | None = None) -> TrainConfig:
        t = asdict(self.train)
        if mode is not None:
            t["mode"] = mode
        return TrainConfig(**t, **asdict(self.model), seed=self.stage_seed(1))

    def sampler_config(self) -> SamplerConfig:
        s = self.sample
        return SamplerConfig(W=self.train.W, n_cln=self.train.n_cln, evals_per_frame=s.evals_per_frame,
                             boundary_steps=s.boundary_steps, boundary_kind=s.boundary_kind,
                             seed=self.stage_seed(2), use_ema=s.use_ema)


def load_config(path=None, seed: int | None = None) -> ExperimentConfig:
    """Parse and validate a JSON config; ``path=None`` gives the defaults."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise DataIOError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    config = ExperimentConfig.from_dict(raw)
    if seed is not None:
        config = replace(config, seed=seed)
    return config


# -- file helpers --------------------------------------------------------------------


def _refuse_existing(paths, force: bool):
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise DataIOError(f"refusing to overwrite {existing}; pass --force")


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def dataset_path(config: ExperimentConfig) -> Path:
    return config.out / "dataset.bin"


def train_dir(config: ExperimentConfig, mode: str) -> Path:
    return config.out / f"train_{mode}"


def rollout_dir(config: ExperimentConfig, method: str) -> Path:
    return config.out / f"rollout_{method}"


def write_pgm(path: Path, frames: np.ndarray):
    """Grayscale strip, one row per frame, values min-max scaled to 0..255."""
    frames = np.asarray(frames, dtype=np.float64)
    lo, hi = float(frames.min()), float(frames.max())
    scaled = np.zeros_like(frames) if hi <= lo else (frames - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    rows, cols = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode())
        fh.write(pixels.tobytes())


# -- subcommands ---------------------------------------------------------------------


def cmd_generate(config: ExperimentConfig, force: bool = False) -> Path:
    """Write the dataset file and a JSON sidecar of generator metadata."""
    d = config.data
    path = dataset_path(config)
    sidecar = path.with_suffix(".json")
    _refuse_existing([path, sidecar], force)
    config.out.mkdir(parents=True, exist_ok=True)
    seed = config.stage_seed(0)
    if d.generator == "lorenz96":
        params = Lorenz96Params(D=d.D, F=d.F, dt=d.dt, stride=d.stride, warmup=d.warmup, init_std=d.init_std)
        ds = generate_lorenz96(params, d.N, d.K, seed, standardize=d.standardize, split=d.split)
    else:
        ds = generate_ar1(Ar1Params(D=d.D, rho=d.rho, noise_scale=d.noise_scale), d.N, d.K, seed)
        ds.metadata["split"] = list(d.split)
    write_dataset(path, ds)
    _write_json(sidecar, ds.metadata)
    log.info("wrote %s (N=%d, K=%d, D=%d)", path, ds.N, ds.K, ds.D)
    return path


def _load_split(config: ExperimentConfig, which: int) -> SequenceDataset:
    path = dataset_path(config)
    if not path.exists():
        raise DataIOError(f"dataset {path} not found; run 'generate' first")
    ds = read_dataset(path)
    if ds.D != config.data.D:
        raise ConfigError(f"dataset has D={ds.D}, config says D={config.data.D}")
    if ds.N < 3:
        return ds
    return ds.subset(split_indices(ds.N, config.data.split)[which])


def cmd_train(config: ExperimentConfig, mode: str | None = None, force: bool = False,
              resume_from=None) -> Path:
    """Train on the training split; returns the final checkpoint path."""
    mode = mode or config.train.mode
    out = train_dir(config, mode)
    final = out / "checkpoint_final.npz"
    if resume_from is None:
        _refuse_existing([final], force)
    ds = _load_split(config, 0)
    tc = config.train_config(mode)
    train(tc, ds, out_dir=out, resume_from=resume_from)
    return final


def _rollout_windows(config: ExperimentConfig, ds: SequenceDataset):
    """Conditioning and ground-truth continuations from every sequence and offset."""
    n, N_f = config.train.n_cln, config.sample.num_frames
    span = n + N_f
    if span > ds.K:
        raise ConfigError(f"n_cln + num_frames = {span} exceeds sequence length {ds.K}")
    offsets = list(range(0, ds.K - span + 1, max(1, config.sample.offset_stride)))
    cond = np.stack([ds.sequences[i, o:o + n] for i in range(ds.N) for o in offsets])
    ref = np.stack([ds.sequences[i, o + n:o + span] for i in range(ds.N) for o in offsets])
    if config.sample.max_rollouts is not None:
        cond, ref = cond[:config.sample.max_rollouts], ref[:config.sample.max_rollouts]
    return cond, ref, offsets


def cmd_rollout(config: ExperimentConfig, checkpoint=None, method: str | None = None,
                use_ema: bool | None = None, force: bool = False) -> Path:
    """Sample continuations of test-split contexts and write the trace files.

    Rolling models use boundary initialization followed by rolling steps;
    standard models use block-autoregressive sampling at the same number of
    model calls per frame.
    """
    mode = method or config.train.mode
    ckpt = Path(checkpoint) if checkpoint is not None else train_dir(config, mode) / "checkpoint_final.npz"
    model, _, _, meta = load_checkpoint(ckpt)
    trained_mode = meta.get("extra", {}).get("train_config", {}).get("mode", mode)
    if model.W != config.train.W or model.D != config.data.D:
        raise ConfigError(f"checkpoint has W={model.W}, D={model.D}; config has W={config.train.W}, D={config.data.D}")
    out = rollout_dir(config, mode)
    files = [out / "trace.csv", out / "trace.bin", out / "reference.bin", out / "trace.json"]
    _refuse_existing(files, force)
    out.mkdir(parents=True, exist_ok=True)

    sc = config.sampler_config()
    if use_ema is not None:
        sc = replace(sc, use_ema=use_ema)
    cond, ref, offsets = _rollout_windows(config, _load_split(config, 2))
    rng = np.random.default_rng(sc.seed)
    sampler = generate_rolling if trained_mode == "rolling" else standard_block_rollout
    trace = sampler(model, cond, sc, config.sample.num_frames, rng)

    B, N_f, D = trace.frames.shape
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rollout", "frame_index", "emission_step"] + [f"v{j}" for j in range(D)])
        for b in range(B):
            for k in range(N_f):
                w.writerow([b, k, trace.emission_steps[k]] + [repr(float(v)) for v in trace.frames[b, k]])
    info = {"method": mode, "sampler": trained_mode, "n_cln": sc.n_cln, "W": sc.W,
            "evals_per_frame": sc.evals_per_frame, "use_ema": sc.use_ema,
            "model_eval_count": trace.model_eval_count, "boundary_eval_count": trace.boundary_eval_count,
            "num_rollouts": B, "num_frames": N_f, "offsets": offsets, "checkpoint": str(ckpt)}
    write_dataset(out / "trace.bin", SequenceDataset(trace.frames, info))
    write_dataset(out / "reference.bin", SequenceDataset(ref, {"method": "reference", "offsets": offsets}))
    _write_json(out / "trace.json", info)
    for b in range(min(config.sample.pgm_strips, B)):
        write_pgm(out / f"strip_{b:03d}.pgm", np.concatenate([cond[b], trace.frames[b]], axis=0))
    log.info("%s rollout: %d rollouts x %d frames, %d model calls", mode, B, N_f, trace.total_eval_count)
    return out


def cmd_eval(config: ExperimentConfig, trace_dirs=None, force: bool = False) -> Path:
    """Per-horizon FSD and MSE for every rollout directory; writes ``results.csv``."""
    if trace_dirs is None:
        trace_dirs = sorted(p for p in config.out.glob("rollout_*") if p.is_dir())
    if not trace_dirs:
        raise DataIOError(f"no rollout directories under {config.out}")
    path = config.out / "results.csv"
    _refuse_existing([path], force)
    rows = []
    for d in trace_dirs:
        d = Path(d)
        trace = read_dataset(d / "trace.bin")
        ref = read_dataset(d / "reference.bin")
        if trace.N != ref.N or trace.D != ref.D:
            raise ConfigError(f"{d}: trace {trace.sequences.shape} and reference {ref.sequences.shape} differ")
        hs = config.eval.horizons
        mse = mse_at_horizon(trace.sequences, ref.sequences, hs)
        fsds = fsd_at_horizons(trace.sequences, ref.sequences, hs, bucket=config.eval.fsd_bucket)
        m = trace.metadata
        for h, f, e in zip(hs, fsds, mse):
            rows.append([m["method"], m["n_cln"], m["W"], h, f"{f:.10g}", f"{e:.10g}"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULTS_HEADER)
        w.writerows(rows)
    return path


def cmd_compare(config: ExperimentConfig, force: bool = False) -> Path:
    """Rolling versus standard block diffusion at a matched per-frame budget."""
    if not dataset_path(config).exists() or force:
        cmd_generate(config, force=force)
    dirs = []
    for mode in ("rolling", "standard"):
        ckpt = cmd_train(config, mode=mode, force=force)
        dirs.append(cmd_rollout(config, checkpoint=ckpt, method=mode, force=force))
    path = cmd_eval(config, dirs, force=force)
    summary = summarize(path)
    (config.out / "summary.txt").write_text(summary)
    print(summary, end="")
    return path


def summarize(results_csv) -> str:
    """One line per horizon saying which method has the lower FSD."""
    with open(results_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    by_h: dict[int, dict[str, float]] = {}
    for r in rows:
        by_h.setdefault(int(r["horizon"]), {})[r["method"]] = float(r["fsd"])
    lines = []
    for h in sorted(by_h):
        m = by_h[h]
        if {"rolling", "standard"} <= set(m):
            winner = "rolling" if m["rolling"] < m["standard"] else "standard"
            lines.append(f"horizon {h}: FSD rolling={m['rolling']:.4g} standard={m['standard']:.4g} "
                         f"-> {winner} lower\n")
    return "".join(lines)


# -- entry point ---------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rolling-diffusion", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write the synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="train a denoiser")
    t.add_argument("--mode", choices=["rolling", "standard"])
    t.add_argument("--resume", type=Path, help="checkpoint to resume from")
    r = sub.add_parser("rollout", parents=[common], help="sample test-split continuations")
    r.add_argument("--checkpoint", type=Path)
    r.add_argument("--method", choices=["rolling", "standard"])
    r.add_argument("--no-ema", action="store_true", help="sample with live instead of EMA weights")
    e = sub.add_parser("eval", parents=[common], help="FSD and MSE per horizon")
    e.add_argument("--traces", type=Path, nargs="+", help="rollout directories (default: all)")
    sub.add_parser("compare", parents=[common], help="rolling vs standard end to end")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, args.seed)
        if args.command == "generate":
            cmd_generate(config, force=args.force)
        elif args.command == "train":
            cmd_train(config, mode=args.mode, force=args.force, resume_from=args.resume)
        elif args.command == "rollout":
            cmd_rollout(config, args.checkpoint, args.method, use_ema=False if args.no_ema else None,
                        force=args.force)
        elif args.command == "eval":
            cmd_eval(config, args.traces, force=args.force)
        else:
            cmd_compare(config, force=args.force)
    except RollingDiffusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataIOError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
