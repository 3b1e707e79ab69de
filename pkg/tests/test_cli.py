import csv
import json
import math

import numpy as np
import pytest

from rolling_diffusion.cli import (
    ExperimentConfig,
    cmd_eval,
    cmd_generate,
    cmd_rollout,
    cmd_train,
    load_config,
    main,
)
from rolling_diffusion.data import SequenceDataset, read_dataset, write_dataset
from rolling_diffusion.errors import ConfigError, DataIOError
from rolling_diffusion.net import load_checkpoint


def tiny(tmp_path, **overrides):
    raw = {
        "data": {"N": 12, "K": 40, "D": 8, "warmup": 100},
        "model": {"hidden": 16, "depth": 2, "emb_dim": 4},
        "train": {"W": 4, "n_cln": 1, "steps": 20, "batch_size": 8, "log_every": 3, "lr": 1e-3},
        "sample": {"num_frames": 6, "evals_per_frame": 2, "offset_stride": 4},
        "eval": {"horizons": [1, 3, 6]},
        "output_dir": str(tmp_path / "run"),
        "seed": 3,
    }
    for key, val in overrides.items():
        if isinstance(val, dict):
            raw[key] = {**raw.get(key, {}), **val}
        else:
            raw[key] = val
    return raw


def write_config(tmp_path, raw, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return path


# -- configuration ---------------------------------------------------------------


def test_defaults_match_desk_scale_experiment():
    c = ExperimentConfig.from_dict({})
    assert (c.data.D, c.train.W, c.train.n_cln, c.train.steps) == (32, 8, 2, 20000)
    assert c.eval.horizons == (8, 24, 48)


@pytest.mark.parametrize("raw", [
    {"bogus": 1},
    {"data": {"NN": 3}},
    {"train": {"W": 4, "n_cln": 4}},
    {"train": {"weighting": "l1"}},
    {"sample": {"boundary_kind": "lin"}},
    {"eval": {"horizons": []}},
    {"data": {"generator": "kolmogorov"}},
    {"seed": "x"},
    {"data": []},
])
def test_config_rejects_bad_documents(raw):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(raw)


def test_config_round_trip_and_seed_override(tmp_path):
    raw = tiny(tmp_path)
    c = load_config(write_config(tmp_path, raw), seed=11)
    assert c.seed == 11
    again = ExperimentConfig.from_dict(json.loads(json.dumps(c.to_dict())))
    assert again == c
    assert c.stage_seed(0) != c.stage_seed(1)


def test_config_errors_for_unreadable_files(tmp_path):
    with pytest.raises(DataIOError):
        load_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_every_train_knob_is_configurable():
    from dataclasses import fields

    from rolling_diffusion.cli import ModelSection, TrainSection
    from rolling_diffusion.train import TrainConfig

    covered = {f.name for f in fields(TrainSection)} | {f.name for f in fields(ModelSection)} | {"seed"}
    assert {f.name for f in fields(TrainConfig)} <= covered


# -- generate --------------------------------------------------------------------


def test_generate_is_byte_identical(tmp_path):
    c1 = ExperimentConfig.from_dict(tiny(tmp_path, output_dir=str(tmp_path / "a")))
    c2 = ExperimentConfig.from_dict(tiny(tmp_path, output_dir=str(tmp_path / "b")))
    p1, p2 = cmd_generate(c1), cmd_generate(c2)
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.with_suffix(".json").read_bytes() == p2.with_suffix(".json").read_bytes()


def test_generate_single_window(tmp_path):
    c = ExperimentConfig.from_dict(tiny(tmp_path, data={"N": 1, "K": 4}))
    ds = read_dataset(cmd_generate(c))
    assert ds.sequences.shape == (1, 4, 8)


def test_generate_header_round_trip(tmp_path):
    c = ExperimentConfig.from_dict(tiny(tmp_path))
    ds = read_dataset(cmd_generate(c))
    meta = ds.metadata
    assert meta["N"] == c.data.N and meta["K"] == c.data.K
    p = meta["params"]
    assert (p["D"], p["F"], p["dt"], p["stride"], p["warmup"]) == (c.data.D, c.data.F, c.data.dt,
                                                                   c.data.stride, c.data.warmup)
    assert meta["seed"] == c.stage_seed(0)
    assert json.loads((c.out / "dataset.json").read_text()) == meta


def test_generate_ar1(tmp_path):
    c = ExperimentConfig.from_dict(tiny(tmp_path, data={"generator": "ar1", "D": 3}))
    ds = read_dataset(cmd_generate(c))
    assert ds.metadata["generator"] == "ar1" and ds.D == 3


def test_generate_refuses_overwrite(tmp_path):
    cfg = write_config(tmp_path, tiny(tmp_path))
    assert main(["generate", "--config", str(cfg)]) == 0
    assert main(["generate", "--config", str(cfg)]) == 4
    assert main(["generate", "--config", str(cfg), "--force"]) == 0


# -- train -----------------------------------------------------------------------


def test_train_requires_dataset(tmp_path):
    cfg = write_config(tmp_path, tiny(tmp_path))
    assert main(["train", "--config", str(cfg)]) == 4


def test_train_zero_steps_and_log_rows(tmp_path):
    c0 = ExperimentConfig.from_dict(tiny(tmp_path, train={"steps": 0}))
    cmd_generate(c0)
    model, opt, _, _ = load_checkpoint(cmd_train(c0))
    assert opt.step == 0
    c = ExperimentConfig.from_dict(tiny(tmp_path, train={"steps": 20, "log_every": 3}))
    ckpt = cmd_train(c, force=True)
    rows = (ckpt.parent / "metrics.csv").read_text().strip().splitlines()
    assert len(rows) - 1 == math.ceil(20 / 3)
    with pytest.raises(DataIOError):
        cmd_train(c)


def test_train_resume_matches_straight_run(tmp_path):
    c = ExperimentConfig.from_dict(tiny(tmp_path, train={"steps": 20, "checkpoint_every": 10}))
    cmd_generate(c)
    straight = load_checkpoint(cmd_train(c))[0]
    ckpt10 = c.out / "train_rolling" / "checkpoint_10.npz"
    resumed = load_checkpoint(cmd_train(c, resume_from=ckpt10))[0]
    assert np.array_equal(straight.params, resumed.params)


def test_train_numerical_abort_exit_code(tmp_path):
    raw = tiny(tmp_path, data={"init_std": 1e150, "warmup": 10})
    cfg = write_config(tmp_path, raw)
    assert main(["generate", "--config", str(cfg)]) == 3


# -- rollout ---------------------------------------------------------------------


@pytest.fixture
def trained(tmp_path):
    c = ExperimentConfig.from_dict(tiny(tmp_path))
    cmd_generate(c)
    cmd_train(c)
    return c


def test_rollout_outputs_and_budget_column(trained):
    c = trained
    out = cmd_rollout(c)
    with open(out / "trace.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:3] == ["rollout", "frame_index", "emission_step"]
    assert len(rows[0]) == 3 + c.data.D
    epf = c.sample.evals_per_frame
    steps = {int(r[1]): int(r[2]) for r in rows[1:]}
    assert steps == {k: epf * k for k in range(c.sample.num_frames)}
    info = json.loads((out / "trace.json").read_text())
    assert info["model_eval_count"] == epf * (c.sample.num_frames - 1)
    assert info["boundary_eval_count"] == epf * (c.train.W - c.train.n_cln)
    trace, ref = read_dataset(out / "trace.bin"), read_dataset(out / "reference.bin")
    assert trace.sequences.shape == ref.sequences.shape
    assert trace.sequences.shape[1:] == (c.sample.num_frames, c.data.D)
    # binary and CSV agree
    assert float(rows[1][3]) == trace.sequences[0, 0, 0]


def test_rollout_zero_frames(tmp_path):
    c = ExperimentConfig.from_dict(tiny(tmp_path, sample={"num_frames": 0}))
    cmd_generate(c)
    cmd_train(c)
    out = cmd_rollout(c)
    assert read_dataset(out / "trace.bin").sequences.shape[1] == 0
    assert len((out / "trace.csv").read_text().strip().splitlines()) == 1


def test_rollout_ema_flag_changes_trace(trained):
    c = trained
    a = read_dataset(cmd_rollout(c) / "trace.bin").sequences
    b = read_dataset(cmd_rollout(c, use_ema=False, force=True) / "trace.bin").sequences
    assert np.max(np.abs(a - b)) > 0


def test_rollout_shape_mismatch(trained, tmp_path):
    raw = tiny(tmp_path, train={"W": 5})
    c = ExperimentConfig.from_dict(raw)
    with pytest.raises(ConfigError):
        cmd_rollout(c, checkpoint=trained.out / "train_rolling" / "checkpoint_final.npz")
    cfg = write_config(tmp_path, raw, "w5.json")
    ck = str(trained.out / "train_rolling" / "checkpoint_final.npz")
    assert main(["rollout", "--config", str(cfg), "--checkpoint", ck]) == 2


def test_rollout_pgm_strips(tmp_path):
    c = ExperimentConfig.from_dict(tiny(tmp_path, sample={"pgm_strips": 2}))
    cmd_generate(c)
    cmd_train(c)
    out = cmd_rollout(c)
    raw = (out / "strip_001.pgm").read_bytes()
    header = b"P5\n%d %d\n255\n" % (c.data.D, c.train.n_cln + c.sample.num_frames)
    assert raw.startswith(header)
    assert len(raw) == len(header) + c.data.D * (c.train.n_cln + c.sample.num_frames)


# -- eval ------------------------------------------------------------------------


def fake_rollout(directory, method, frames, ref=None):
    directory.mkdir(parents=True)
    meta = {"method": method, "n_cln": 2, "W": 8}
    write_dataset(directory / "trace.bin", SequenceDataset(frames, meta))
    write_dataset(directory / "reference.bin", SequenceDataset(frames if ref is None else ref, {}))
    return directory


def test_eval_identity_and_rows(tmp_path):
    c = ExperimentConfig.from_dict(tiny(tmp_path))
    rng = np.random.default_rng(0)
    frames = rng.standard_normal((40, 6, 8))
    a = fake_rollout(c.out / "rollout_a", "a", frames)
    b = fake_rollout(c.out / "rollout_b", "b", rng.standard_normal((40, 6, 8)), frames)
    path = cmd_eval(c)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["method", "n_cln", "W", "horizon", "fsd", "mse"]
    assert [(r["method"], int(r["horizon"])) for r in rows] == [
        ("a", 1), ("a", 3), ("a", 6), ("b", 1), ("b", 3), ("b", 6)]
    for r in rows[:3]:
        assert float(r["mse"]) == 0.0 and float(r["fsd"]) <= 1e-8
    for r in rows[3:]:
        assert float(r["mse"]) > 1.0
    first = path.read_bytes()
    assert cmd_eval(c, [a, b], force=True).read_bytes() == first


def test_eval_missing_horizon_lists_availability(tmp_path):
    c = ExperimentConfig.from_dict(tiny(tmp_path, eval={"horizons": [1, 9]}))
    fake_rollout(c.out / "rollout_a", "a", np.zeros((5, 6, 8)))
    with pytest.raises(ConfigError, match="1..6"):
        cmd_eval(c)


def test_eval_without_traces(tmp_path):
    c = ExperimentConfig.from_dict(tiny(tmp_path))
    with pytest.raises(DataIOError):
        cmd_eval(c)


# -- end to end ------------------------------------------------------------------


def test_compare_pipeline_is_deterministic(tmp_path, capsys):
    outputs = []
    for name in ("first", "second"):
        cfg = write_config(tmp_path, tiny(tmp_path, output_dir=str(tmp_path / name)), f"{name}.json")
        assert main(["compare", "--config", str(cfg)]) == 0
        outputs.append((tmp_path / name / "results.csv").read_bytes())
    assert outputs[0] == outputs[1]
    text = capsys.readouterr().out
    assert "horizon 6" in text
    rows = list(csv.DictReader(outputs[0].decode().splitlines()))
    assert {r["method"] for r in rows} == {"rolling", "standard"}
    assert len(rows) == 6
