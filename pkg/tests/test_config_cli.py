import json

import numpy as np
import pytest

from impdiff.cli import EXIT_CHECK, EXIT_OK, EXIT_VALIDATION, main
from impdiff.config import ConfigError, apply_override, default_dict, from_dict, load, substream_seed

from oracles import L_DELTA_64

TINY = ["--set", "train.iterations=20", "--set", "train.width=16", "--set", "train.depth=2",
        "--set", "train.posterior_draws=2", "--set", "train.cls_draws=2", "--set", "train.log_every=10",
        "--set", "train.eval_points=32", "--set", "data.n_train=200", "--set", "data.n_test=100",
        "--set", "sample.n=20", "--set", "sample.steps=8", "--set", "condense.ipc=[1]",
        "--set", "condense.repeats=1", "--set", "classifier.draws=4"]


def test_default_config_roundtrip():
    cfg = from_dict(default_dict())
    assert from_dict(json.loads(cfg.to_json())).to_json() == cfg.to_json()
    assert cfg.train.delta == 6.4 and cfg.corruption["mode"] == "noisy"


@pytest.mark.parametrize("bad", [
    {"unknown": 1},
    {"train": {"lr": 1e-3, "mystery": 2}},
    {"corruption": {"mode": "noisy", "params": {"eps": 0.4}}},
    {"corruption": {"mode": "partial", "params": {"mode": "random", "q": 1.5}}},
    {"corruption": {"mode": "teleport", "params": {}}},
    {"schedule": {"kind": "VE", "params": {"sigma_min": 0.01, "sigma_max": 50.0}, "sigma_data": 0.5}},
    {"classifier": {"delta": -1.0, "draws": 16}},
    {"condense": {"ipc": [0], "repeats": 1}},
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigError):
        from_dict(bad)


def test_overrides_parse_json_values():
    d = apply_override(default_dict(), "train.iterations=7")
    assert d["train"]["iterations"] == 7
    d = apply_override(d, 'corruption={"mode": "semi", "params": {"labeled_fraction": 0.1}}')
    assert from_dict(d).corruption["mode"] == "semi"
    with pytest.raises(ConfigError):
        apply_override(d, "no_equals_sign")


def test_load_applies_seed_and_out(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 3}))
    cfg = load(path, ["train.lr=0.01"], seed=9, out=str(tmp_path / "o"))
    assert cfg.seed == 9 and cfg.train.lr == 0.01 and cfg.output_dir.endswith("o")
    path.write_text("[1]")
    with pytest.raises(ConfigError):
        load(path)


def test_substreams_independent_and_stable():
    assert substream_seed(0, "data") == substream_seed(0, "data")
    assert len({substream_seed(0, n) for n in ("data", "test", "train")}) == 3
    assert substream_seed(0, "data") != substream_seed(1, "data")


def test_cli_plan_timesteps(tmp_path, capsys):
    assert main(["plan-timesteps", "--out", str(tmp_path)]) == EXIT_OK
    l, r, res = map(float, capsys.readouterr().out.splitlines()[1].split(","))
    assert l == pytest.approx(L_DELTA_64, abs=1e-12) and r - l == pytest.approx(6.4) and res < 1e-10


def test_cli_validation_exit_code(tmp_path, capsys):
    assert main(["make-data", "--out", str(tmp_path), "--set", "train.bogus=1"]) == EXIT_VALIDATION
    record = json.loads(capsys.readouterr().err)
    assert record["error"] == "validation" and record["exit_code"] == EXIT_VALIDATION


def test_cli_check_failure_exit_code(tmp_path, monkeypatch):
    import impdiff.cli as cli
    monkeypatch.setattr(cli, "POOLED_SCORE_TOL", 0.0)
    assert main(["verify-pooled-score", "--out", str(tmp_path), "--n", "20"]) == EXIT_CHECK


def test_cli_verify_pooled_score(tmp_path):
    assert main(["verify-pooled-score", "--out", str(tmp_path), "--n", "50"]) == EXIT_OK
    assert (tmp_path / "pooled_score.csv").read_text().splitlines()[1].endswith(",1")


def test_cli_pipeline_writes_artifacts(tmp_path, capsys):
    out = str(tmp_path / "run")
    for cmd in (["make-data"], ["corrupt-labels"], ["train"], ["classify"], ["sample"], ["eval"],
                ["condense"], ["report", "--points", "10"]):
        assert main(cmd + ["--out", out, *TINY]) == EXIT_OK, cmd
    names = {p.name for p in (tmp_path / "run").iterdir()}
    assert {"train.csv", "model.ckpt", "train_log.csv", "train_log.png", "samples.csv", "samples.png",
            "gen_metrics.csv", "condense.csv", "predictions.csv", "err_diagnostic.csv", "err_violin.png",
            "config.resolved.json", "version.json"} <= names
    samples = np.loadtxt(tmp_path / "run" / "samples.csv", delimiter=",", skiprows=1)
    assert samples.shape == (40, 3)


def test_run_reuses_its_own_artifacts(tmp_path, monkeypatch):
    import impdiff.cli as cli
    calls = []
    real = cli.train
    monkeypatch.setattr(cli, "train", lambda *a, **k: calls.append(1) or real(*a, **k))
    overrides = [a for a in TINY if a != "--set"]
    run = cli.Run(load(out=str(tmp_path), overrides=overrides))
    run.train()
    run.samples()
    run.train()
    assert len(calls) == 1
    # a fresh Run on the same config reuses the checkpoint; a changed config retrains
    cli.Run(load(out=str(tmp_path), overrides=overrides)).train()
    assert len(calls) == 1
    cli.Run(load(out=str(tmp_path), overrides=overrides + ["train.lr=0.002"])).train()
    assert len(calls) == 2
