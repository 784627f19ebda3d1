import csv
import json
from dataclasses import replace
from pathlib import Path

import pytest

from lacare import cli
from lacare.cascade.train import DESK_AUGMENT, DESK_TRAIN, DESK_UNET
from lacare.config import (SCHEMA, ConfigError, RunConfig, augment_config, load_config,
                           parse_config_text, train_config, unet_config, write_config)

DESK_CFG = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"
TINY_CFG = """\
# tiny end-to-end settings
levels = 2
base_filters = 4
iterations = 3
crop_size = 16, 16, 16
eval_crop = 32, 32, 32
ensemble_size = 2
phantom_n = 3
phantom_n_test = 1
"""


def test_parse_text_rules():
    got = parse_config_text("levels = 1 # trailing comment\n"
                            "\n   # blank and comment lines\ncrop_size = 8,8, 16\n")
    assert got == {"levels": "1", "crop_size": "8,8, 16"}
    for bad in ("nonsense = 3", "levels 3", "levels = 2\nlevels = 3"):
        with pytest.raises(ConfigError):
            parse_config_text(bad)


def test_typed_values_and_errors():
    rc = RunConfig({"crop_size": "16 16 32", "augment": "off", "learning_rate": "1e-3"})
    assert rc["crop_size"] == (16, 16, 32) and rc["augment"] is False and rc["learning_rate"] == 1e-3
    for key, value in (("crop_size", "1,2"), ("augment", "maybe"), ("levels", "x"),
                       ("task_mode", "three_stage"), ("bogus", "1")):
        with pytest.raises(ConfigError):
            RunConfig({key: value})


def test_every_key_has_a_default_and_help():
    rc = RunConfig()
    for k, (parse, default, text) in SCHEMA.items():
        assert rc[k] == default and text


def test_precedence_file_env_override(tmp_path):
    p = tmp_path / "a.cfg"
    p.write_text("seed = 3\nlevels = 2\n")
    rc = load_config(p, environ={"LACARE_SEED": "5", "LACARE_BACKEND": "python", "OTHER": "1"})
    assert rc["seed"] == 5 and rc["levels"] == 2
    rc = load_config(p, environ={"LACARE_SEED": "5"}, overrides={"seed": 9, "levels": None})
    assert rc["seed"] == 9 and rc["levels"] == 2
    with pytest.raises(ConfigError):
        load_config(p, environ={"LACARE_LEVELS": "two"})


def test_write_config_round_trip(tmp_path):
    rc = load_config(None, environ={}, overrides={"crop_size": "16,16,32", "seed": 4})
    write_config(tmp_path / "b.cfg", rc)
    assert load_config(tmp_path / "b.cfg", environ={}) == rc


def test_typed_views_from_desk_preset():
    rc = load_config(DESK_CFG, environ={})
    u = unet_config(rc)
    t = train_config(rc, seed=7)
    assert (u.levels, u.base_filters) == (3, 8)
    assert t.crop_size == (32, 32, 48) and t.iterations == 4000 and t.seed == 7
    t.check(u)
    # the file and the in-code preset describe the same run
    assert u == DESK_UNET and augment_config(rc) == DESK_AUGMENT
    assert replace(t, seed=0, checkpoint_every=0) == DESK_TRAIN


# -- command line ----------------------------------------------------------------

@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY_CFG)
    return str(p)


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_help_exits_zero(capsys):
    for argv in (["--help"], ["train", "--help"], ["phantom", "gen", "--help"]):
        with pytest.raises(SystemExit) as exc:
            cli.main(argv)
        assert exc.value.code == 0
    assert "--threads" in capsys.readouterr().out


def test_usage_errors_exit_one(tmp_path, capsys):
    assert run("train", "--data", tmp_path, "--out", tmp_path / "o", "--bogus") == 1
    assert "--bogus" in capsys.readouterr().err
    assert run("frobnicate") == 1
    assert run("preprocess", "--data", tmp_path / "missing", "--out", tmp_path / "o") == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 1\n")
    assert run("phantom", "gen", "--config", bad, "--out", tmp_path / "o") == 1
    assert "no_such_key" in capsys.readouterr().err
    assert run("phantom", "gen", "--threads", 0, "--out", tmp_path / "o") == 1


def test_runtime_failure_exits_two(tmp_path, monkeypatch, capsys):
    def boom(args, rc):
        raise RuntimeError("disk on fire")
    monkeypatch.setitem(cli.COMMANDS, ("phantom", "gen"), boom)
    assert run("phantom", "gen", "--out", tmp_path / "o") == 2
    assert "disk on fire" in capsys.readouterr().err


def test_end_to_end_subcommands(tmp_path, tiny_cfg):
    data, prep = tmp_path / "data", tmp_path / "prep"
    assert run("phantom", "gen", "--config", tiny_cfg, "--n", 4, "--seed", 7, "--out", data) == 0
    man = json.loads((data / "manifest.json").read_text())
    assert len(man["cases"]) == 4 and man["seed"] == 7
    rec = json.loads((data / "run.json").read_text())
    assert rec["seed"] == 7 and rec["config"]["levels"] == 2 and "numpy" in rec["versions"]
    assert rec["wall_time_s"] >= 0

    assert run("preprocess", "--data", data, "--out", data) == 1  # outputs must go elsewhere
    assert run("preprocess", "--config", tiny_cfg, "--data", data, "--out", prep) == 0
    assert (prep / "spacing_report.csv").exists()

    assert run("augment", "preview", "--config", tiny_cfg, "--data", prep, "--case", "case_000",
               "--out", tmp_path / "aug") == 0
    assert (tmp_path / "aug" / "case_000_aug_image.nii").exists()
    assert run("augment", "preview", "--data", prep, "--case", "nope", "--out", tmp_path / "aug") == 1

    for name in ("m1", "m1b"):
        assert run("train", "--config", tiny_cfg, "--seed", 1, "--data", prep,
                   "--out", tmp_path / name) == 0
    ckpt = tmp_path / "m1" / "final.ckpt"
    assert ckpt.read_bytes() == (tmp_path / "m1b" / "final.ckpt").read_bytes()
    assert run("train", "--config", tiny_cfg, "--seed", 2, "--fold", 1, "--folds", 3,
               "--data", prep, "--out", tmp_path / "m2") == 0

    assert run("predict", "--config", tiny_cfg, "--data", prep, "--model", ckpt,
               "--model", tmp_path / "m2" / "final.ckpt", "--out", tmp_path / "raw") == 0
    assert run("predict", "--data", prep, "--model", tmp_path / "nope.ckpt", "--out", tmp_path / "x") == 1
    assert run("postprocess", "--pred", tmp_path / "raw", "--out", tmp_path / "pp") == 0
    assert sorted(p.name for p in (tmp_path / "pp").glob("*_pred.nii")) == ["case_003_pred.nii"]

    assert run("evaluate", "--pred", tmp_path / "pp", "--gt", data, "--task", 1,
               "--out", tmp_path / "ev") == 0
    rows = list(csv.DictReader(open(tmp_path / "ev" / "metrics.csv")))
    assert [r["case_id"] for r in rows] == ["case_003", "mean", "std"]
    assert {r["task"] for r in rows} == {"1"}


def test_evaluate_rejects_unknown_case(tmp_path, tiny_cfg):
    data = tmp_path / "data"
    assert run("phantom", "gen", "--config", tiny_cfg, "--out", data) == 0
    pred = tmp_path / "pred"
    pred.mkdir()
    (pred / "stranger_pred.nii").write_bytes((data / "case_000_label.nii").read_bytes())
    assert run("evaluate", "--pred", pred, "--gt", data, "--out", tmp_path / "ev") == 1


def test_rerun_from_run_record(tmp_path, tiny_cfg):
    out = tmp_path / "a"
    assert run("phantom", "gen", "--config", tiny_cfg, "--seed", 4, "--out", out) == 0
    rec = json.loads((out / "run.json").read_text())
    argv = [tmp_path / "b" if a == str(out) else a for a in rec["argv"]]
    assert run(*argv) == 0
    for name in ("manifest.json", "case_001_image.nii", "case_002_label.nii"):
        assert (out / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
