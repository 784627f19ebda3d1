import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import TINY_AUGMENT, TINY_TRAIN, TINY_UNET
from lacare.cascade.model import ConfigurationError
from lacare.cascade.train import (LOG_COLUMNS, TrainConfig, load_training_checkpoint, new_training,
                                  read_loss_log, save_training_checkpoint, train, training_batch)
from lacare.nn.optim import TrainingError


def run(cases, out, config=TINY_TRAIN, until=None):
    st = new_training(TINY_UNET, config, TINY_AUGMENT)
    return train(cases, st, out, until=until)


def test_smoke_ten_iterations(prepared, tmp_path):
    train_cases = prepared[0][:2]
    st = run(train_cases, tmp_path)
    assert st.iteration == 10
    rows = read_loss_log(tmp_path / "loss_log.csv")
    assert tuple(rows[0].keys()) == LOG_COLUMNS
    assert [int(r["iteration"]) for r in rows] == list(range(1, 11))
    assert all(math.isfinite(float(r["loss"])) for r in rows)
    for r in rows:
        assert float(r["loss"]) == pytest.approx(float(r["loss_stage1"]) + float(r["loss_stage2"]),
                                                 rel=1e-6)
    back = load_training_checkpoint(tmp_path / "final.ckpt")
    assert back.iteration == 10 and back.config == st.config and back.augment == st.augment
    for a, b in zip(back.model.stages, st.model.stages):
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()
            assert a.ema.shadow[k].tobytes() == b.ema.shadow[k].tobytes()
            assert a.adam.m[k].tobytes() == b.adam.m[k].tobytes()
        assert a.adam.step == b.adam.step == 10


def test_resume_bit_identical(prepared, tmp_path):
    cases = prepared[0][:2]
    cfg = replace(TINY_TRAIN, checkpoint_every=4)
    run(cases, tmp_path / "full", cfg)
    run(cases, tmp_path / "part", cfg, until=4)
    st = load_training_checkpoint(tmp_path / "part" / "ckpt_000004.ckpt")
    assert st.iteration == 4
    # a half-written tail past the checkpoint must be dropped on resume
    with open(tmp_path / "part" / "loss_log.csv", "a") as f:
        f.write("5,9,9,9,0\n")
    train(cases, st, tmp_path / "part")
    full = (tmp_path / "full" / "final.ckpt").read_bytes()
    assert (tmp_path / "part" / "final.ckpt").read_bytes() == full
    assert (tmp_path / "part" / "ckpt_000008.ckpt").read_bytes() == \
        (tmp_path / "full" / "ckpt_000008.ckpt").read_bytes()
    a = [r["loss"] for r in read_loss_log(tmp_path / "full" / "loss_log.csv")]
    b = [r["loss"] for r in read_loss_log(tmp_path / "part" / "loss_log.csv")]
    assert a == b


def test_seed_rerun_reproduces_loss_curve(prepared, tmp_path):
    cases = prepared[0][:2]
    run(cases, tmp_path / "a")
    run(cases, tmp_path / "b")
    la = [r["loss"] for r in read_loss_log(tmp_path / "a" / "loss_log.csv")]
    lb = [r["loss"] for r in read_loss_log(tmp_path / "b" / "loss_log.csv")]
    assert la == lb
    run(cases, tmp_path / "c", replace(TINY_TRAIN, seed=4))
    lc = [r["loss"] for r in read_loss_log(tmp_path / "c" / "loss_log.csv")]
    assert lc != la


def test_training_batch_deterministic_and_centered(prepared):
    cases = prepared[0]
    a = training_batch(cases, TINY_TRAIN, TINY_AUGMENT, 7)
    b = training_batch(cases, TINY_TRAIN, TINY_AUGMENT, 7)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes() and a[2] == b[2]
    assert a[0].shape == (1, 1, 16, 16, 16) and a[1].shape == (1, 16, 16, 16)
    # with augmentation off the crop is centered on the atrium centroid
    from lacare.augment import AugmentConfig
    from lacare.preprocess import CropSpec, crop_array
    img, lab, ids = training_batch(cases, TINY_TRAIN, AugmentConfig(enabled=False), 7)
    case = next(c for c in cases if c.case_id == ids[0])
    spec = CropSpec(case.centroid, TINY_TRAIN.crop_size)
    np.testing.assert_array_equal(img[0, 0], crop_array(case.image, spec))
    np.testing.assert_array_equal(lab[0], crop_array(case.labels, spec))


def test_empty_and_scarless_sets(prepared):
    st = new_training(TINY_UNET, TINY_TRAIN, TINY_AUGMENT)
    with pytest.raises(ConfigurationError):
        train([], st)
    c = prepared[0][0]
    no_scar = replace(c, labels=np.where(c.labels == 2, 1, c.labels).astype(np.uint8))
    with pytest.raises(ConfigurationError):
        train([no_scar], st)


def test_divergence_reports_iteration_and_case(prepared):
    c = prepared[0][0]
    bad = replace(c, image=np.full_like(c.image, np.nan))
    st = new_training(TINY_UNET, TINY_TRAIN, TINY_AUGMENT)
    with pytest.raises(TrainingError, match=r"iteration 0 .*" + c.case_id):
        train([bad], st)


def test_config_checks():
    with pytest.raises(ConfigurationError):
        TrainConfig(iterations=0)
    with pytest.raises(ConfigurationError):
        new_training(TINY_UNET, replace(TINY_TRAIN, crop_size=(15, 16, 16)))
    d = TINY_TRAIN.to_dict()
    assert TrainConfig.from_dict(d) == TINY_TRAIN


def test_checkpoint_rejects_foreign_file(tmp_path):
    from lacare.nn.checkpoint import save_checkpoint
    save_checkpoint(tmp_path / "x.ckpt", {}, {"format": "other"})
    with pytest.raises(ConfigurationError):
        load_training_checkpoint(tmp_path / "x.ckpt")


def test_stage1_only_training(prepared, tmp_path):
    cfg = replace(TINY_TRAIN, iterations=3, task_mode="stage1_only")
    st = run(prepared[0][:1], tmp_path, cfg)
    rows = read_loss_log(tmp_path / "loss_log.csv")
    assert rows[-1]["loss_stage2"] == "nan"
    back = load_training_checkpoint(tmp_path / "final.ckpt")
    assert back.model.stage2 is None and st.model.stage2 is None


def test_save_load_untrained(tmp_path):
    st = new_training(TINY_UNET, TINY_TRAIN)
    save_training_checkpoint(tmp_path / "u.ckpt", st)
    back = load_training_checkpoint(tmp_path / "u.ckpt")
    assert back.iteration == 0 and back.model.stage1.adam.m == {}
