import sys

import numpy as np
import pytest

from lacare.augment import AugmentConfig
from lacare.cascade.train import TrainConfig
from lacare.cascade.unet import UNetConfig
from lacare.dataset import prepare_manifest
from lacare.phantom import generate_cohort

TINY_UNET = UNetConfig(levels=2, base_filters=4)
TINY_TRAIN = TrainConfig(iterations=10, crop_size=(16, 16, 16), eval_crop=(32, 32, 32), seed=3,
                         ema_decay=0.9)
TINY_AUGMENT = AugmentConfig().scaled(0.1)


@pytest.fixture(scope="session")
def cohort_dir(tmp_path_factory):
    """Four default phantoms on disk: three train, one test."""
    out = tmp_path_factory.mktemp("cohort")
    manifest = generate_cohort(5, 4, out, n_test=1, erase_fraction=0.25)
    return out, manifest


@pytest.fixture(scope="session")
def prepared(cohort_dir):
    out, manifest = cohort_dir
    cases, stats, _, _ = prepare_manifest(manifest, str(out))
    split = {c["id"]: c["split"] for c in manifest["cases"]}
    train = [c for c in cases if split[c.case_id] == "train"]
    test = [c for c in cases if split[c.case_id] == "test"]
    return train, test, stats


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
