import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from lacare.metrics import (CSV_COLUMNS, accuracy, aggregate, assd, confusion, dsc, evaluate_case,
                            evaluate_masks, gdsc, hd, read_metrics_csv, sensitivity, specificity,
                            surface_voxels, write_metrics_csv)
from lacare.volume_io import LabelVolume


def pair(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(8, 17, 3))
    a = rng.random(shape) < rng.uniform(0.05, 0.5)
    b = rng.random(shape) < rng.uniform(0.05, 0.5)
    return a, b, tuple(rng.uniform(0.5, 2.0, 3))


def rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


@pytest.mark.parametrize("seed", range(50))
def test_all_metrics_match_brute_force(seed):
    a, b, spacing = pair(seed)
    tp, tn, fp, fn = oracles.counts(a, b)
    c = confusion(a, b)
    assert (c.tp, c.tn, c.fp, c.fn) == (tp, tn, fp, fn)
    assert rel(accuracy(c), 100 * (tp + tn) / a.size) < 1e-6
    assert rel(specificity(c), 100 * tn / (tn + fp)) < 1e-6
    assert rel(sensitivity(c), 100 * tp / (tp + fn)) < 1e-6
    assert rel(dsc(a, b)[0], oracles.dice(a, b)) < 1e-6
    la = a.astype(np.uint8) * 2
    lb = b.astype(np.uint8) * 2
    assert rel(gdsc(la, lb), oracles.generalized_dice(la, lb, (0, 2))) < 1e-6
    want_assd, want_hd = oracles.assd_hd(a, b, spacing)
    assert rel(assd(a, b, spacing), want_assd) < 1e-6
    assert rel(hd(a, b, spacing), want_hd) < 1e-6


def test_surface_block_and_single():
    m = np.zeros((5, 5, 5), bool)
    m[1:4, 1:4, 1:4] = True
    s = {tuple(p) for p in surface_voxels(m)}
    assert len(s) == 26 and (2, 2, 2) not in s
    m[:] = False
    m[2, 2, 2] = True
    assert [tuple(p) for p in surface_voxels(m)] == [(2, 2, 2)]
    assert surface_voxels(np.zeros((3, 3, 3), bool)).shape == (0, 3)
    full = np.ones((3, 3, 3), bool)
    assert len(surface_voxels(full)) == 26  # the grid border counts as outside


@pytest.mark.parametrize("seed", range(5))
def test_surface_matches_enumeration(seed):
    a, _, _ = pair(seed)
    assert {tuple(p) for p in surface_voxels(a)} == set(oracles.surface(a))


def test_single_voxel_distances():
    a = np.zeros((8, 8, 8), bool)
    b = np.zeros((8, 8, 8), bool)
    a[1, 2, 2] = True
    b[4, 2, 2] = True
    assert assd(a, b, (1, 1, 1)) == 3.0 and hd(a, b, (1, 1, 1)) == 3.0
    assert assd(a, b, (0.8, 0.8, 0.8)) == pytest.approx(2.4, abs=1e-12)
    assert hd(a, b, (0.8, 0.8, 0.8)) == pytest.approx(2.4, abs=1e-12)


def test_identical_masks():
    a, _, spacing = pair(3)
    assert dsc(a, a) == (100.0, False)
    assert assd(a, a, spacing) == 0.0 and hd(a, a, spacing) == 0.0
    c = confusion(a, a)
    assert accuracy(c) == specificity(c) == sensitivity(c) == 100.0


def test_empty_prediction():
    gt = np.zeros((4, 4, 4), bool)
    gt[1, 1, 1] = True
    c = confusion(np.zeros_like(gt), gt)
    assert sensitivity(c) == 0.0 and specificity(c) == 100.0
    assert math.isnan(assd(np.zeros_like(gt), gt, (1, 1, 1)))


def test_dsc_cases():
    a = np.zeros(8, bool)
    b = np.zeros(8, bool)
    a[:4] = True
    b[2:6] = True
    assert dsc(a, b) == (50.0, False)
    assert dsc(a, ~a)[0] == 0.0
    assert dsc(np.zeros(3, bool), np.zeros(3, bool)) == (100.0, True)
    with pytest.raises(ValueError):
        dsc(np.zeros(3, bool), np.zeros(4, bool))


def test_gdsc_hand_example():
    gt = np.array([0, 0, 0, 2])
    pred = np.array([0, 0, 2, 2])
    # w0 = 1/9, w2 = 1: num = 2/9 + 1, den = (2 + 3)/9 + (2 + 1) -> 100 * 2 * num / den
    expect = 100 * 2 * (2 / 9 + 1) / (5 / 9 + 3)
    assert gdsc(pred, gt) == pytest.approx(expect, rel=1e-12)
    assert gdsc(gt, gt) == pytest.approx(100.0, rel=1e-12)
    one = np.array([2, 2, 0, 0])
    assert gdsc(np.array([2, 0, 2, 0]), one, classes=(2,)) == dsc(np.array([1, 0, 1, 0]), one)[0]
    assert math.isnan(gdsc(gt, gt, classes=(1,)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_symmetry_order_and_translation(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((8, 8, 8)) < 0.3
    b = rng.random((8, 8, 8)) < 0.3
    if not (a.any() and b.any()):
        return
    sp = (0.7, 0.9, 1.3)
    assert dsc(a, b) == dsc(b, a)
    assert assd(a, b, sp) == pytest.approx(assd(b, a, sp), rel=1e-12)
    assert hd(a, b, sp) == hd(b, a, sp)
    assert hd(a, b, sp) >= assd(a, b, sp) >= 0
    perm = rng.permutation(a.size)
    assert dsc(a.ravel()[perm], b.ravel()[perm]) == dsc(a, b)
    # shared translation inside a larger grid keeps both surfaces intact
    big_a = np.zeros((12, 12, 12), bool)
    big_b = np.zeros((12, 12, 12), bool)
    big_a[2:10, 3:11, 1:9] = a
    big_b[2:10, 3:11, 1:9] = b
    pad_a = np.zeros((12, 12, 12), bool)
    pad_b = np.zeros((12, 12, 12), bool)
    pad_a[1:9, 1:9, 1:9] = a
    pad_b[1:9, 1:9, 1:9] = b
    assert assd(big_a, big_b, sp) == pytest.approx(assd(pad_a, pad_b, sp), rel=1e-12)
    assert hd(big_a, big_b, sp) == pytest.approx(hd(pad_a, pad_b, sp), rel=1e-12)


def test_region_restricts_counts():
    a = np.array([1, 0, 1, 0], bool)
    b = np.array([1, 1, 0, 0], bool)
    c = confusion(a, b, region=np.array([1, 1, 0, 0], bool))
    assert (c.tp, c.tn, c.fp, c.fn) == (1, 0, 0, 1)


# -- case evaluation and CSV ---------------------------------------------------------

def phantom_pairs():
    from lacare.phantom import PhantomConfig, generate_phantom
    out = []
    for seed in range(5):
        _, gt = generate_phantom(PhantomConfig(seed=seed))
        _, other = generate_phantom(PhantomConfig(seed=seed + 50))
        out.append((other, gt))
    return out


def test_evaluate_case_perfect():
    from lacare.phantom import PhantomConfig, generate_phantom
    _, gt = generate_phantom(PhantomConfig(seed=1))
    for task in (1, 2):
        r = evaluate_case(gt, gt, task, "c")
        assert r.dsc == r.gdsc == r.acc == r.spe == r.sen == 100.0
        assert r.assd_mm == r.hd_mm == 0.0 and r.flags == []


def test_evaluate_case_cross_implementation():
    for pred, gt in phantom_pairs()[:2]:
        for task, lab in ((1, 2), (2, 1)):
            r = evaluate_case(pred, gt, task)
            p, g = pred.data == lab, gt.data == lab
            tp, tn, fp, fn = oracles.counts(p, g)
            assert rel(r.acc, 100 * (tp + tn) / p.size) < 1e-6
            assert rel(r.sen, 100 * tp / (tp + fn)) < 1e-6
            assert rel(r.spe, 100 * tn / (tn + fp)) < 1e-6
            assert rel(r.dsc, oracles.dice(p, g)) < 1e-6
            assert rel(r.gdsc, oracles.generalized_dice(p.astype(int), g.astype(int), (0, 1))) < 1e-6


def test_evaluate_case_distances_cross_implementation():
    # nearest-pair oracle is quadratic; check the atrium surfaces of all five pairs
    for pred, gt in phantom_pairs():
        r = evaluate_case(pred, gt, 2)
        want_assd, want_hd = oracles.assd_hd(pred.data == 1, gt.data == 1, gt.spacing)
        assert rel(r.assd_mm, want_assd) < 1e-6 and rel(r.hd_mm, want_hd) < 1e-6


def test_evaluate_case_grid_checks():
    a = LabelVolume.from_array(np.zeros((2, 2, 2), int), (1, 1, 1))
    with pytest.raises(ValueError):
        evaluate_case(a, LabelVolume.from_array(np.zeros((2, 2, 3), int)), 1)
    with pytest.raises(ValueError):
        evaluate_case(a, LabelVolume.from_array(np.zeros((2, 2, 2), int), (1, 1, 2)), 1)
    with pytest.raises(ValueError):
        evaluate_case(a, a, 3)


def test_undefined_flags():
    z = np.zeros((3, 3, 3), bool)
    r = evaluate_masks(z, z, (1, 1, 1))
    assert r.dsc == 100.0
    assert set(r.flags) == {"dsc_both_empty", "sen_undefined", "assd_mm_undefined", "hd_mm_undefined"}


def test_csv_schema(tmp_path):
    a, b, sp = pair(0)
    reports = [evaluate_masks(a, b, sp, "x", 1), evaluate_masks(b, a, sp, "y", 1),
               evaluate_masks(a, a, sp, "x", 2)]
    p = tmp_path / "metrics.csv"
    write_metrics_csv(p, reports)
    lines = p.read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    rows = read_metrics_csv(p)
    assert [r["case_id"] for r in rows] == ["x", "y", "x", "mean", "std", "mean", "std"]
    for r in rows:
        for k in CSV_COLUMNS[2:9]:
            assert r[k] == "nan" or len(r[k].split(".")[1]) == 4
    agg = aggregate(reports)
    mean1 = next(r for r in agg if r.case_id == "mean" and r.task == 1)
    assert mean1.dsc == pytest.approx((reports[0].dsc + reports[1].dsc) / 2)
