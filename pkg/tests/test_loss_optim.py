import numpy as np
import pytest

from gradcheck import max_rel_err
from lacare.nn import (AdamState, CheckpointError, EmaState, LossError, TrainingError, adam_step,
                       ema_update, generalized_dice_loss, load_checkpoint, save_checkpoint,
                       softmax_channels)


def onehot(idx, classes):
    return np.moveaxis(np.eye(classes)[idx], -1, 1)


def brute_gdl(p, g):
    """The loss written out as explicit per-class loops."""
    L = p.shape[1]
    num = den = 0.0
    for l in range(L):
        vol = g[:, l].sum()
        if vol == 0:
            continue
        w = 1.0 / vol ** 2
        num += w * (g[:, l] * p[:, l]).sum()
        den += w * (g[:, l] + p[:, l]).sum()
    return 1 - 2 * num / den


def test_gdl_perfect_prediction():
    t = onehot(np.random.default_rng(0).integers(0, 3, (2, 3, 3, 3)), 3)
    loss, _ = generalized_dice_loss(t, t)
    assert loss == pytest.approx(0.0, abs=1e-15)


def test_gdl_hand_example():
    target = np.zeros((1, 2, 1, 1, 2))
    target[0, 0, 0, 0, 0] = 1
    target[0, 1, 0, 0, 1] = 1
    probs = np.full_like(target, 0.5)
    loss, _ = generalized_dice_loss(probs, target)
    assert loss == 0.5


def test_gdl_matches_loops():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p = softmax_channels(rng.standard_normal((2, 3, 3, 3, 3)))
        g = onehot(rng.integers(0, 3, (2, 3, 3, 3)), 3)
        assert generalized_dice_loss(p, g)[0] == pytest.approx(brute_gdl(p, g), rel=1e-12)


def test_gdl_empty_class_dropped():
    rng = np.random.default_rng(2)
    p = softmax_channels(rng.standard_normal((1, 3, 2, 2, 2)))
    g = onehot(rng.integers(0, 2, (1, 2, 2, 2)), 3)  # class 2 absent
    loss, grad = generalized_dice_loss(p, g)
    assert np.isfinite(loss)
    assert not grad[:, 2].any()
    assert loss == pytest.approx(brute_gdl(p, g), rel=1e-12)


def test_gdl_all_empty():
    with pytest.raises(LossError):
        generalized_dice_loss(np.full((1, 2, 2, 2, 2), 0.5), np.zeros((1, 2, 2, 2, 2)))


def test_gdl_shape_mismatch():
    with pytest.raises(LossError):
        generalized_dice_loss(np.zeros((1, 2, 2, 2, 2)), np.zeros((1, 3, 2, 2, 2)))


def test_gdl_gradients():
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng(700 + trial)
        p = rng.uniform(0.05, 0.95, (2, 3, 2, 3, 2))
        g = onehot(rng.integers(0, 3, (2, 2, 3, 2)), 3)

        def f():
            return generalized_dice_loss(p, g)[0]

        worst = max(worst, max_rel_err(f, p, generalized_dice_loss(p, g)[1]))
    assert worst < 1e-5


# -- Adam ----------------------------------------------------------------------------

def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    st = AdamState()
    adam_step(p, {"w": np.zeros(2)}, st)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_magnitude():
    p = {"w": np.array([0.0])}
    st = AdamState(learning_rate=5e-4)
    adam_step(p, {"w": np.array([1.0])}, st)
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert p["w"][0] == pytest.approx(-5e-4 / (1 + 1e-8), rel=1e-12)
    assert st.step == 1


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(3)
    grads = rng.standard_normal((10, 4))
    p = {"w": np.zeros(4)}
    st = AdamState(learning_rate=0.01)
    w, m, v = np.zeros(4), np.zeros(4), np.zeros(4)
    for t, g in enumerate(grads, 1):
        adam_step(p, {"w": g.copy()}, st)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"], w, rtol=1e-12)


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(4)
        p = {"w": rng.standard_normal(5).astype(np.float32)}
        st = AdamState()
        for _ in range(20):
            adam_step(p, {"w": rng.standard_normal(5).astype(np.float32)}, st)
        return p["w"].tobytes()
    assert run() == run()


def test_adam_non_finite():
    with pytest.raises(TrainingError, match="iteration 17"):
        adam_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, AdamState(), iteration=17)


# -- EMA ------------------------------------------------------------------------------

def test_ema_decay_zero():
    e = EmaState.like({"w": np.zeros(3)}, 0.0)
    ema_update(e, {"w": np.array([1.0, 2.0, 3.0])})
    np.testing.assert_array_equal(e.shadow["w"], [1, 2, 3])


def test_ema_two_updates():
    e = EmaState.like({"w": np.zeros(1)}, 0.5)
    ema_update(e, {"w": np.ones(1)})
    ema_update(e, {"w": np.ones(1)})
    assert e.shadow["w"][0] == 0.75


def test_ema_monotone_convergence():
    e = EmaState.like({"w": np.zeros(1)}, 0.9)
    prev = 0.0
    for _ in range(200):
        ema_update(e, {"w": np.full(1, 2.0)})
        assert prev <= e.shadow["w"][0] <= 2.0
        prev = e.shadow["w"][0]
    assert prev == pytest.approx(2.0, rel=1e-8)


def test_ema_bad_decay_and_shape():
    with pytest.raises(ValueError):
        EmaState.like({"w": np.zeros(1)}, 1.0)
    e = EmaState.like({"w": np.zeros(2)}, 0.5)
    with pytest.raises(ValueError):
        ema_update(e, {"w": np.zeros(3)})


# -- checkpoint container -------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    arrays = {"a": rng.standard_normal((2, 3)).astype(np.float32), "b": np.arange(4, dtype=np.int64),
              "c": rng.standard_normal(5)}
    meta = {"iteration": 3, "nested": {"x": [1, 2]}}
    p = tmp_path / "x.ckpt"
    save_checkpoint(p, arrays, meta)
    back, m = load_checkpoint(p)
    assert m == meta
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype and back[k].tobytes() == arrays[k].tobytes()
    q = tmp_path / "y.ckpt"
    save_checkpoint(q, dict(reversed(list(arrays.items()))), meta)
    assert p.read_bytes() == q.read_bytes()


def test_checkpoint_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOTACKPT" + bytes(12))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_checkpoint_truncated(tmp_path):
    p = tmp_path / "t.ckpt"
    save_checkpoint(p, {"a": np.zeros(100)}, {})
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
