import numpy as np
import pytest

from conftest import TINY_TRAIN, TINY_UNET
from lacare.cascade.infer import compose_prediction, predict, segment_case
from lacare.cascade.model import STAGE1_ONLY, ConfigurationError, build_cascade, forward_cascade
from lacare.nn import softmax_channels


def model(seed, mode="two_stage"):
    return build_cascade(TINY_UNET, np.random.default_rng(seed), task_mode=mode)


def image(seed=0, shape=(8, 8, 8)):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


def test_repeated_member_equals_single():
    m = model(0)
    x = image()
    single = predict(m, x)
    five = predict([m] * 5, x)
    for a, b in zip(single, five):
        assert a.tobytes() == b.tobytes()


def test_uses_ema_weights():
    m = model(1)
    for k in m.stage1.ema.shadow:
        m.stage1.ema.shadow[k] = m.stage1.ema.shadow[k] * 0.5
    x = image()
    p1, _ = predict(m, x)
    l1, _ = forward_cascade(m, x[None, None], weights="ema")
    np.testing.assert_array_equal(p1, softmax_channels(l1)[0])
    p1_live, _ = predict(m, x, weights="live")
    assert not np.array_equal(p1, p1_live)


def test_mean_of_members():
    a, b = model(2), model(3)
    x = image(1)
    pa, pb = predict(a, x), predict(b, x)
    pab = predict([a, b], x)
    for i in range(2):
        np.testing.assert_allclose(pab[i], (pa[i].astype(np.float64) + pb[i]) / 2, rtol=1e-6, atol=1e-7)
        np.testing.assert_allclose(pab[i].sum(axis=0), 1.0, atol=1e-6)


def test_mixed_modes_rejected():
    with pytest.raises(ConfigurationError):
        predict([model(0), model(1, STAGE1_ONLY)], image())
    with pytest.raises(ConfigurationError):
        predict([], image())


def test_stage1_only_prediction():
    p1, p2 = predict(model(0, STAGE1_ONLY), image())
    assert p1.shape == (2, 8, 8, 8) and p2 is None


def test_batched_input_shape():
    p1, p2 = predict(model(0), image()[None, None])
    assert p1.shape == p2.shape == (1, 2, 8, 8, 8)


def test_compose_rules():
    p1 = np.zeros((2, 1, 1, 4))
    p2 = np.zeros((2, 1, 1, 4))
    p1[1, 0, 0] = [0.9, 0.9, 0.1, 0.1]
    p1[0] = 1 - p1[1]
    p2[1, 0, 0] = [0.8, 0.2, 0.8, 0.5]  # 0.5 is a tie and goes to channel 0
    p2[0] = 1 - p2[1]
    np.testing.assert_array_equal(compose_prediction(p1, p2)[0, 0], [2, 1, 2, 0])
    np.testing.assert_array_equal(compose_prediction(p1, None)[0, 0], [1, 1, 0, 0])


def test_segment_case_native_grid(prepared):
    _, test, _ = prepared
    case = test[0]
    native, lab, placement = segment_case([model(0)], case, TINY_TRAIN.eval_crop)
    assert native.header.dims == case.native_header.dims
    assert native.spacing == case.native_header.spacing
    assert lab.shape == TINY_TRAIN.eval_crop
    assert set(np.unique(native.data)) <= {0, 1, 2}
    raw, _, _ = segment_case([model(0)], case, TINY_TRAIN.eval_crop, postprocess=False)
    # postprocessing only removes voxels
    assert np.all((native.data > 0) <= (raw.data > 0))
