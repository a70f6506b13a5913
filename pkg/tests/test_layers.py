import numpy as np
import pytest

from ris_estimation import layers
from ris_estimation.errors import InputError
from ris_estimation.layers import MacCounter


def test_conv2d_same_padding_preserves_spatial_shape():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 8, 4, 2))
    out, _ = layers.conv2d_forward(x, rng.standard_normal((3, 3, 2, 5)), np.zeros(5))
    assert out.shape == (2, 8, 4, 5)


def test_conv2d_matches_direct_sum():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 3, 3, 2))
    kernel = rng.standard_normal((3, 3, 2, 1))
    out, _ = layers.conv2d_forward(x, kernel, np.array([0.5]))

    padded = np.pad(x[0], ((1, 1), (1, 1), (0, 0)))
    expected = np.sum(padded[0:3, 0:3, :] * kernel[:, :, :, 0]) + 0.5
    assert out[0, 0, 0, 0] == pytest.approx(expected)


def test_conv2d_counts_macs():
    counter = MacCounter()
    x = np.zeros((3, 8, 4, 2))
    layers.conv2d_forward(x, np.zeros((3, 3, 2, 32)), np.zeros(32), counter, "expert.1")
    assert counter.by_module["expert.1"] == 3 * 8 * 4 * 9 * 2 * 32
    assert counter.touched("expert") == ["expert.1"]


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(InputError):
        layers.conv2d_forward(np.zeros((1, 2, 2, 3)), np.zeros((3, 3, 2, 1)), np.zeros(1))


def test_batchnorm_train_returns_stats_without_mutating_buffers():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 2, 2, 3)) * 3 + 1
    rm, rv = np.zeros(3), np.ones(3)
    out, _, stats = layers.batchnorm_forward(x, np.ones(3), np.zeros(3), rm, rv, train=True)

    np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-12)
    np.testing.assert_allclose(stats.mean, x.mean(axis=(0, 1, 2)))
    assert stats.count == 16
    assert rm.tolist() == [0, 0, 0] and rv.tolist() == [1, 1, 1]


def test_batchnorm_eval_uses_running_statistics():
    x = np.full((1, 1, 1, 2), 3.0)
    out, _, stats = layers.batchnorm_forward(
        x, np.ones(2), np.zeros(2), np.array([1.0, 3.0]), np.array([4.0, 1.0]), train=False, eps=0.0
    )
    assert stats is None
    np.testing.assert_allclose(out[0, 0, 0], [1.0, 0.0])


def test_update_running_momentum():
    np.testing.assert_allclose(layers.update_running(np.array([1.0]), np.array([3.0]), 0.9), [1.2])


def test_relu_backward_masks_inactive():
    out = layers.relu_forward(np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(layers.relu_backward(np.array([5.0, 5.0]), out), [0.0, 5.0])


def test_dense_counts_macs():
    counter = MacCounter()
    layers.dense_forward(np.zeros((2, 16)), np.zeros((16, 3)), np.zeros(3), counter, "classifier")
    assert counter.total == 2 * 16 * 3


def test_softmax_is_stable_and_normalized():
    p = layers.softmax(np.array([[1000.0, 1000.0, -1000.0], [0.0, 1.0, 2.0]]))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(p[0], [0.5, 0.5, 0.0])


def test_glorot_uniform_bounds():
    w = layers.glorot_uniform((100, 50), 100, 50, np.random.default_rng(0))
    assert np.max(np.abs(w)) <= np.sqrt(6.0 / 150)
