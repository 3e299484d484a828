"""Forward traces, gradients, log-softmax, and the SGD trainer."""

import numpy as np
import pytest

import relkit
from relkit.netcore import window_columns

from conftest import central_difference, random_dense_network, two_blob_data


def test_dense_identity_forward():
    net = relkit.Network((relkit.dense(np.eye(2)),), (2,), 2)
    trace = relkit.forward(net, [1.0, 2.0])
    assert np.array_equal(trace.logits, [1.0, 2.0])


def test_max_network_hand_values(max_network):
    # hand evaluation: f(1,0) -> only the x1-x2 and x1+x2 branches fire
    assert relkit.forward(max_network, [1.0, 0.0]).logits[0] == 1.0
    # f(1,1) -> only the x1+x2 branch is active
    assert relkit.forward(max_network, [1.0, 1.0]).logits[0] == 1.0
    assert relkit.forward(max_network, [0.0, 1.0]).logits[0] == 1.0


def test_forward_rejects_bad_shape(max_network):
    with pytest.raises(ValueError, match="input shape"):
        relkit.forward(max_network, [1.0, 2.0, 3.0])


def test_network_shape_mismatch_names_layer():
    with pytest.raises(ValueError, match="layer 1"):
        relkit.Network((relkit.dense(np.ones((2, 3))), relkit.dense(np.ones((4, 1)))),
                       (2,), 1)


def test_forward_rejects_nonfinite():
    net = relkit.Network((relkit.dense(np.eye(2)),), (2,), 2)
    with pytest.raises(ValueError, match="non-finite"):
        relkit.forward(net, [np.nan, 0.0])


def test_trace_replay_is_bit_identical():
    rng = np.random.default_rng(3)
    net = relkit.random_network(
        (2, 6, 6),
        [("conv", 3, 3, 3, 1, 1), ("relu",), ("maxpool", 2, 2, 2, 0),
         ("flatten",), ("dense", 4)],
        seed=5)
    x = rng.random((2, 6, 6))
    first = relkit.forward(net, x)
    second = relkit.forward(net, x)
    for a, b in zip(first.outputs, second.outputs):
        assert np.array_equal(a, b)
    # replaying the recorded input reproduces every recorded activation
    replay = relkit.forward(net, first.input)
    for a, b in zip(replay.outputs, first.outputs):
        assert np.array_equal(a, b)


def test_maxpool_winner_map_consistency():
    rng = np.random.default_rng(7)
    net = relkit.Network((relkit.max_pool((2, 2), stride=2),
                          relkit.flatten(), relkit.dense(np.ones((9, 1)))),
                         (1, 6, 6), 1)
    x = rng.random((1, 6, 6))
    trace = relkit.forward(net, x)
    pooled, winner = trace.outputs[0], trace.aux[0]
    gathered = x[0].ravel()[winner[0].ravel()].reshape(pooled[0].shape)
    assert np.array_equal(gathered, pooled[0])


def test_maxpool_tie_takes_lowest_linear_index():
    x = np.full((1, 2, 2), 0.5)
    cols, geom = window_columns(x, (2, 2), 2, 0)
    net = relkit.Network((relkit.max_pool((2, 2), stride=2), relkit.flatten(),
                          relkit.dense(np.ones((1, 1)))), (1, 2, 2), 1)
    trace = relkit.forward(net, x)
    assert trace.aux[0][0, 0, 0] == 0  # first cell wins the 4-way tie


def test_linear_gradient():
    net = relkit.Network((relkit.dense(np.array([[2.0], [-1.0]])),), (2,), 1)
    for x in ([0.0, 0.0], [3.0, -4.0]):
        assert np.array_equal(relkit.gradient(net, x, 0), [2.0, -1.0])


def test_max_network_gradient_hand_value(max_network):
    # chain rule by hand at (1,0): active branches x1-x2 and x1+x2, both * 0.5
    assert np.array_equal(relkit.gradient(max_network, [1.0, 0.0], 0), [1.0, 0.0])


def test_gradient_class_index_out_of_range(max_network):
    with pytest.raises(ValueError, match="class_index"):
        relkit.gradient(max_network, [1.0, 0.0], 5)


def test_gradient_matches_finite_differences_random_net():
    rng = np.random.default_rng(11)
    net = random_dense_network(rng, [6, 8, 3], zero_bias=False)
    x = rng.standard_normal(6)

    def f(v):
        return relkit.forward(net, v).logits[2]

    fd = central_difference(f, x)
    ad = relkit.gradient(net, x, 2)
    assert np.abs(fd - ad).max() / max(np.abs(ad).max(), 1e-9) < 1e-4


@pytest.mark.parametrize("plan,in_shape", [
    ([("dense", 3)], (5,)),
    ([("conv", 3, 3, 3, 1, 1), ("flatten",), ("dense", 3)], (2, 5, 5)),
    ([("conv", 2, 2, 2, 2, 0), ("relu",), ("flatten",), ("dense", 3)], (1, 6, 6)),
    ([("sumpool", 2, 2, 2, 0), ("flatten",), ("dense", 3)], (2, 4, 4)),
    ([("avgpool", 2, 2, 1, 0), ("flatten",), ("dense", 3)], (2, 4, 4)),
    ([("maxpool", 2, 2, 2, 0), ("flatten",), ("dense", 3)], (2, 4, 4)),
])
def test_gradient_every_layer_kind_against_fd(plan, in_shape):
    rng = np.random.default_rng(hash(str(plan)) % 2 ** 31)
    net = relkit.random_network(in_shape, plan, seed=13)
    x = rng.standard_normal(in_shape)

    def f(v):
        return relkit.forward(net, v).logits[1]

    fd = central_difference(f, x)
    ad = relkit.gradient(net, x, 1)
    assert np.abs(fd - ad).max() / max(np.abs(ad).max(), 1e-9) < 1e-4


def test_positive_homogeneity_zero_bias():
    rng = np.random.default_rng(17)
    for _ in range(10):
        net = random_dense_network(rng, [4, 6, 5, 2], zero_bias=True)
        x = rng.standard_normal(4)
        fx = relkit.forward(net, x).logits
        for t in (0.0, 0.5, 3.0):
            ftx = relkit.forward(net, t * x).logits
            assert np.abs(ftx - t * fx).max() <= 1e-9 * max(np.abs(fx).max(), 1.0)


def test_log_softmax_symmetric_pair():
    out = relkit.log_softmax([0.0, 0.0])
    assert np.allclose(out, np.log(0.5), rtol=0, atol=1e-15)


def test_log_softmax_large_logits_stable():
    out = relkit.log_softmax([1000.0, 0.0])
    assert np.all(np.isfinite(out))
    assert abs(out[0]) < 1e-12


def test_log_softmax_matches_extended_precision():
    logits = np.array([1.0, 2.0, 3.0])
    hi = np.array(logits, dtype=np.longdouble)
    expected = hi - np.log(np.exp(hi).sum())
    out = relkit.log_softmax(logits)
    assert np.abs(out - expected.astype(np.float64)).max() < 1e-12
    assert abs(np.exp(out).sum() - 1.0) < 1e-12


def test_train_zero_learning_rate_keeps_weights():
    rng = np.random.default_rng(19)
    net = random_dense_network(rng, [2, 2])
    data, labels = two_blob_data(40, seed=1)
    config = relkit.TrainConfig(learning_rate=0.0, epochs=3, batch_size=8, seed=0)
    trained = relkit.train_sgd(net, data, labels, config)
    assert np.array_equal(trained.layers[0].weights, net.layers[0].weights)
    assert np.array_equal(trained.layers[0].bias, net.layers[0].bias)


def test_train_two_blobs_reaches_95_percent():
    data, labels = two_blob_data(200, seed=0)
    net = relkit.random_network((2,), [("dense", 2)], seed=1)
    config = relkit.TrainConfig(learning_rate=0.5, epochs=50, batch_size=16, seed=2)
    trained = relkit.train_sgd(net, data, labels, config)
    preds = [np.argmax(relkit.forward(trained, x).logits) for x in data]
    assert np.mean(np.array(preds) == labels) >= 0.95


def test_train_is_deterministic():
    data, labels = two_blob_data(60, seed=3)
    net = relkit.random_network((2,), [("dense", 4), ("relu",), ("dense", 2)], seed=4)
    config = relkit.TrainConfig(learning_rate=0.1, epochs=5, batch_size=8, seed=9)
    first = relkit.train_sgd(net, data, labels, config)
    second = relkit.train_sgd(net, data, labels, config)
    for a, b in zip(first.layers, second.layers):
        if a.weights is not None:
            assert np.array_equal(a.weights, b.weights)
            assert np.array_equal(a.bias, b.bias)


def test_train_rejects_empty_dataset():
    net = relkit.random_network((2,), [("dense", 2)], seed=0)
    with pytest.raises(ValueError, match="empty"):
        relkit.train_sgd(net, np.empty((0, 2)), np.empty((0,), dtype=int),
                         relkit.TrainConfig())


def test_train_rejects_bad_labels():
    net = relkit.random_network((2,), [("dense", 2)], seed=0)
    with pytest.raises(ValueError, match="labels"):
        relkit.train_sgd(net, np.zeros((4, 2)), np.array([0, 1, 2, 0]),
                         relkit.TrainConfig())


def test_train_nonpositive_bias_projection():
    data, labels = two_blob_data(80, seed=5)
    net = relkit.random_network((2,), [("dense", 4), ("relu",), ("dense", 2)], seed=6)
    config = relkit.TrainConfig(learning_rate=0.2, epochs=10, batch_size=8, seed=7,
                                nonpositive_bias=True)
    trained = relkit.train_sgd(net, data, labels, config)
    for layer in trained.layers:
        if layer.bias is not None:
            assert np.all(layer.bias <= 0.0)
