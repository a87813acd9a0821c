import numpy as np
import pytest

from dmtlr.nn import (
    AdamState,
    Concat,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    MaxPool2D,
    ParamSet,
    Sequential,
    ShapeError,
    adam_step,
    gradient_check,
    mse_loss,
    softmax_cross_entropy,
    split,
)


def rng(seed=0):
    return np.random.default_rng(seed)


# -- forward -----------------------------------------------------------------


def test_relu_dense_identity_clamps_negatives():
    layer = Dense(2, 2, "relu")
    layer.params.weights[...] = np.eye(2)
    out, _ = layer.forward(np.array([[-1.0, 2.0]]))
    np.testing.assert_array_equal(out, [[0.0, 2.0]])


def test_conv_1x1_unit_kernel_is_identity():
    layer = Conv2D(1, 1, kernel=1, activation="linear")
    layer.params.weights[...] = 1.0
    x = rng().normal(size=(2, 5, 4, 1))
    out, _ = layer.forward(x)
    np.testing.assert_array_equal(out, x)


def test_conv_3x3_ones_valid_sums_receptive_field():
    layer = Conv2D(1, 1, kernel=3, padding="valid", activation="linear")
    layer.params.weights[...] = 1.0
    out, _ = layer.forward(np.ones((1, 3, 3, 1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv_matches_direct_loop():
    r = rng(3)
    layer = Conv2D(2, 3, kernel=3, padding="same", activation="linear", rng=r)
    layer.params.biases[...] = r.normal(size=3)
    x = r.normal(size=(1, 5, 6, 2))
    out, _ = layer.forward(x)
    w, b = layer.params.weights, layer.params.biases
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 5, 6, 3))
    for i in range(5):
        for j in range(6):
            patch = xp[0, i : i + 3, j : j + 3, :]
            for o in range(3):
                ref[0, i, j, o] = np.sum(patch * w[:, :, :, o]) + b[o]
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_maxpool_picks_block_maximum():
    x = np.arange(16, dtype=float).reshape(1, 4, 4, 1)
    out, _ = MaxPool2D(2).forward(x)
    np.testing.assert_array_equal(out[0, :, :, 0], [[5, 7], [13, 15]])


def test_shape_error_names_layer_and_shapes():
    layer = Dense(4, 3, name="probe")
    with pytest.raises(ShapeError) as exc:
        layer.forward(np.zeros((2, 5)))
    msg = str(exc.value)
    assert "probe" in msg and "(2, 5)" in msg and "4" in msg


def test_conv_rejects_wrong_channel_count():
    with pytest.raises(ShapeError):
        Conv2D(3, 4).forward(np.zeros((1, 8, 8, 1)))


# -- backward ----------------------------------------------------------------


def test_linear_dense_zero_grad_out():
    layer = Dense(4, 3, "linear", rng=rng())
    out, cache = layer.forward(rng(1).normal(size=(5, 4)))
    g = layer.backward(cache, np.zeros_like(out))
    assert not g.any()
    assert not layer.params.weight_grad.any() and not layer.params.bias_grad.any()


def test_concat_backward_partitions_gradient():
    a, b = np.ones((2, 3)), np.zeros((2, 2))
    cat = Concat()
    out, cache = cat.forward([a, b])
    assert out.shape == (2, 5)
    g = rng().normal(size=(2, 5))
    ga, gb = cat.backward(cache, g)
    np.testing.assert_array_equal(ga, g[:, :3])
    np.testing.assert_array_equal(gb, g[:, 3:])


def test_backward_rejects_foreign_cache():
    a, b = Dense(3, 2), Dense(3, 2)
    _, cache = a.forward(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        b.backward(cache, np.zeros((1, 2)))


def test_frozen_params_do_not_accumulate():
    layer = Dense(3, 2, "linear", rng=rng())
    layer.params.trainable = False
    out, cache = layer.forward(np.ones((1, 3)))
    layer.backward(cache, np.ones_like(out))
    assert not layer.params.weight_grad.any()


# -- dropout -----------------------------------------------------------------


def test_dropout_eval_is_identity():
    x = rng().normal(size=(4, 7))
    out, _ = Dropout(0.5).forward(x, "eval")
    np.testing.assert_array_equal(out, x)


def test_dropout_train_rescales_and_preserves_mean():
    x = np.ones((400, 500))
    out, _ = Dropout(0.5).forward(x, "train", rng(2))
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.01


def test_dropout_backward_reuses_mask():
    d = Dropout(0.3)
    x = rng().normal(size=(6, 8))
    out, cache = d.forward(x, "train", rng(5))
    g = d.backward(cache, np.ones_like(x))
    np.testing.assert_array_equal(g == 0, out == 0)


def test_dropout_train_requires_rng():
    with pytest.raises(ValueError):
        Dropout(0.5).forward(np.ones((2, 2)), "train")


# -- loss and optimiser ------------------------------------------------------


def test_mse_examples():
    loss, grad = mse_loss(np.ones((2, 3)), np.ones((2, 3)))
    assert loss == 0.0 and not grad.any()
    loss, _ = mse_loss(np.array([[1.0, 1.0]]), np.array([[0.0, 0.0]]))
    assert loss == 1.0
    with pytest.raises(ValueError):
        mse_loss(np.zeros((0, 2)), np.zeros((0, 2)))


def test_softmax_cross_entropy_uniform_logits():
    loss, grad = softmax_cross_entropy(np.zeros((3, 4)), np.array([0, 1, 2]))
    assert loss == pytest.approx(np.log(4.0), abs=1e-15)
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)


def _scalar(value=0.0):
    return ParamSet(np.array([value]), np.zeros(1))


def test_adam_first_step_scalar_oracle():
    p = _scalar()
    state = AdamState.for_params(p, lr=1e-3)
    p.weight_grad[0] = 1.0
    adam_step(p, state)
    # hand recurrence: m_hat = 1, v_hat = 1, step = lr / (1 + eps)
    assert p.weights[0] == pytest.approx(-0.0009999999900000001, abs=1e-18)
    assert not p.weight_grad.any()


def test_adam_zero_grad_leaves_param():
    p = _scalar(0.25)
    adam_step(p, AdamState.for_params(p))
    assert p.weights[0] == 0.25


def test_adam_constant_grad_strictly_decreases():
    p = _scalar()
    state = AdamState.for_params(p)
    seen = [p.weights[0]]
    for _ in range(2):
        p.weight_grad[0] = 1.0
        adam_step(p, state)
        seen.append(p.weights[0])
    assert seen[0] > seen[1] > seen[2]


def test_adam_rejects_frozen():
    p = _scalar()
    p.trainable = False
    with pytest.raises(ValueError):
        adam_step(p, AdamState.for_params(p))


# -- gradient checks ---------------------------------------------------------


def test_gradcheck_linear_dense():
    r = rng(1)
    net = [Dense(3, 2, "linear", rng=r)]
    assert gradient_check(net, r.normal(size=(4, 3)), r.normal(size=(4, 2))) < 1e-6


def test_gradcheck_relu_dense():
    r = rng(2)
    net = [Dense(4, 3, "relu", rng=r)]
    net[0].params.biases[...] = 0.1
    assert gradient_check(net, r.normal(size=(5, 4)), r.normal(size=(5, 3))) < 1e-5


def test_gradcheck_conv_pool_dense():
    r = rng(3)
    net = Sequential([Conv2D(2, 3, kernel=3, rng=r), MaxPool2D(2), Flatten(), Dense(3 * 3 * 3, 2, "linear", rng=r)])
    x = r.normal(size=(2, 6, 6, 2))
    assert gradient_check(net, x, r.normal(size=(2, 2))) < 1e-5


def test_gradcheck_eval_dropout():
    r = rng(4)
    net = [Dense(3, 4, "linear", rng=r), Dropout(0.5), Dense(4, 2, "linear", rng=r)]
    assert gradient_check(net, r.normal(size=(3, 3)), r.normal(size=(3, 2))) < 1e-6


# -- properties --------------------------------------------------------------


@pytest.mark.parametrize("seed", range(4))
def test_every_layer_kind_matches_finite_differences(seed):
    r = rng(100 + seed)
    h, w = 2 * int(r.integers(2, 4)), 2 * int(r.integers(2, 4))
    cin, cout = int(r.integers(1, 4)), int(r.integers(1, 4))
    padding = ["valid", "same"][seed % 2]
    conv = Conv2D(cin, cout, kernel=3, padding=padding, activation="relu", rng=r)
    conv.params.biases[...] = r.normal(0, 0.1, size=cout)
    oh, ow = (h, w) if padding == "same" else (h - 2, w - 2)
    pool = MaxPool2D(2)
    flat_dim = cout * (oh // 2) * (ow // 2)
    net = Sequential([conv, pool, Flatten(), Dropout(0.3), Dense(flat_dim, 3, "relu", rng=r), Dense(3, 2, "linear", rng=r)])
    x = r.normal(size=(2, h, w, cin))
    assert gradient_check(net, x, r.normal(size=(2, 2))) < 1e-5


@pytest.mark.parametrize("rate", [0.25, 0.5])
def test_dropout_statistics(rate):
    x = np.full((1, 100_000), 3.0)
    out, _ = Dropout(rate).forward(x, "train", rng(7))
    zeroed = np.mean(out == 0.0)
    assert abs(zeroed - rate) < 0.01
    assert abs(out.mean() - 3.0) < 0.01 * 3.0


def test_eval_forward_is_deterministic():
    r = rng(8)
    net = Sequential([Conv2D(1, 2, rng=r), MaxPool2D(2), Flatten(), Dropout(0.5), Dense(8, 1, rng=r)])
    x = r.normal(size=(2, 4, 4, 1))
    np.testing.assert_array_equal(net.forward(x)[0], net.forward(x)[0])


def test_concat_split_round_trip():
    parts = [rng(1).normal(size=(3, 4)), rng(2).normal(size=(3, 1))]
    joined, _ = Concat().forward(parts)
    for a, b in zip(split(joined, [4, 1]), parts):
        np.testing.assert_array_equal(a, b)
