import numpy as np
import pytest

from outfitcompat import nn
from helpers import naive_conv, naive_dense, numeric_grad, rel_error


# -- dense ---------------------------------------------------------------------


def test_dense_identity():
    out = nn.dense_forward(np.array([[1.0, 2.0]]), np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(out, [[1.0, 2.0]])


def test_dense_hand_sum():
    out = nn.dense_forward(np.array([[1.0, 1.0]]), np.array([[1.0, 1.0]]), np.array([0.5]))
    np.testing.assert_array_equal(out, [[2.5]])


def test_dense_matches_naive_loop():
    rng = np.random.default_rng(0)
    x, W, b = rng.normal(size=(5, 7)), rng.normal(size=(3, 7)), rng.normal(size=3)
    np.testing.assert_allclose(nn.dense_forward(x, W, b), naive_dense(x, W, b), rtol=0, atol=1e-12)
    np.testing.assert_allclose(nn.dense_forward(x, W), naive_dense(x, W, None), rtol=0, atol=1e-12)


def test_dense_shape_error_names_shapes():
    with pytest.raises(nn.ShapeError) as exc:
        nn.dense_forward(np.ones((2, 3)), np.ones((4, 5)))
    assert "5" in str(exc.value) and "(2, 3)" in str(exc.value)


def test_dense_gradients():
    rng = np.random.default_rng(1)
    x, W, b = rng.normal(size=(4, 5)), rng.normal(size=(3, 5)), rng.normal(size=3)
    G = rng.normal(size=(4, 3))

    def f():
        return float(np.sum(G * nn.dense_forward(x, W, b)))

    dx, dW, db = nn.dense_backward(G, x, W, with_bias=True)
    assert rel_error(dx, numeric_grad(f, x)) < 1e-7
    assert rel_error(dW, numeric_grad(f, W)) < 1e-7
    assert rel_error(db, numeric_grad(f, b)) < 1e-7


# -- conv ----------------------------------------------------------------------


def test_conv_identity_kernel():
    x = np.random.default_rng(2).normal(size=(2, 1, 4, 5))
    out = nn.conv2d_forward(x, np.ones((1, 1, 1, 1)), stride=1)
    np.testing.assert_array_equal(out, x)


def test_conv_sum_kernel():
    out = nn.conv2d_forward(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 2)))
    np.testing.assert_array_equal(out, [[[[4.0]]]])


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv_matches_naive_loop(stride):
    rng = np.random.default_rng(stride)
    x, f = rng.normal(size=(2, 3, 9, 8)), rng.normal(size=(4, 3, 3, 3))
    out = nn.conv2d_forward(x, f, stride)
    assert out.shape == (2, 4, (9 - 3) // stride + 1, (8 - 3) // stride + 1)
    np.testing.assert_allclose(out, naive_conv(x, f, stride), rtol=0, atol=1e-12)


def test_conv_kernel_larger_than_input():
    with pytest.raises(ValueError):
        nn.conv2d_forward(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradients(stride):
    rng = np.random.default_rng(10 + stride)
    x, f = rng.normal(size=(2, 2, 7, 6)), rng.normal(size=(3, 2, 3, 3))
    G = rng.normal(size=nn.conv2d_forward(x, f, stride).shape)

    def loss():
        return float(np.sum(G * nn.conv2d_forward(x, f, stride)))

    dx, df = nn.conv2d_backward(G, x, f, stride)
    assert rel_error(dx, numeric_grad(loss, x)) < 1e-6
    assert rel_error(df, numeric_grad(loss, f)) < 1e-6


# -- batch norm ----------------------------------------------------------------


def test_batchnorm_constant_batch_is_zero():
    st = nn.BatchNormState.create(3)
    out, _ = nn.batchnorm_forward(np.full((4, 3), 2.5), st, "train")
    np.testing.assert_array_equal(out, np.zeros((4, 3)))


def test_batchnorm_identity_statistics_in_infer_mode():
    st = nn.BatchNormState.create(3)
    x = np.random.default_rng(3).normal(size=(5, 3))
    out, cache = nn.batchnorm_forward(x, st, "infer")
    assert cache is None
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-15)
    np.testing.assert_allclose(out, x, atol=1e-5 * np.abs(x).max())


def test_batchnorm_train_statistics():
    rng = np.random.default_rng(4)
    x = rng.normal(3.0, 2.0, size=(50, 6))
    out, _ = nn.batchnorm_forward(x, nn.BatchNormState.create(6), "train")
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-10)
    var = x.var(axis=0)
    np.testing.assert_allclose(out.var(axis=0), var / (var + 1e-5), rtol=1e-12)


def test_batchnorm_running_averages():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(8, 2))
    st = nn.BatchNormState.create(2)
    nn.batchnorm_forward(x, st, "train")
    np.testing.assert_allclose(st.running_mean, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(st.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1))
    before = st.running_mean.copy()
    nn.batchnorm_forward(x, st, "train", update_running=False)
    np.testing.assert_array_equal(st.running_mean, before)


def test_batchnorm_batch_of_one_rejected():
    with pytest.raises(ValueError):
        nn.batchnorm_forward(np.ones((1, 3)), nn.BatchNormState.create(3), "train")


def test_batchnorm_infer_is_pure():
    rng = np.random.default_rng(6)
    st = nn.BatchNormState(rng.normal(size=4), rng.normal(size=4), rng.normal(size=4),
                           rng.uniform(0.5, 2, 4), mode="infer")
    x = rng.normal(size=(3, 4))
    a, _ = nn.batchnorm_forward(x, st)
    b, _ = nn.batchnorm_forward(x, st)
    np.testing.assert_array_equal(a, b)


def test_batchnorm_state_validation():
    with pytest.raises(ValueError):
        nn.BatchNormState(np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), eps=0.0)
    with pytest.raises(ValueError):
        nn.BatchNormState(np.ones(2), np.zeros(2), np.zeros(2), -np.ones(2))


def test_batchnorm_gradients():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(6, 4))
    st = nn.BatchNormState(rng.uniform(0.5, 2, 4), rng.normal(size=4), np.zeros(4), np.ones(4))
    G = rng.normal(size=(6, 4))

    def f():
        return float(np.sum(G * nn.batchnorm_forward(x, st, "train", update_running=False)[0]))

    _, cache = nn.batchnorm_forward(x, st, "train", update_running=False)
    dx, dscale, dshift = nn.batchnorm_backward(G, cache)
    assert rel_error(dx, numeric_grad(f, x)) < 1e-6
    assert rel_error(dscale, numeric_grad(f, st.scale)) < 1e-7
    assert rel_error(dshift, numeric_grad(f, st.shift)) < 1e-7


# -- activations -----------------------------------------------------------------


def test_sigmoid_symmetry_point():
    assert nn.sigmoid(0.0) == 0.5


def test_relu():
    np.testing.assert_array_equal(nn.relu(np.array([-1.0, 2.0])), [0.0, 2.0])
    np.testing.assert_array_equal(nn.activation(np.array([-1.0, 2.0]), "relu"), [0.0, 2.0])


def test_sigmoid_extreme_arguments():
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        lo = nn.sigmoid(-800.0)
        hi = nn.sigmoid(800.0)
    assert 0.0 < lo <= 1e-300
    assert hi == 1.0
    assert np.isfinite(lo)


def test_sigmoid_matches_naive_form():
    x = np.linspace(-30, 30, 121)
    np.testing.assert_allclose(nn.sigmoid(x), 1 / (1 + np.exp(-x)), rtol=1e-14)


def test_activation_unknown_kind():
    with pytest.raises(ValueError):
        nn.activation(np.zeros(2), "tanh")


def test_sigmoid_gradient_hand_derivative():
    # loss = sigmoid(w.x): d/dw = s(1-s) x
    rng = np.random.default_rng(8)
    w, x = rng.normal(size=5), rng.normal(size=5)

    def f():
        return float(nn.sigmoid(w @ x))

    s = nn.sigmoid(w @ x)
    np.testing.assert_allclose(numeric_grad(f, w), s * (1 - s) * x, rtol=1e-7)


def test_relu_backward():
    x = np.array([-1.0, 0.5, 2.0])
    np.testing.assert_array_equal(nn.relu_backward(np.ones(3), x), [0.0, 1.0, 1.0])


def test_sum_loss_gradient_is_ones():
    x = np.random.default_rng(9).normal(size=(3, 2))
    np.testing.assert_allclose(numeric_grad(lambda: float(np.sum(x)), x), np.ones((3, 2)), rtol=1e-9)


# -- Adam ------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    new, st = nn.adam_step(p, {"w": np.zeros(2)}, nn.AdamState())
    np.testing.assert_array_equal(new["w"], p["w"])
    assert st.step_count == 1


def test_adam_first_step_by_hand():
    st = nn.AdamState(lr=0.1)
    new, st2 = nn.adam_step({"w": np.array(0.0)}, {"w": np.array(1.0)}, st)
    m_hat = (0.1 * 1.0) / (1 - 0.9)
    v_hat = (0.001 * 1.0) / (1 - 0.999)
    assert new["w"] == pytest.approx(-0.1 * m_hat / (np.sqrt(v_hat) + 1e-8), rel=1e-14)
    assert st2.first_moment["w"] == pytest.approx(0.1)
    assert st2.second_moment["w"] == pytest.approx(0.001)


def test_adam_constant_gradient_step_approaches_lr():
    params, st = {"w": np.zeros(3)}, nn.AdamState(lr=1e-3)
    g = {"w": np.array([0.5, -2.0, 7.0])}
    prev = params["w"]
    for _ in range(200):
        params, st = nn.adam_step(params, g, st)
        step = params["w"] - prev
        prev = params["w"]
    assert st.step_count == 200
    np.testing.assert_allclose(np.abs(step), 1e-3, rtol=1e-6)
    np.testing.assert_array_equal(np.sign(step), -np.sign(g["w"]))


def test_adam_is_pure_and_deterministic():
    rng = np.random.default_rng(11)
    p = {"a": rng.normal(size=3), "b": rng.normal(size=(2, 2))}
    g = {"a": rng.normal(size=3), "b": rng.normal(size=(2, 2))}
    st = nn.AdamState()
    p1, s1 = nn.adam_step(p, g, st)
    p2, s2 = nn.adam_step(p, g, st)
    assert st.step_count == 0 and not st.first_moment
    for k in p:
        np.testing.assert_array_equal(p1[k], p2[k])
        np.testing.assert_array_equal(s1.second_moment[k], s2.second_moment[k])
        assert np.all(s1.second_moment[k] >= 0)


def test_adam_defaults():
    st = nn.AdamState()
    assert (st.lr, st.beta1, st.beta2) == (1e-4, 0.9, 0.999)


def test_adam_rejects_non_finite_gradient():
    p = {"fc0.W": np.zeros(2), "readout.w": np.zeros(2)}
    with pytest.raises(FloatingPointError, match="readout.w"):
        nn.adam_step(p, {"fc0.W": np.zeros(2), "readout.w": np.array([0.0, np.nan])}, nn.AdamState())


def test_adam_rejects_shape_mismatch():
    with pytest.raises(nn.ShapeError):
        nn.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, nn.AdamState())


def test_as_tensor_rejects_nan():
    with pytest.raises(ValueError):
        nn.as_tensor([1.0, np.inf])
    assert nn.as_tensor([[1, 2]]).dtype == np.float64
