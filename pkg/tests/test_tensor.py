import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pano import tensor as T
from pano.errors import DimensionError, EmptyTargetError, EvaluationError
from pano.tensor import Tensor


def leaf(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


# -- matmul ----------------------------------------------------------------------
def test_matmul_identity():
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    out = T.matmul(Tensor(np.eye(2)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_small_product():
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_of_sum_is_ones_times_b_transpose():
    rng = np.random.default_rng(0)
    a = leaf(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4, 2)))
    T.matmul(a, b).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, atol=1e-12)
    assert T.grad_check(lambda x: T.matmul(x, b).sum(), a, 1e-3) < 1e-3


# -- softmax ---------------------------------------------------------------------
def test_softmax_uniform_row():
    out = T.softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-7)


def test_softmax_shift_invariance_large_values():
    out = T.softmax_rows(Tensor([[1000.0, 1000.0]]))
    np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-7)


def test_softmax_matches_float64_reference():
    out = T.softmax_rows(Tensor(np.array([[1.0, 2.0, 3.0]], dtype=np.float32)))
    e = np.exp(np.array([1.0, 2.0, 3.0], dtype=np.float64))
    np.testing.assert_allclose(out.data[0], e / e.sum(), rtol=1e-6)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)), elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_always_stochastic(x):
    out = T.softmax_rows(Tensor(x.astype(np.float32))).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-5)


# -- remaining op set ------------------------------------------------------------
def test_conv_ones_input_times_two():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.full((1, 1, 1, 1), 2.0))
    np.testing.assert_array_equal(T.conv2d(x, w).data, np.full((1, 1, 3, 3), 2.0))


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 5, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 3, 3))
    for n in range(2):
        for o in range(4):
            for i in range(3):
                for j in range(3):
                    ref[n, o, i, j] = (xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 1, 1))))


def test_batchnorm_eval_identity():
    x = np.random.default_rng(2).normal(size=(2, 3, 4, 4)).astype(np.float32)
    rm, rv = np.zeros(3, np.float32), np.ones(3, np.float32)
    out = T.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, training=False, eps=0.0)
    np.testing.assert_array_equal(out.data, x)


def test_batchnorm_running_stats_update_only_in_training():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(2.0, 3.0, size=(4, 2, 5, 5)))
    rm, rv = np.zeros(2, np.float32), np.ones(2, np.float32)
    T.batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False)
    assert rm.tolist() == [0.0, 0.0] and rv.tolist() == [1.0, 1.0]
    T.batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
    m = x.data.mean(axis=(0, 2, 3))
    v = x.data.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(rm, 0.1 * m, rtol=1e-5)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * v, rtol=1e-5)


def test_relu_and_log_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    np.testing.assert_allclose(T.log(Tensor([1.0, math.e])).data, [0.0, 1.0], atol=1e-6)


def test_upsample_preserves_constants_and_identity_size():
    x = Tensor(np.full((2, 3, 4), 5.0))
    np.testing.assert_allclose(T.upsample_bilinear(x, (8, 12)).data, 5.0, atol=1e-12)
    y = np.random.default_rng(4).normal(size=(2, 3, 4))
    np.testing.assert_allclose(T.upsample_bilinear(Tensor(y), (3, 4)).data, y, atol=1e-12)


def test_mse_value():
    assert T.mse(Tensor([1.0, 2.0]), Tensor([0.0, 0.0])).item() == pytest.approx(2.5)


def test_cross_entropy_uniform_two_classes():
    assert T.cross_entropy(Tensor([0.0, 0.0]), 0).item() == pytest.approx(math.log(2), abs=1e-6)


def test_cross_entropy_ignores_pixels():
    logits = Tensor(np.array([[[[0.0, 5.0]], [[0.0, 0.0]]]]))  # 1×2×1×2
    target = np.array([[[0, 255]]])
    assert T.cross_entropy(logits, target).item() == pytest.approx(math.log(2), abs=1e-6)


def test_cross_entropy_all_ignored_raises():
    with pytest.raises(EmptyTargetError):
        T.cross_entropy(Tensor(np.zeros((1, 3, 2, 2))), np.full((1, 2, 2), 255))


def test_non_finite_result_is_an_error():
    with pytest.raises(EvaluationError):
        T.log(leaf([0.0]))


# -- grad_check ----------------------------------------------------------------------
def test_grad_check_polynomial():
    x = leaf([1.0, 2.0, 3.0])
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])
    assert T.grad_check(lambda t: (t * t).sum(), x, 1e-3) < 1e-4


def test_grad_check_constant_function():
    x = leaf([1.0, 2.0])
    assert T.grad_check(lambda t: Tensor(3.0), x, 1e-3) == 0.0


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        T.grad_check(lambda t: t.sum(), leaf([1.0]), 0.5)


def test_grad_check_non_finite_output():
    with pytest.raises(EvaluationError):
        T.grad_check(lambda t: Tensor(np.inf), leaf([1.0]), 1e-3)


def test_grad_check_detects_a_wrong_rule():
    def bad(x):
        return T._make(x.data * 2.0, "bad", (x,), lambda g: (g * 3.0,)).sum()

    assert T.grad_check(bad, leaf([1.0, 2.0]), 1e-3) > 0.5


# -- tape properties -------------------------------------------------------------------
def test_backward_is_linear_in_the_losses():
    rng = np.random.default_rng(5)
    w = leaf(rng.normal(size=(4, 3)))
    x = Tensor(rng.normal(size=(2, 4)))

    def l1():
        return T.relu(T.matmul(x, w)).sum()

    def l2():
        return T.mse(T.matmul(x, w), Tensor(np.zeros((2, 3))))

    l1().backward()
    g1, w.grad = w.grad.copy(), None
    l2().backward()
    g2, w.grad = w.grad.copy(), None
    (l1() + l2()).backward()
    np.testing.assert_allclose(w.grad, g1 + g2, atol=1e-6)


def test_shared_subexpression_visited_once():
    x = leaf([3.0])
    y = x * x
    z = y + y
    z.sum().backward()
    assert x.grad.tolist() == [12.0]


def test_no_grad_blocks_recording():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2.0
    assert y.node is None and not y.requires_grad


def test_float32_storage_by_default():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert (Tensor(np.ones(2, np.float32)) + Tensor(np.ones(2, np.float32))).dtype == np.float32


# -- serialisation ----------------------------------------------------------------------
def test_serialisation_layout():
    blob = T.tensor_to_bytes(Tensor(np.arange(6, dtype=np.float32).reshape(2, 3)))
    assert blob[:5] == b"PSFK1"
    assert blob[5:17] == (2).to_bytes(4, "little") + (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert blob[17:] == np.arange(6, dtype="<f4").tobytes()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.lists(st.integers(1, 4), min_size=0, max_size=4).map(tuple),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_serialisation_round_trip(a):
    back = T.tensor_from_bytes(T.tensor_to_bytes(Tensor(a)))
    assert back.shape == a.shape
    assert back.data.tobytes() == a.tobytes()


def test_truncated_payload_rejected():
    blob = T.tensor_to_bytes(Tensor(np.ones(4)))
    with pytest.raises(ValueError):
        T.read_tensor(io.BytesIO(blob[:-2]))
