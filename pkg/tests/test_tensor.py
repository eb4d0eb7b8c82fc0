import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from divkd import tensor as tn
from divkd.tensor import BackwardError, ShapeError, Tensor, grad_check


def rand(rng, *shape, requires_grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad)


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((a @ Tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_sum_of_zeros():
    assert tn.tsum(Tensor(np.zeros((3, 4)))).item() == 0.0


def test_matmul_dot_product():
    # 1*3 + 2*4
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        tn.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_log_of_nonpositive_raises():
    with pytest.raises(ValueError, match="non-positive"):
        tn.log(Tensor([1.0, 0.0]))


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)), True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square():
    x = Tensor([1.0, 2.0, 3.0], True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_without_grad_tensors_is_noop():
    x = Tensor([1.0, 2.0])
    y = (x * x).sum()
    y.backward()
    assert x.grad is None


def test_backward_requires_scalar_root():
    x = Tensor([1.0, 2.0], True)
    with pytest.raises(BackwardError, match="scalar"):
        (x * 2.0).backward()


def test_second_backward_errors_until_reset():
    x = Tensor([1.0, 2.0], True)
    y = (x * x).sum()
    y.backward()
    with pytest.raises(BackwardError):
        y.backward()
    with pytest.raises(BackwardError, match="zero_grad"):
        (x * 3.0).sum().backward()
    tn.zero_grad([x])
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_detach_blocks_gradient():
    x = Tensor([1.0, 2.0], True)
    y = (x.detach() * x).sum()
    y.backward()
    np.testing.assert_array_equal(x.grad, [1.0, 2.0])


def test_shared_subexpression_accumulates():
    x = Tensor([3.0], True)
    y = x * 2.0
    (y + y * y).sum().backward()
    # d/dx (2x + 4x^2) = 2 + 8x
    np.testing.assert_allclose(x.grad, [26.0])


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], True)
    with tn.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_abs_subgradient_zero_at_kink():
    x = Tensor([-2.0, 0.0, 3.0], True)
    tn.tabs(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [-1.0, 0.0, 1.0])


def test_max_gradient_goes_to_first_tie():
    x = Tensor([[1.0, 5.0, 5.0]], True)
    tn.tmax(x, axis=1).sum().backward()
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_grad_check_sum_exact():
    x = rand(np.random.default_rng(1), 3, 5)
    assert grad_check(lambda t: t.sum(), x, eps=1e-4) <= 1e-8


# every differentiable primitive, checked at 10 random points
def _positive(rng, *shape):
    return Tensor(rng.uniform(0.5, 2.0, shape), True)


PRIMITIVES = {
    "add": lambda x, c: (x + c).sum(),
    "sub": lambda x, c: ((c - x) * c).sum(),
    "mul": lambda x, c: (x * c * x).sum(),
    "div": lambda x, c: (c / (x * x + 1.0)).sum(),
    "matmul": lambda x, c: (tn.matmul(x, tn.transpose(c)) ** 2).sum(),
    "exp": lambda x, c: (tn.exp(x) * c).sum(),
    "log": lambda x, c: (tn.log(x * x + 0.5) * c).sum(),
    "abs": lambda x, c: (tn.tabs(x) * c).sum(),
    "sum_axis": lambda x, c: (tn.tsum(x, axis=1) ** 2).sum(),
    "mean_axis": lambda x, c: (tn.mean(x * c, axis=0) ** 2).sum(),
    "max_axis": lambda x, c: (tn.tmax(x * c, axis=1) ** 2).sum(),
    "concat": lambda x, c: (tn.concat([x, x * c], axis=1) ** 2).sum(),
    "reshape": lambda x, c: ((tn.reshape(x, (x.size,)) * tn.reshape(c, (c.size,))).sum()) ** 2,
    "transpose": lambda x, c: (tn.transpose(x) @ c).sum() ** 2,
    "broadcast": lambda x, c: (tn.broadcast_to(tn.tsum(x, 0, keepdims=True), c.shape) * c).sum(),
    "relu": lambda x, c: (tn.relu(x) * c).sum(),
    "xlogx": lambda x, c: (tn.xlogx(x * x + 0.1) * c).sum(),
    "softmax": lambda x, c: (tn.softmax(x, -1) * c).sum(),
    "log_softmax": lambda x, c: (tn.log_softmax(x, -1) * c).sum(),
    "take_columns": lambda x, c: (tn.take_columns(x, [0, 2, 1]) ** 2).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    f = PRIMITIVES[name]
    worst = 0.0
    for _ in range(10):
        x = rand(rng, 3, 4)
        c = Tensor(rng.standard_normal((3, 4)))
        if name in ("abs", "relu") and np.min(np.abs(x.data)) < 1e-3:
            continue  # non-smooth locus
        worst = max(worst, grad_check(lambda t: f(t, c), x, eps=1e-6))
    assert worst <= 1e-4, worst


def test_conv2d_and_pool_gradients():
    rng = np.random.default_rng(3)
    x = rand(rng, 2, 3, 6, 6)
    w = rand(rng, 4, 3, 3, 3)
    b = rand(rng, 4)
    c = Tensor(rng.standard_normal((2, 4, 3, 3)))

    def f(_):
        return (tn.maxpool2(tn.conv2d(x, w, b, stride=1, padding=1)) * c).sum()

    for p in (x, w, b):
        assert grad_check(f, p, eps=1e-6) <= 1e-4
    c2 = Tensor(rng.standard_normal((2, 4, 3, 3)))
    assert grad_check(lambda _: (tn.conv2d(x, w, None, stride=2, padding=1) * c2).sum(), w, eps=1e-6) <= 1e-4


def test_batchnorm_train_gradient():
    rng = np.random.default_rng(4)
    x = rand(rng, 4, 3, 2, 2)
    g = Tensor(rng.uniform(0.5, 1.5, 3), True)
    b = rand(rng, 3)
    c = Tensor(rng.standard_normal((4, 3, 2, 2)))

    def f(_):
        return (tn.batchnorm_train(x, g, b)[0] * c).sum()

    for p in (x, g, b):
        assert grad_check(f, p, eps=1e-6) <= 1e-4


def test_conv2d_matches_direct_sum():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 1, 8, 8))
    w = rng.standard_normal((1, 1, 3, 3))
    out = tn.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
    assert out.shape == (1, 1, 8, 8)
    xp = np.pad(x[0, 0], 1)
    ref = np.array([[np.sum(xp[i:i + 3, j:j + 3] * w[0, 0]) for j in range(8)] for i in range(8)])
    np.testing.assert_allclose(out[0, 0], ref, rtol=0, atol=1e-12)


def test_conv2d_hand_example():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    w = np.ones((1, 1, 3, 3))
    out = tn.conv2d(Tensor(x), Tensor(w), None, 1, 1).data[0, 0]
    # centre pixel sees the whole image; corner (0,0) sees 0+1+3+4
    assert out[1, 1] == 36.0
    assert out[0, 0] == 8.0


def test_forward_determinism():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    a = tn.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
    b = tn.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
    assert np.array_equal(a, b)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)),
              elements=st.floats(-100, 100, allow_nan=False)),
       st.integers(1, 3))
def test_broadcast_reduce_round_trip(x, reps):
    target = (reps,) + x.shape
    out = tn.tsum(tn.broadcast_to(Tensor(x), target)).item()
    np.testing.assert_allclose(out, x.sum() * reps, rtol=1e-12, atol=1e-9)


def test_tensor_container_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    tensors = {"a.weight": rng.standard_normal((2, 3)), "scalar": np.array(1.5), "name ü": rng.standard_normal(4)}
    tn.save_tensors(tmp_path / "t.bin", tensors)
    back = tn.load_tensors(tmp_path / "t.bin")
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()


def test_tensor_container_layout():
    raw = tn.dumps_tensors({"w": np.array([[1.0, 2.0]])})
    import struct
    assert struct.unpack("<I", raw[:4]) == (1,)
    assert struct.unpack("<I", raw[4:8]) == (1,) and raw[8:9] == b"w"
    assert struct.unpack("<I", raw[9:13]) == (2,)
    assert struct.unpack("<2Q", raw[13:29]) == (1, 2)
    assert struct.unpack("<2d", raw[29:]) == (1.0, 2.0)


def test_tensor_container_truncated():
    raw = tn.dumps_tensors({"w": np.ones(3)})
    with pytest.raises(tn.FormatError):
        tn.loads_tensors(raw[:-4])
