import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fragmix.errors import ConfigError, DimensionError
from fragmix.numerics import Tensor, functional as F
from fragmix.numerics import checkpoint, kernels
from fragmix.numerics.optim import Adam, AdamState, adam_step

from oracles import gradcheck, naive_conv2d, naive_matmul

SEEDS = [0, 1, 2, 3, 4]


def rand(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


# -- matmul -------------------------------------------------------------------


def test_matmul_identity_and_dot():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(F.matmul(eye, b).data, b.data)
    assert F.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_matches_loop_oracle_and_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 4, 5), rand(rng, 5, 3)
    np.testing.assert_allclose(F.matmul(a, b).data, naive_matmul(a.data, b.data), rtol=1e-12, atol=1e-12)
    w = rng.standard_normal((4, 3))
    assert gradcheck(lambda: F.sum(F.mul(F.matmul(a, b), w)), [a, b]) < 1e-4


# -- conv2d -------------------------------------------------------------------


def test_conv2d_sum_of_ones():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    assert F.conv2d(x, w).data.tolist() == [[[[9.0]]]]


def test_depthwise_channels_are_independent():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 5, 5))
    w = Tensor(rng.standard_normal((2, 1, 3, 3)))
    x[:, 0] = 0.0
    out = F.conv2d(Tensor(x), w, padding=1, groups=2).data
    assert np.all(out[:, 0] == 0.0)
    assert np.any(out[:, 1] != 0.0)


def test_conv2d_group_errors():
    with pytest.raises(ConfigError):
        F.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 1, 3, 3))), groups=2)
    with pytest.raises(DimensionError):
        F.conv2d(Tensor(np.ones((1, 4, 4, 4))), Tensor(np.ones((4, 1, 3, 3))), groups=2)


@pytest.mark.parametrize(
    "shape_x, shape_w, stride, padding, groups",
    [
        ((2, 3, 5, 5), (4, 3, 3, 3), 1, 1, 1),
        ((1, 4, 6, 5), (4, 1, 3, 3), 1, 1, 4),
        ((2, 4, 7, 6), (6, 2, 3, 3), 2, 1, 2),
        ((1, 2, 5, 4), (3, 2, 1, 1), 1, 0, 1),
        ((1, 3, 8, 8), (2, 3, 3, 3), 2, 0, 1),
    ],
)
def test_conv2d_matches_loop_oracle(shape_x, shape_w, stride, padding, groups):
    rng = np.random.default_rng(7)
    x, w = rng.standard_normal(shape_x), rng.standard_normal(shape_w)
    got = F.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding, groups=groups).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, stride, padding, groups), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rand(rng, 2, 3, 5, 5), rand(rng, 4, 3, 3, 3), rand(rng, 4)
    proj = rng.standard_normal((2, 4, 5, 5))
    assert gradcheck(lambda: F.sum(F.mul(F.conv2d(x, w, b, padding=1), proj)), [x, w, b]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_depthwise_and_strided_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x, w = rand(rng, 2, 4, 5, 5), rand(rng, 4, 1, 3, 3)
    proj = rng.standard_normal((2, 4, 5, 5))
    assert gradcheck(lambda: F.sum(F.mul(F.conv2d(x, w, padding=1, groups=4), proj)), [x, w]) < 1e-4
    w2 = rand(rng, 4, 2, 3, 3)
    proj2 = rng.standard_normal((2, 4, 3, 3))
    loss = lambda: F.sum(F.mul(F.conv2d(x, w2, stride=2, padding=1, groups=2), proj2))  # noqa: E731
    assert gradcheck(loss, [x, w2]) < 1e-4


@pytest.mark.parametrize("stride, pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_im2col_backends_agree(stride, pad):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 7, 6))
    a = kernels.im2col_numpy(x, 3, 3, stride, pad)
    b = kernels.im2col_numba(x, 3, 3, stride, pad)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(
        kernels.col2im_numpy(a, x.shape, 3, 3, stride, pad),
        kernels.col2im_numba(a, x.shape, 3, 3, stride, pad),
        rtol=1e-13,
        atol=1e-13,
    )


# -- elementwise ---------------------------------------------------------------


def test_elementwise_examples():
    np.testing.assert_allclose(F.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8])
    np.testing.assert_array_equal(F.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_array_equal(F.l2_normalize(Tensor([0.0, 0.0]), eps=1e-12).data, [0.0, 0.0])


def test_axis_out_of_range():
    with pytest.raises(DimensionError):
        F.softmax(Tensor(np.ones((2, 3))), axis=2)
    with pytest.raises(DimensionError):
        F.mean(Tensor(np.ones(3)), axis=-2)


def test_two_sided_broadcast_rejected():
    with pytest.raises(DimensionError):
        F.add(Tensor(np.ones((3, 1))), Tensor(np.ones((1, 4))))


ELEMENTWISE = {
    "add": (lambda x, y: F.add(x, y), True),
    "mul": (lambda x, y: F.mul(x, y), True),
    "scale": (lambda x, y: F.scale(x, -2.5), False),
    "relu": (lambda x, y: F.relu(x), False),
    "square": (lambda x, y: F.square(x), False),
    "softmax": (lambda x, y: F.softmax(x, axis=1), False),
    "log_softmax": (lambda x, y: F.log_softmax(x, axis=0), False),
    "log": (lambda x, y: F.log(F.add(F.square(x), 1.0)), False),
    "mean": (lambda x, y: F.mean(x, axis=1), False),
    "l2_normalize": (lambda x, y: F.l2_normalize(x, axis=1), False),
    "reshape_transpose": (lambda x, y: F.transpose(F.reshape(x, (4, 3)), (1, 0)), False),
    "sqrt": (lambda x, y: F.sqrt(F.add(F.square(x), 0.5)), False),
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_elementwise_gradcheck(seed, name):
    op, uses_y = ELEMENTWISE[name]
    rng = np.random.default_rng(seed)
    x, y = rand(rng, 3, 4), rand(rng, 4)
    w = rng.standard_normal(op(x, y).shape)
    assert gradcheck(lambda: F.sum(F.mul(op(x, y), w)), [x, y] if uses_y else [x]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_star_relu_fused_matches_composition(seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 2, 3, 4)
    a = Tensor(np.array(0.8944), requires_grad=True)
    b = Tensor(np.array(-0.4472), requires_grad=True)
    composed = F.add(F.mul(F.square(F.relu(x)), a), b)
    np.testing.assert_allclose(F.star_relu(x, a, b).data, composed.data, rtol=1e-15)
    w = rng.standard_normal(x.shape)
    assert gradcheck(lambda: F.sum(F.mul(F.star_relu(x, a, b), w)), [x, a, b]) < 1e-4


def test_shared_input_accumulates():
    rng = np.random.default_rng(11)
    x = rand(rng, 3, 3)
    # x feeds three consumers, one of them twice
    loss = lambda: F.sum(F.add(F.mul(x, x), F.matmul(x, F.relu(x))))  # noqa: E731
    assert gradcheck(loss, [x]) < 1e-4


def test_backward_visits_each_node_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = F.scale(x, 3.0)
    z = F.add(y, y)
    z2 = F.add(z, z)
    F.sum(z2).backward()
    np.testing.assert_array_equal(x.grad, [12.0])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-50, 50)))
def test_l2_normalize_unit_norm_or_zero(v):
    y = F.l2_normalize(Tensor(v), eps=1e-12).data
    n = np.linalg.norm(v)
    if n > 1e-12:
        assert abs(np.linalg.norm(y) - 1) < 1e-12
    assert np.all(np.isfinite(y))


# -- layer norm -----------------------------------------------------------------


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_array_equal(F.layer_norm(Tensor([1.0, 1.0, 1.0]), 0, one, zero).data, [0, 0, 0])
    got = F.layer_norm(Tensor([1.0, 3.0]), 0, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-15).data
    np.testing.assert_allclose(got, [-1.0, 1.0], atol=1e-12)
    with pytest.raises(ConfigError):
        F.layer_norm(Tensor([1.0, 3.0]), 0, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("shape, axis", [((2, 8), 1), ((2, 3, 2, 2), 1)])
def test_layer_norm_gradcheck(seed, shape, axis):
    rng = np.random.default_rng(seed)
    x = rand(rng, *shape)
    c = shape[axis]
    g, b = rand(rng, c), rand(rng, c)
    w = rng.standard_normal(shape)
    assert gradcheck(lambda: F.sum(F.mul(F.layer_norm(x, axis, g, b, 1e-6), w)), [x, g, b]) < 1e-4


# -- adam -----------------------------------------------------------------------


def test_adam_zero_grad_leaves_params():
    p = np.array([1.0, -2.0])
    adam_step([p], [np.zeros(2)], AdamState(), lr=0.1)
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adam_descends_on_square():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([w], lr=0.1)
    F.sum(F.square(w)).backward()
    opt.step()
    assert w.data[0] < 1.0


def test_adam_converges_on_quadratic():
    w = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    scales = np.array([1.0, 4.0])
    opt = Adam([w], lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        loss = F.sum(F.mul(F.square(w), scales))
        loss.backward()
        opt.step()
    assert float(F.sum(F.mul(F.square(w), scales)).data) < 1e-3


def test_adam_rejects_nonpositive_lr():
    with pytest.raises(ConfigError):
        adam_step([np.zeros(1)], [np.zeros(1)], AdamState(), lr=0.0)


# -- checkpoint -------------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a": rng.standard_normal((3, 4)).astype(np.float32),
        "b": rng.standard_normal(5),
        "c": np.array(7.25, dtype=np.float32),
    }
    path = tmp_path / "p.bin"
    checkpoint.save(path, tensors, {"note": "x"})
    back, meta = checkpoint.load(path)
    assert meta == {"note": "x"}
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()
    # header is human-readable
    text = path.read_bytes()
    assert b'"name": "a"' in text and b'"dtype": "float32"' in text
