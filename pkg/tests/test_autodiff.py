import numpy as np
import pytest
from hypothesis import given, strategies as st

from dlglab import autodiff as ad
from dlglab.autodiff import PRIMITIVES, Graph
from dlglab.errors import ShapeError
from dlglab.gradcheck import central_difference
from dlglab.rng import Rng


def test_sigmoid_zero():
    g = Graph()
    assert ad.sigmoid(g.input(np.zeros(()))).value == 0.5


def test_matmul_identity():
    g = Graph()
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(g.input(a), g.input(np.eye(2)))
    assert np.array_equal(out.value, a)


def test_conv2d_window_sums():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    g = Graph()
    y = ad.conv2d(g.input(x), g.input(np.ones((1, 1, 2, 2)))).value
    oracle = np.array([[x[0, 0, i:i + 2, j:j + 2].sum() for j in range(3)] for i in range(3)])
    assert y.shape == (1, 1, 3, 3)
    assert np.array_equal(y[0, 0], oracle)


def test_conv2d_stride_padding_against_loops():
    rng = Rng(3)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    g = Graph()
    y = ad.conv2d(g.input(x), g.input(w), stride=2, padding=1).value
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    oh, ow = (7 + 2 - 3) // 2 + 1, (6 + 2 - 3) // 2 + 1
    ref = np.zeros((2, 4, oh, ow))
    for n in range(2):
        for o in range(4):
            for i in range(oh):
                for j in range(ow):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
    assert np.max(np.abs(y - ref)) < 1e-12


def test_first_derivative_square():
    g = Graph()
    x = g.input(np.array(3.0))
    (dx,) = ad.backward(g, x * x, [x])
    assert dx == 6.0


def test_second_derivative_cube():
    g = Graph()
    x = g.input(np.array(2.0))
    (dx,) = ad.backward(g, x * x * x, [x], create_graph=True)
    (ddx,) = ad.backward(g, dx, [x])
    assert dx.value == 12.0
    assert ddx == 12.0


def test_conv_sigmoid_sum_matches_fd():
    rng = Rng(7)
    x = rng.standard_normal((1, 1, 6, 6))
    k = rng.standard_normal((1, 1, 3, 3))

    def f(xs):
        g = Graph()
        return float(ad.sum(ad.sigmoid(ad.conv2d(g.input(xs[0]), g.input(k)))).value)

    g = Graph()
    xv = g.input(x)
    (gx,) = ad.backward(g, ad.sum(ad.sigmoid(ad.conv2d(xv, g.input(k)))), [xv])
    fd = central_difference(f, [x], 0)
    gx = gx.ravel()
    rel = np.abs(gx - fd) / np.maximum(np.abs(fd), 1e-300)
    assert np.all((np.abs(gx - fd) <= 1e-8) | (rel <= 1e-5))


def test_non_scalar_output_rejected():
    g = Graph()
    x = g.input(np.ones(3))
    with pytest.raises(ShapeError):
        ad.backward(g, ad.exp(x), [x])


def test_unreachable_wrt_gets_zero():
    g = Graph()
    x = g.input(np.ones((2, 3)))
    z = g.input(np.array(1.5))
    gx, gz = ad.backward(g, z * z, [x, z])
    assert np.array_equal(gx, np.zeros((2, 3)))
    assert gz == 3.0


def test_shape_error_names_op():
    g = Graph()
    with pytest.raises(ShapeError) as info:
        ad.matmul(g.input(np.ones((2, 3))), g.input(np.ones((2, 3))))
    assert info.value.op == "matmul"
    assert (2, 3) in [tuple(s) for s in info.value.shapes]


def test_conv_channel_mismatch():
    g = Graph()
    with pytest.raises(ShapeError) as info:
        ad.conv2d(g.input(np.ones((1, 2, 5, 5))), g.input(np.ones((1, 3, 2, 2))))
    assert info.value.op == "conv2d"


def test_parents_precede_children():
    rng = Rng(0)
    g = Graph()
    x = g.input(rng.standard_normal((2, 3)))
    w = g.input(rng.standard_normal((3, 2)))
    loss = ad.sum(ad.tanh(ad.matmul(x, w)))
    (gx,) = ad.backward(g, loss, [x], create_graph=True)
    ad.backward(g, ad.sum(gx * gx), [w], create_graph=True)
    for k, node in enumerate(g.nodes):
        assert all(p < k for p in node.parents)


def test_tensors_are_read_only():
    g = Graph()
    v = g.input(np.ones(3)).value
    with pytest.raises(ValueError):
        v[0] = 2.0


def test_max_const_passes_gradient_above_eps():
    g = Graph()
    x = g.input(np.array([-1.0, 0.5, 2.0]))
    y = ad.max_const(x, 0.1)
    assert np.array_equal(y.value, [0.1, 0.5, 2.0])
    (gx,) = ad.backward(g, ad.sum(y), [x])
    assert np.array_equal(gx, [0.0, 1.0, 1.0])


def test_avgpool_values():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    g = Graph()
    y = ad.avgpool2(g.input(x)).value
    assert np.array_equal(y[0, 0], [[2.5, 4.5], [10.5, 12.5]])


def _random_program(seed: int):
    """A small random composite over several primitives with a scalar head."""
    rng = Rng(seed)
    g = Graph()
    x = g.input(rng.standard_normal((1, 2, 6, 6)))
    w = g.input(rng.standard_normal((3, 2, 3, 3)))
    m = g.input(rng.standard_normal((8, 4)))
    h = ad.softplus(ad.conv2d(x, w, padding=1))
    h = ad.avgpool2(h)
    h = ad.reshape(ad.sum(h, axis=1), (1, -1))
    h = ad.tanh(h[:, 1:])  # (1, 9) -> (1, 8)
    z = ad.matmul(h, m)
    z = ad.concat([ad.sigmoid(z), ad.exp(ad.scale(z, 0.1))], axis=1)
    return g, [x, w, m], ad.mean(ad.square(z))


@given(st.integers(0, 2**32 - 1))
def test_closure_under_double_backward(seed):
    g, leaves, loss = _random_program(seed)
    grads = ad.backward(g, loss, leaves, create_graph=True)
    second = ad.sum(ad.mul(grads[0], grads[0]))
    ad.backward(g, second, leaves, create_graph=True)
    assert set(g.ops()) <= set(PRIMITIVES) | {ad.INPUT}


@given(st.integers(1, 5), st.integers(1, 5), st.floats(-3, 3))
def test_sum_gradient_is_ones(r, c, shift):
    g = Graph()
    x = g.input(np.full((r, c), shift))
    (gx,) = ad.backward(g, ad.sum(x), [x])
    assert np.array_equal(gx, np.ones((r, c)))


def test_grad_of_helper():
    (gx,) = ad.grad_of(lambda x: ad.sum(x * x), np.array([1.0, -2.0]))
    assert np.array_equal(gx, [2.0, -4.0])
