import math

import numpy as np
import pytest

from lorasi.tensor import Graph, GraphError, ShapeError, Tensor, tensor

from gradcheck import central_diff, rel_err


def test_matmul_identity():
    g = Graph()
    out = g.matmul(tensor(np.eye(2)), tensor([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(out.value, [[1, 2], [3, 4]])


def test_cross_entropy_uniform_logits():
    g = Graph()
    loss = g.cross_entropy(tensor(np.zeros((1, 4))), [2])
    assert loss.item() == pytest.approx(math.log(4), abs=1e-15)
    assert loss.item() == pytest.approx(1.3863, abs=1e-4)


def test_softmax_symmetric():
    g = Graph()
    np.testing.assert_allclose(g.softmax(tensor([[0.0, 0.0, 0.0]])).value, [[1 / 3] * 3], atol=1e-16)


def test_backward_sum():
    theta = tensor([[1.0, 2.0]], requires_grad=True)
    g = Graph()
    g.backward(g.sum(theta))
    np.testing.assert_array_equal(theta.grad, [[1.0, 1.0]])


def test_backward_squared_norm_matches_fd():
    theta = tensor([[1.0, -2.0]], requires_grad=True)
    g = Graph()
    g.backward(g.sum(g.mul(theta, theta)))
    fd = central_diff(lambda: float(np.sum(theta.value**2)), theta.value)
    np.testing.assert_allclose(fd, [[2.0, -4.0]], atol=1e-8)
    np.testing.assert_allclose(theta.grad, fd, atol=1e-8)


def test_backward_matmul_chain():
    B = tensor([[1.0]], requires_grad=True)
    A = tensor([[1.0]], requires_grad=True)
    g = Graph()
    g.backward(g.sum(g.matmul(B, A)))
    fd_B = central_diff(lambda: float((B.value @ A.value).sum()), B.value)
    fd_A = central_diff(lambda: float((B.value @ A.value).sum()), A.value)
    np.testing.assert_allclose(B.grad, fd_B, atol=1e-9)
    np.testing.assert_allclose(A.grad, fd_A, atol=1e-9)
    np.testing.assert_array_equal(B.grad, [[1.0]])


# Each case builds a scalar from random inputs in [-1, 1] through one primitive.
# A fixed random projection makes the scalar depend on every output entry.
def _case(name, rng):
    W = rng.uniform(-1, 1, size=(3, 4))
    P = rng.uniform(-1, 1, size=(3, 4))
    ids = [2, 0, 4, 2]
    targets = [1, -1, 3]

    def proj(g, t):
        return g.sum(g.mul(t, Tensor(P)))

    if name == "matmul":
        a, b = rng.uniform(-1, 1, (3, 5)), rng.uniform(-1, 1, (5, 4))
        return [a, b], lambda g, x, y: proj(g, g.matmul(x, y))
    if name == "matmul_t":
        a, b = rng.uniform(-1, 1, (3, 5)), rng.uniform(-1, 1, (4, 5))
        return [a, b], lambda g, x, y: proj(g, g.matmul(x, y, transpose_b=True))
    if name == "add":
        return [W, rng.uniform(-1, 1, (3, 4))], lambda g, x, y: proj(g, g.add(x, y))
    if name == "mul":
        return [W, rng.uniform(-1, 1, (3, 4))], lambda g, x, y: proj(g, g.mul(x, y))
    if name == "scale":
        return [W], lambda g, x: proj(g, g.scale(x, -1.7))
    if name == "softmax":
        return [W], lambda g, x: proj(g, g.softmax(x))
    if name == "layer_norm":
        return [W], lambda g, x: proj(g, g.layer_norm(x))
    if name == "cross_entropy":
        return [W], lambda g, x: g.cross_entropy(x, targets)
    if name == "embedding":
        table = rng.uniform(-1, 1, (5, 4))
        P4 = rng.uniform(-1, 1, (4, 4))
        return [table], lambda g, t: g.sum(g.mul(g.embedding(t, ids), Tensor(P4)))
    raise KeyError(name)


PRIMITIVES = ["matmul", "matmul_t", "add", "mul", "scale", "softmax", "layer_norm", "cross_entropy", "embedding"]


@pytest.mark.parametrize("name", PRIMITIVES)
@pytest.mark.parametrize("seed", range(5))
def test_primitive_gradients_match_central_differences(name, seed):
    rng = np.random.default_rng(seed)
    arrays, build = _case(name, rng)
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    g = Graph()
    g.backward(build(g, *leaves))

    def f():
        return build(Graph(), *[Tensor(t.value) for t in leaves]).item()

    for t in leaves:
        fd = central_diff(f, t.value, h=1e-6)
        assert rel_err(t.grad, fd) < 1e-5, name


def test_shared_leaf_accumulates():
    x = tensor([[0.3, -0.2]], requires_grad=True)
    g = Graph()
    y = g.add(g.mul(x, x), x)
    g.backward(g.sum(y))
    np.testing.assert_allclose(x.grad, 2 * x.value + 1)


def test_deterministic_bitwise(rng):
    a = rng.uniform(-1, 1, (6, 5))
    b = rng.uniform(-1, 1, (5, 7))

    def run():
        A, Bt = Tensor(a, True), Tensor(b, True)
        g = Graph()
        out = g.cross_entropy(g.softmax(g.matmul(A, Bt)), [0, 1, 2, 3, 4, 5])
        g.backward(out)
        return out.value.tobytes(), A.grad.tobytes(), Bt.grad.tobytes()

    assert run() == run()


def test_shape_mismatch_names_node():
    g = Graph()
    with pytest.raises(ShapeError, match=r"matmul#0"):
        g.matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match=r"add#0\(residual\)"):
        g.add(tensor(np.ones((2, 3))), tensor(np.ones((3, 2))), name="residual")


def test_backward_before_forward_rejected():
    g = Graph()
    with pytest.raises(GraphError):
        g.backward(tensor([[1.0]], requires_grad=True))


def test_backward_needs_scalar():
    g = Graph()
    x = tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(GraphError):
        g.backward(g.scale(x, 2.0))


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_output_rejected():
    g = Graph()
    with pytest.raises(FloatingPointError, match="scale#0"):
        g.scale(tensor([[1e308]]), 10.0)


def test_masked_softmax_stays_finite():
    g = Graph()
    y = g.softmax(tensor([[0.0, -1e9], [0.0, 0.0]]))
    np.testing.assert_allclose(y.value, [[1.0, 0.0], [0.5, 0.5]])
