import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metalearn import autodiff as ad
from metalearn.autodiff import DomainError, GraphError, ShapeError, Tensor, grad
from oracles import central_difference, relative_error
from op_cases import OPS, cases


def analytic_and_numeric(loss_fn, arrays):
    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    analytic = [g.data for g in grad(loss_fn(*inputs), inputs)]

    def value(*xs):
        with ad.no_grad():
            return loss_fn(*[Tensor(x) for x in xs]).item()

    return analytic, central_difference(value, arrays)


def test_matmul_identity():
    out = ad.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1, 0], [0, 1]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_mean():
    assert ad.mean(Tensor([2, 4, 6])).item() == 4


def test_matmul_sum_gradient_matches_finite_differences(rng):
    A, B = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    analytic, numeric = analytic_and_numeric(lambda a, b: ad.sum(ad.matmul(a, b)), [A, B])
    assert relative_error(analytic[0], numeric[0]) < 1e-6


@pytest.mark.parametrize("name", sorted(OPS))
def test_each_op_gradient(name):
    for case_name, loss_fn, arrays in cases(len(OPS) * 4, seed=7):
        if case_name != name:
            continue
        analytic, numeric = analytic_and_numeric(loss_fn, arrays)
        for a, n in zip(analytic, numeric):
            assert relative_error(a, n) < 1e-5, name


def test_mse_zero():
    assert ad.mse_loss(Tensor([1, 2]), Tensor([1, 2])).item() == 0


def test_cross_entropy_uniform_logits():
    for target in range(5):
        assert ad.cross_entropy(Tensor([0, 0, 0, 0, 0]), target).item() == pytest.approx(math.log(5), abs=1e-15)


def test_cross_entropy_gradient_is_softmax_minus_onehot(rng):
    logits = rng.uniform(-2, 2, (4, 3))
    target = np.array([0, 2, 1, 2])
    z = Tensor(logits, requires_grad=True)
    (g,) = grad(ad.cross_entropy(z, target), [z])
    onehot = np.eye(3)[target]
    np.testing.assert_allclose(g.data, (ad.softmax(logits) - onehot) / 4, atol=1e-15)
    _, numeric = analytic_and_numeric(lambda t: ad.cross_entropy(t, target), [logits])
    assert relative_error(g.data, numeric[0]) < 1e-6


def test_cross_entropy_errors():
    with pytest.raises(IndexError):
        ad.cross_entropy(Tensor([[0.0, 1.0]]), [2])
    with pytest.raises(ShapeError):
        ad.cross_entropy(Tensor([[0.0, 1.0]]), [0, 1])


def test_grad_of_square_and_second_derivative():
    for x0 in (-1.5, 0.0, 3.0):
        x = Tensor(x0, requires_grad=True)
        (g,) = grad(x * x, [x], create_graph=True)
        assert g.item() == 2 * x0
        assert g.requires_grad
        (gg,) = grad(g, [x])
        assert gg.item() == 2


def test_grad_without_create_graph_is_detached():
    x = Tensor(3.0, requires_grad=True)
    (g,) = grad(x * x, [x])
    assert not g.requires_grad


def two_layer_tanh_mse(w1, b1, w2, b2, X, Y):
    h = ad.tanh(ad.add(ad.matmul(X, w1), b1))
    return ad.mse_loss(ad.add(ad.matmul(h, w2), b2), Y)


def test_two_layer_tanh_network_gradient(rng):
    X, Y = Tensor(rng.uniform(-2, 2, (6, 3))), Tensor(rng.uniform(-2, 2, (6, 2)))
    params = [rng.uniform(-1, 1, (3, 5)), rng.uniform(-1, 1, 5), rng.uniform(-1, 1, (5, 2)), rng.uniform(-1, 1, 2)]
    analytic, numeric = analytic_and_numeric(lambda *p: two_layer_tanh_mse(*p, X, Y), params)
    for a, n in zip(analytic, numeric):
        assert relative_error(a, n) < 1e-5


def test_backward_accumulates_and_doubles():
    x = Tensor(2.0, requires_grad=True)
    y = 3 * x
    y.backward()
    assert x.grad.item() == 3
    y.backward()
    assert x.grad.item() == 6
    x.zero_grad()
    assert x.grad is None


def test_backward_matches_functional_grad(rng):
    w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    loss = ad.sum(ad.tanh(ad.add(ad.matmul(Tensor(rng.standard_normal((4, 3))), w), b)))
    gw, gb = grad(loss, [w, b])
    loss.backward()
    np.testing.assert_array_equal(w.grad.data, gw.data)
    np.testing.assert_array_equal(b.grad.data, gb.data)


def test_grad_does_not_touch_accumulators():
    x = Tensor(1.0, requires_grad=True)
    grad(x * x, [x])
    assert x.grad is None


def test_detach():
    x = Tensor([1.0, 2.0], requires_grad=True)
    d = ad.detach(x)
    assert not d.requires_grad
    np.testing.assert_array_equal(d.data, x.data)
    # the path through detach contributes nothing
    (g,) = grad(ad.sum(x * ad.detach(x)), [x])
    np.testing.assert_array_equal(g.data, [1.0, 2.0])


def test_unreachable_inputs_get_exact_zeros():
    x = Tensor([1.0, 2.0], requires_grad=True)
    z = Tensor([[3.0]], requires_grad=True)
    gx, gz = grad(ad.sum(x * x), [x, z])
    np.testing.assert_array_equal(gz.data, np.zeros((1, 1)))
    np.testing.assert_array_equal(gx.data, [2.0, 4.0])


def test_grad_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        grad(x * x, [x])
    with pytest.raises(GraphError):
        grad(Tensor(1.0), [x])
    with pytest.raises(GraphError):
        grad(ad.sum(x), [Tensor(1.0)])


def test_shape_and_domain_errors():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2,\)"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(2))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        Tensor([1.0]) / Tensor([0.0])
    with pytest.raises(ShapeError):
        ad.reshape(Tensor(np.ones(6)), (4,))


def test_relu_subgradient_at_zero():
    x = Tensor([0.0, 1.0, -1.0], requires_grad=True)
    (g,) = grad(ad.sum(ad.relu(x)), [x])
    np.testing.assert_array_equal(g.data, [0.0, 1.0, 0.0])


def test_requires_grad_propagation():
    a, b = Tensor(1.0), Tensor(2.0, requires_grad=True)
    assert not (a * a).requires_grad
    assert (a * b).requires_grad
    with ad.no_grad():
        assert not (b * b).requires_grad


def test_hessian_vector_product_tanh_square(rng):
    W = Tensor(rng.standard_normal((4, 3)))
    x0, v = rng.standard_normal((3, 1)), rng.standard_normal((3, 1))

    def f(x):
        h = ad.tanh(ad.matmul(W, x))
        return ad.sum(h * h)

    x = Tensor(x0, requires_grad=True)
    (g,) = grad(f(x), [x], create_graph=True)
    (hv,) = grad(ad.sum(g * Tensor(v)), [x])

    def gradient_at(pt):
        t = Tensor(pt, requires_grad=True)
        return grad(f(t), [t])[0].data

    h = 1e-5
    numeric = (gradient_at(x0 + h * v) - gradient_at(x0 - h * v)) / (2 * h)
    assert relative_error(hv.data, numeric) < 1e-4


def test_third_derivative():
    x = Tensor(1.5, requires_grad=True)
    (g1,) = grad(x ** 4, [x], create_graph=True)
    (g2,) = grad(g1, [x], create_graph=True)
    (g3,) = grad(g2, [x])
    assert g3.item() == pytest.approx(24 * 1.5)


def test_topological_order_parents_first(rng):
    x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    y = ad.sum(ad.tanh(x @ x) * x)
    order = ad.topological_order(y)
    position = {id(t): i for i, t in enumerate(order)}
    for t in order:
        for p in t.node.parents:
            if p.node is not None:
                assert position[id(p)] < position[id(t)]
    assert order[-1] is y


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_broadcast_row_gradient_sums_over_rows(m, n, seed):
    r = np.random.default_rng(seed)
    a = Tensor(r.uniform(-2, 2, (m, n)), requires_grad=True)
    b = Tensor(r.uniform(-2, 2, n), requires_grad=True)
    w = r.uniform(-2, 2, (m, n))
    ga, gb = grad(ad.sum((a + b) * Tensor(w)), [a, b])
    np.testing.assert_allclose(ga.data, w)
    np.testing.assert_allclose(gb.data, w.sum(axis=0))
