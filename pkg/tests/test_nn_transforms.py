import json

import numpy as np
import pytest

from metalearn import autodiff as ad
from metalearn.autodiff import ShapeError, Tensor, grad
from metalearn.nn import (MLP, Linear, Module, clone_module, export_parameters, import_parameters,
                          load_parameters, save_parameters, update_module)
from metalearn.transforms import (Identity, KroneckerLinear, MetaCurvature, ParameterUpdate, Scale,
                                  kronecker_apply, make_transforms, parameter_update)
from oracles import dense_kronecker


class Scalar(Module):
    def __init__(self, value):
        super().__init__()
        self.theta = Tensor(value, requires_grad=True)

    def forward(self, x=None):
        return self.theta


class WeightBias(Module):
    def __init__(self):
        super().__init__()
        self.weight = Tensor(np.ones((3, 2)), requires_grad=True)
        self.bias = Tensor(np.ones(3), requires_grad=True)


def test_parameter_order_is_depth_first():
    net = MLP([2, 3, 1], random_state=0)
    assert [n for n, _ in net.named_parameters()] == ["0.weight", "0.bias", "2.weight", "2.bias"]
    assert all(p.requires_grad for p in net.parameters())
    assert net.head_names == {"2.weight", "2.bias"}


def test_same_seed_same_initialization():
    a, b = MLP([3, 5, 2], random_state=9), MLP([3, 5, 2], random_state=9)
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_linear_forward(rng):
    layer = Linear(3, 2, rng)
    x = rng.standard_normal((4, 3))
    np.testing.assert_allclose(layer(Tensor(x)).data, x @ layer.weight.data.T + layer.bias.data)


def test_clone_values_and_independence(rng):
    net = MLP([2, 4, 1], random_state=1)
    clone = clone_module(net)
    for p, q in zip(net.parameters(), clone.parameters()):
        np.testing.assert_array_equal(p.data, q.data)
        assert p is not q
    before = [p.data.copy() for p in net.parameters()]
    update_module(clone, [Tensor(np.ones(p.shape)) for p in clone.parameters()])
    for p, b in zip(net.parameters(), before):
        np.testing.assert_array_equal(p.data, b)


def test_clone_gradient_flows_to_original(rng):
    net = MLP([2, 4, 1], "tanh", random_state=1)
    X, Y = Tensor(rng.standard_normal((5, 2))), Tensor(rng.standard_normal((5, 1)))
    g_orig = grad(ad.mse_loss(net(X), Y), net.parameters())
    clone = clone_module(net)
    ad.mse_loss(clone(X), Y).backward()
    for p, g in zip(net.parameters(), g_orig):
        assert np.max(np.abs(p.grad.data - g.data)) < 1e-12
        assert np.any(p.grad.data != 0)


def test_grad_of_clone_sum_is_ones():
    m = WeightBias()
    clone = clone_module(m)
    (g,) = grad(ad.sum(clone.weight), [m.weight])
    np.testing.assert_array_equal(g.data, np.ones((3, 2)))


def test_update_module_examples():
    m = Scalar(1.0)
    update_module(m, [Tensor(-0.2)])
    assert m.theta.item() == pytest.approx(0.8)

    m = Scalar(2.0)
    original = m.theta
    update_module(m, [Tensor(0.0)])
    assert m.theta.item() == 2.0
    assert m.theta.node.op == "add"

    m = Scalar(1.0)
    original = m.theta
    update_module(m, [Tensor(0.5)])
    update_module(m, [Tensor(-0.25)])
    assert m.theta.item() == 1.25
    (g,) = grad(m.theta, [original])
    assert g.item() == 1.0


def test_update_module_errors():
    m = WeightBias()
    with pytest.raises(ValueError):
        update_module(m, [Tensor(np.zeros((3, 2)))])
    with pytest.raises(ShapeError):
        update_module(m, [Tensor(np.zeros((3, 2))), Tensor(np.zeros(2))])


def test_update_differentiability_quadratic():
    theta, alpha = 1.0, 0.1
    m = Scalar(theta)
    clone = clone_module(m)
    loss = clone.theta * clone.theta
    (g,) = grad(loss, [clone.theta], create_graph=True)
    update_module(clone, [g * -alpha])
    (meta,) = grad(clone.theta * clone.theta, [m.theta])
    assert abs(meta.item() - 2 * theta * (1 - 2 * alpha) ** 2) < 1e-10


def test_parameter_update_examples():
    x = Tensor(3.0, requires_grad=True)
    (u,) = parameter_update(x * x, [x], [Scale((), 0.5)])
    assert u.item() == 3.0

    m = WeightBias()
    loss = ad.sum(m.weight * m.weight) + ad.sum(m.bias)
    raw = grad(loss, m.parameters())
    for kind in ("identity", "kronecker", "metacurvature"):
        updates = parameter_update(loss, m.parameters(), make_transforms(m, kind))
        for u, r in zip(updates, raw):
            np.testing.assert_array_equal(u.data, r.data)
    before = [p.data.copy() for p in m.parameters()]
    parameter_update(loss, m.parameters(), make_transforms(m, "scale", 2.0))
    for p, b in zip(m.parameters(), before):
        np.testing.assert_array_equal(p.data, b)


def test_parameter_update_create_graph_attaches_transform():
    x = Tensor(3.0, requires_grad=True)
    s = Scale((), 0.5)
    (u,) = parameter_update(x * x, [x], [s], create_graph=True)
    (gs,) = grad(u, [s.scale])
    assert gs.item() == 6.0


def test_make_transforms_shapes():
    m = WeightBias()
    w, b = make_transforms(m, "kronecker")
    assert (w.left.shape, w.right.shape, w.bias.shape) == ((3, 3), (2, 2), (3, 2))
    assert (b.left.shape, b.right.shape, b.bias.shape) == ((3, 3), (1, 1), (3, 1))
    for t in make_transforms(m, "scale", 0.5):
        assert np.all(t.scale.data == 0.5)
    ident = make_transforms(m, "identity")
    assert all(isinstance(t, Identity) and t.parameters() == [] for t in ident)
    mc_w, mc_b = make_transforms(m, "metacurvature")
    assert (mc_w.out_factor.shape, mc_w.in_factor.shape) == ((3, 3), (2, 2))
    assert mc_b.elementwise.shape == (3,)


def test_make_transforms_never_shares():
    ts = make_transforms([Tensor(np.ones((2, 2)), requires_grad=True)] * 2, "kronecker")
    assert ts[0].left is not ts[1].left


def test_make_transforms_errors():
    deep = [Tensor(np.ones((2, 2, 2)), requires_grad=True)]
    for kind in ("kronecker", "metacurvature"):
        with pytest.raises(ShapeError):
            make_transforms(deep, kind)
    with pytest.raises(ValueError):
        make_transforms(deep, "adam")


def test_make_transforms_callable():
    ts = make_transforms([Tensor(np.ones(4), requires_grad=True)], lambda shape: Scale(shape, 3.0))
    assert ts[0].scale.shape == (4,)


def test_kronecker_apply_examples(rng):
    G = rng.standard_normal((2, 3))
    out = kronecker_apply(Tensor(G), Tensor(np.eye(2)), Tensor(np.eye(3)), Tensor(np.zeros((2, 3))))
    np.testing.assert_array_equal(out.data, G)
    one = kronecker_apply(Tensor([[3.0]]), Tensor([[2.0]]), Tensor([[5.0]]), Tensor([[1.0]]))
    assert one.item() == 31.0
    with pytest.raises(ShapeError):
        kronecker_apply(Tensor(G), Tensor(np.eye(3)), Tensor(np.eye(3)), Tensor(np.zeros((2, 3))))


@pytest.mark.parametrize("m", [1, 2, 3, 4])
@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_kronecker_matches_dense_oracle(m, n, rng):
    for _ in range(5):
        G, L, R, B = (rng.standard_normal(s) for s in [(m, n), (m, m), (n, n), (m, n)])
        out = kronecker_apply(*map(Tensor, (G, L, R, B)))
        assert np.max(np.abs(out.data - dense_kronecker(G, L, R, B))) < 1e-12


def test_transforms_preserve_shape(rng):
    shapes = [(), (1,), (4,), (3, 2), (1, 4)]
    for kind in ("identity", "scale", "kronecker", "metacurvature"):
        for s in shapes:
            (t,) = make_transforms([Tensor(np.zeros(s), requires_grad=True)], kind)
            for p in t.parameters():
                p.data = rng.standard_normal(p.shape)
            for _ in range(20):
                assert t.apply(Tensor(rng.standard_normal(s))).shape == s


def test_metacurvature_forms(rng):
    G = rng.standard_normal((3, 2))
    mc = MetaCurvature((3, 2))
    mc.out_factor.data = rng.standard_normal((3, 3))
    mc.in_factor.data = rng.standard_normal((2, 2))
    np.testing.assert_allclose(mc.apply(Tensor(G)).data, mc.out_factor.data @ G @ mc.in_factor.data)
    vec = MetaCurvature((3,))
    vec.elementwise.data = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(vec.apply(Tensor([1.0, 1.0, 2.0])).data, [1.0, 2.0, 6.0])
    scalar = MetaCurvature(())
    assert scalar.apply(Tensor(2.0)).item() == 2.0
    with pytest.raises(ShapeError):
        vec.apply(Tensor(np.ones(2)))


def test_transform_parameters_are_enumerable_and_stable():
    a = ParameterUpdate(MLP([2, 3, 1], random_state=0), "kronecker")
    b = ParameterUpdate(MLP([2, 3, 1], random_state=0), "kronecker")
    assert [n for n, _ in a.named_parameters()] == [n for n, _ in b.named_parameters()]
    assert len(a.parameters()) == 3 * 4
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_kronecker_vector_gradient(rng):
    t = KroneckerLinear((3,))
    t.left.data = rng.standard_normal((3, 3))
    g = rng.standard_normal(3)
    np.testing.assert_allclose(t.apply(Tensor(g)).data, t.left.data @ g)


def test_parameter_roundtrip(tmp_path):
    a, b = MLP([2, 3, 1], random_state=0), MLP([2, 3, 1], random_state=1)
    path = tmp_path / "params.json"
    save_parameters(a, path)
    doc = json.loads(path.read_text())
    assert doc["format"] == "metalearn.params/1"
    assert doc["params"][0] == {"name": "0.weight", "shape": [3, 2],
                                "values": a.parameters()[0].data.reshape(-1).tolist()}
    load_parameters(b, path)
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_import_parameters_errors():
    m = MLP([2, 3, 1], random_state=0)
    records = export_parameters(m)
    with pytest.raises(ValueError):
        import_parameters(m, records[::-1])
    records[0]["shape"] = [2, 3]
    with pytest.raises(ShapeError):
        import_parameters(m, records)


def test_clone_update_pipeline_reaches_model_and_transform(rng):
    model = MLP([3, 4, 2], "tanh", random_state=0)
    update = ParameterUpdate(model, "kronecker")
    X, Y = Tensor(rng.standard_normal((6, 3))), Tensor(rng.standard_normal((6, 2)))
    clone = clone_module(model)
    loss = ad.mse_loss(clone(X), Y)
    updates = update(loss, clone.parameters(), create_graph=True)
    update_module(clone, [u * -0.1 for u in updates])
    ad.mse_loss(clone(X), Y).backward()
    for p in model.parameters() + update.parameters():
        assert p.grad is not None and np.any(p.grad.data != 0)
