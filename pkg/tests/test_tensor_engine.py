import numpy as np
import pytest
import torch
import torch.nn.functional as F
from numpy.testing import assert_allclose

from tempest import tensor_engine as te
from tempest.errors import DomainError, InvalidArgumentError
from tempest.tensor_engine import Tensor, parameter


def _torch(a):
    return torch.tensor(a, dtype=torch.float64, requires_grad=True)


@pytest.mark.parametrize(
    "op, torch_fn",
    [
        ("exp", torch.exp),
        ("log", torch.log),
        ("softplus", F.softplus),
        ("sigmoid", torch.sigmoid),
        ("leaky_relu", lambda t: F.leaky_relu(t, negative_slope=0.1)),
        ("square", lambda t: t * t),
        ("neg", lambda t: -t),
    ],
)
def test_unary_gradients_match_torch(op, torch_fn, rng):
    data = rng.uniform(0.1, 2.0, size=(3, 4)) if op == "log" else rng.normal(size=(3, 4))
    weights = rng.normal(size=(3, 4))
    x = parameter(data)
    (te.elementwise(op, x) * Tensor(weights)).sum().backward()

    xt = _torch(data)
    (torch_fn(xt) * torch.tensor(weights)).sum().backward()
    assert_allclose(x.grad, xt.grad.numpy(), rtol=1e-12, atol=1e-12)


def test_binary_ops_with_scalar_broadcast(rng):
    a = parameter(rng.normal(size=(2, 3)))
    s = parameter(np.array([1.5]))
    ((a * s) + s).sum().backward()
    assert_allclose(a.grad, np.full((2, 3), 1.5))
    assert_allclose(s.grad, [a.data.sum() + 6.0])


def test_mismatched_binary_shapes_are_rejected():
    with pytest.raises(InvalidArgumentError):
        te.elementwise("add", Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_log_of_non_positive_is_a_domain_error():
    with pytest.raises(DomainError):
        Tensor(np.array([1.0, 0.0])).log()


def test_backward_needs_scalar_root():
    x = parameter(np.ones((2, 2)))
    with pytest.raises(InvalidArgumentError):
        (x * 2.0).backward()


def test_five_dimensional_tensors_are_rejected():
    with pytest.raises(InvalidArgumentError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))


def test_leaf_gradients_accumulate_across_passes():
    x = parameter(np.array([2.0]))
    x.square().sum().backward()
    x.square().sum().backward()
    assert_allclose(x.grad, [8.0])
    x.zero_grad()
    assert x.grad is None


def test_graph_is_in_topological_order():
    x = parameter(np.array([1.0, 2.0]))
    graph = (x.exp() * x).sum().backward()
    ids = [node.node_id for node in graph.nodes]
    assert ids == sorted(ids)
    for node in graph.nodes:
        assert all(i < node.node_id for i in node.input_ids)


def test_shared_subexpression_gradient():
    x = parameter(np.array([3.0]))
    y = x.square()
    (y + y).sum().backward()
    assert_allclose(x.grad, [12.0])


@pytest.mark.parametrize("size, stride, pad, k", [(8, 1, 1, 3), (8, 2, 1, 3), (7, 2, 1, 3), (6, 1, 0, 1)])
def test_conv2d_matches_torch(size, stride, pad, k, rng):
    x_np = rng.normal(size=(2, 3, size, size))
    w_np = rng.normal(size=(4, 3, k, k))
    b_np = rng.normal(size=4)
    x, w, b = parameter(x_np), parameter(w_np), parameter(b_np)
    out = te.conv2d(x, w, b, stride=stride, pad=pad)
    upstream = rng.normal(size=out.shape)
    (out * Tensor(upstream)).sum().backward()

    xt, wt, bt = _torch(x_np), _torch(w_np), _torch(b_np)
    ref = F.conv2d(xt, wt, bt, stride=stride, padding=pad)
    (ref * torch.tensor(upstream)).sum().backward()

    assert out.shape == tuple(ref.shape)
    assert_allclose(out.data, ref.detach().numpy(), rtol=1e-10, atol=1e-12)
    assert_allclose(x.grad, xt.grad.numpy(), rtol=1e-10, atol=1e-12)
    assert_allclose(w.grad, wt.grad.numpy(), rtol=1e-10, atol=1e-12)
    assert_allclose(b.grad, bt.grad.numpy(), rtol=1e-10, atol=1e-12)


def test_conv2d_rejects_mismatched_channels(rng):
    with pytest.raises(InvalidArgumentError):
        te.conv2d(Tensor(rng.normal(size=(1, 2, 5, 5))), Tensor(rng.normal(size=(1, 3, 3, 3))))


def test_structural_ops_match_torch(rng):
    a_np = rng.normal(size=(1, 2, 4, 4))
    b_np = rng.normal(size=(1, 1, 8, 8))
    a, b = parameter(a_np), parameter(b_np)
    joined = te.concat([te.upsample_nearest2x(a), b])
    out = te.select_channel(joined, 1) * 2.0 + te.stride_select(joined, 2).reshape(1, 3, 4, 4).sum()
    upstream = rng.normal(size=out.shape)
    (out * Tensor(upstream)).sum().backward()

    at, bt = _torch(a_np), _torch(b_np)
    jt = torch.cat([F.interpolate(at, scale_factor=2, mode="nearest"), bt], dim=1)
    ref = jt[:, 1:2] * 2.0 + jt[..., ::2, ::2].sum()
    (ref * torch.tensor(upstream)).sum().backward()

    assert_allclose(out.data, ref.detach().numpy(), rtol=1e-12)
    assert_allclose(a.grad, at.grad.numpy(), rtol=1e-12, atol=1e-12)
    assert_allclose(b.grad, bt.grad.numpy(), rtol=1e-12, atol=1e-12)


def test_upsample_replicates_each_pixel():
    x = parameter(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = te.upsample_nearest2x(x)
    assert_allclose(out.data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    (out * Tensor(np.arange(16.0).reshape(1, 1, 4, 4))).sum().backward()
    assert_allclose(x.grad[0, 0], [[0 + 1 + 4 + 5, 2 + 3 + 6 + 7], [8 + 9 + 12 + 13, 10 + 11 + 14 + 15]])


def test_gradients_are_linear_in_the_loss(rng):
    x = Tensor(rng.normal(size=(1, 2, 6, 6)))
    w = parameter(rng.normal(size=(3, 2, 3, 3)))
    b = parameter(rng.normal(size=3))

    def first():
        return te.conv2d(x, w, b, pad=1).leaky_relu().square().sum()

    def second():
        return te.conv2d(x, w, b, stride=2, pad=1).sigmoid().mean() + w.square().sum()

    def grads(loss):
        w.zero_grad()
        b.zero_grad()
        loss.backward()
        return w.grad.copy(), b.grad.copy()

    alpha, beta = 0.7, -2.5
    g1, g2 = grads(first()), grads(second())
    combined = grads(first() * alpha + second() * beta)
    for got, a, c in zip(combined, g1, g2):
        assert_allclose(got, alpha * a + beta * c, rtol=1e-12, atol=1e-12)


def test_linear_map_backward_is_transpose(rng):
    matrix = rng.normal(size=(6, 4))
    x = parameter(rng.normal(size=(2, 2)))
    u = rng.normal(size=(2, 3))
    (te.linear_map(x, matrix, (2, 3)) * Tensor(u)).sum().backward()
    assert_allclose(x.grad.ravel(), matrix.T @ u.ravel(), rtol=1e-12)


def test_unknown_ops_are_rejected():
    with pytest.raises(InvalidArgumentError):
        te.elementwise("tanh", Tensor(np.ones(2)))
    with pytest.raises(InvalidArgumentError):
        te.reduce("max", Tensor(np.ones(2)))
