import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptcl.errors import ContractError, DimensionError, DomainError, NumericError
from adaptcl.tensor import (
    Graph,
    Tensor,
    add,
    add_bias,
    backward,
    cosine_distance_rows,
    elementwise,
    exp,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    scale,
    softmax_cross_entropy,
    squared_distance_rows,
    sub,
    tanh,
    tsum,
)
from helpers import analytic, finite_difference, max_rel_error, rel_error


def test_matmul_identity():
    out = matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[3.0], [4.0]]


def test_matmul_zero():
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[0.0], [0.0]])).data.tolist() == [[0.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_matmul_gradient_matches_finite_differences(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    err = max_rel_error(lambda: tsum(matmul(a, b)), [a, b])
    assert err < 1e-6


def test_matmul_backward_rule(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    out = matmul(a, b)
    backward(tsum(out))
    g = np.ones((3, 2))
    np.testing.assert_array_equal(a.grad, g @ b.data.T)
    np.testing.assert_array_equal(b.grad, a.data.T @ g)


def test_relu_sign_cases():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    y = relu(x)
    assert y.data.tolist() == [0.0, 0.0, 2.0]
    backward(tsum(y))
    # subgradient 0 at exactly 0
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_tanh_at_zero():
    x = Tensor([0.0], requires_grad=True)
    y = tanh(x)
    assert y.data[0] == 0.0
    backward(tsum(y))
    assert x.grad[0] == 1.0


def test_log_domain_error():
    with pytest.raises(DomainError):
        log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        log(Tensor([-2.0]))


def test_elementwise_dispatch():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
    assert elementwise("add", a, b).data.tolist() == [4.0, 7.0]
    assert elementwise("sub", a, b).data.tolist() == [-2.0, -3.0]
    assert elementwise("mul", a, b).data.tolist() == [3.0, 10.0]
    assert elementwise("scale", a, 3.0).data.tolist() == [3.0, 6.0]
    with pytest.raises(ValueError):
        elementwise("pow", a)


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        add(Tensor([1.0, 2.0]), Tensor([1.0]))


def test_composite_relu_gradient(rng):
    w = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    x = Tensor(rng.normal(size=(3, 5)))
    assert max_rel_error(lambda: tsum(relu(matmul(x, w))), [w]) < 1e-6


@pytest.mark.parametrize("op", ["add", "sub", "mul", "tanh", "exp", "log", "scale", "relu"])
def test_elementwise_gradients(op, rng):
    a = Tensor(rng.uniform(0.5, 2.0, size=(3, 2)) * rng.choice([-1, 1], size=(3, 2)) if op == "relu"
               else rng.uniform(0.5, 2.0, size=(3, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2)))

    def f():
        if op in ("add", "sub", "mul"):
            out = elementwise(op, a, b)
        elif op == "scale":
            out = scale(a, -1.7)
        else:
            out = elementwise(op, a)
        return tsum(mul(out, w))

    params = [a, b] if op in ("add", "sub", "mul") else [a]
    assert max_rel_error(f, params) < 1e-6


def test_softmax_cross_entropy_uniform():
    loss = softmax_cross_entropy(Tensor([[0.0, 0.0]]), [0])
    assert loss.item() == pytest.approx(math.log(2), abs=1e-15)


def test_softmax_cross_entropy_large_logits_stable():
    loss = softmax_cross_entropy(Tensor([[1000.0, 0.0]]), [0])
    assert math.isfinite(loss.item())
    assert loss.item() == pytest.approx(0.0, abs=1e-300)


def test_softmax_cross_entropy_matches_per_sample_loop(rng):
    logits = rng.normal(size=(3, 5)) * 3
    targets = [4, 0, 2]
    expected = 0.0
    for row, t in zip(logits, targets):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        expected += (lse - row[t]) / 3
    assert abs(softmax_cross_entropy(Tensor(logits), targets).item() - expected) < 1e-12


def test_softmax_cross_entropy_index_error():
    with pytest.raises(IndexError):
        softmax_cross_entropy(Tensor([[0.0, 1.0]]), [2])


def test_softmax_cross_entropy_gradient(rng):
    z = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    assert max_rel_error(lambda: softmax_cross_entropy(z, [0, 2, 1, 1]), [z]) < 1e-6


def test_log_softmax_gradient(rng):
    z = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3)))
    assert max_rel_error(lambda: tsum(mul(log_softmax(z), w)), [z]) < 1e-6


def test_add_bias_gradient(rng):
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3)))
    assert max_rel_error(lambda: tsum(mul(add_bias(x, b), w)), [x, b]) < 1e-6


def test_cosine_and_squared_distance_gradients(rng):
    a = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    assert max_rel_error(lambda: mean(cosine_distance_rows(a, b)), [a, b]) < 1e-6
    assert max_rel_error(lambda: mean(squared_distance_rows(a, b)), [a, b]) < 1e-6


def test_cosine_distance_zero_norm_fallback():
    a = Tensor([[0.0, 0.0], [1.0, 0.0]], requires_grad=True)
    b = Tensor([[3.0, 4.0], [2.0, 0.0]], requires_grad=True)
    out = cosine_distance_rows(a, b)
    assert out.data[0] == 25.0
    assert out.data[1] == 0.0


def test_cosine_distance_identical_rows_exactly_zero(rng):
    x = rng.normal(size=(20, 7))
    assert np.all(cosine_distance_rows(Tensor(x), Tensor(x.copy())).data == 0.0)


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(4.0), requires_grad=True)
    backward(tsum(x))
    assert x.grad.tolist() == [1.0, 1.0, 1.0, 1.0]


def test_backward_zero_times_f(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    backward(scale(tsum(exp(x)), 0.0))
    assert np.all(x.grad == 0.0)


def test_backward_non_scalar_is_contract_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        backward(scale(x, 2.0))


def test_backward_twice_doubles_gradients(rng):
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    x = Tensor(rng.normal(size=(4, 3)))
    loss = tsum(tanh(matmul(x, w)))
    backward(loss)
    first = w.grad.copy()
    backward(loss)
    np.testing.assert_array_equal(w.grad, 2 * first)


def test_two_layer_mlp_gradients(rng):
    x = Tensor(rng.normal(size=(6, 4)))
    w1 = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    b1 = Tensor(rng.normal(size=5), requires_grad=True)
    w2 = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    b2 = Tensor(rng.normal(size=3), requires_grad=True)

    def f():
        h = relu(add_bias(matmul(x, w1), b1))
        return softmax_cross_entropy(add_bias(matmul(h, w2), b2), [0, 1, 2, 0, 1, 2])

    assert max_rel_error(f, [w1, b1, w2, b2]) < 1e-5


def test_graph_is_topological_and_visited_once(rng):
    x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    h = tanh(x)
    # h feeds two branches: the node for h must still run exactly once
    loss = tsum(add(mul(h, h), h))
    graph = Graph.from_root(loss)
    ids = [n.id for n in graph.nodes]
    assert ids == sorted(ids) and len(set(ids)) == len(ids)
    position = {id(n.output): i for i, n in enumerate(graph.nodes)}
    for i, node in enumerate(graph.nodes):
        for inp in node.inputs:
            if inp._node is not None:
                assert position[id(inp)] < i
    backward(loss)
    np.testing.assert_allclose(x.grad, (2 * h.data + 1) * (1 - h.data ** 2), rtol=1e-14)


def test_non_finite_values_raise():
    with pytest.raises(NumericError):
        Tensor([1.0, float("nan")])
    with pytest.raises(NumericError):
        exp(Tensor([1000.0]))


def test_no_grad_records_nothing(rng):
    w = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    with no_grad():
        out = tsum(matmul(w, w))
    assert not out.requires_grad
    with pytest.raises(ContractError):
        backward(out)


def test_replay_determinism():
    def run():
        r = np.random.default_rng(7)
        w = Tensor(r.normal(size=(4, 3)), requires_grad=True)
        x = Tensor(r.normal(size=(5, 4)))
        loss = softmax_cross_entropy(relu(matmul(x, w)), [0, 1, 2, 0, 1])
        backward(loss)
        return loss.data.tobytes(), w.grad.tobytes()

    assert run() == run()


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_random_composite_gradients_property(seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.normal(size=(3, 4)))
    w = Tensor(r.normal(size=(4, 3)), requires_grad=True)
    b = Tensor(r.normal(size=3), requires_grad=True)
    v = Tensor(r.uniform(0.5, 1.5, size=(3, 3)), requires_grad=True)

    def f():
        z = tanh(add_bias(matmul(x, w), b))
        return add(tsum(mul(exp(z), log(v))), softmax_cross_entropy(sub(z, v), [0, 1, 2]))

    an = analytic(f, [w, b, v])
    fd = finite_difference(f, [w, b, v])
    assert max(rel_error(a, n) for a, n in zip(an, fd)) < 1e-5
