import numpy as np
import pytest

import slidedistill.tensorcore as tc
from slidedistill.errors import ContractError, DomainError, ShapeError
from slidedistill.tensorcore import Tensor, Graph, backward, grad_check


def rand_tensor(rng, rows, cols, requires_grad=True):
    return Tensor(rng.standard_normal((rows, cols)), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(tc.matmul(a, b).data, b.data)


def test_matmul_hand():
    c = tc.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert c.data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        tc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a = rand_tensor(rng, 4, 3)
    b = rand_tensor(rng, 3, 2)
    report = grad_check(lambda: tc.sum_all(tc.tanh(tc.matmul(a, b))), [a, b], h=1e-5, tol=1e-6)
    assert report.passed, str(report)


# ---------------------------------------------------------------------------
# pointwise


def test_sigmoid_tanh_at_zero():
    z = Tensor(np.zeros((1, 3)))
    assert np.allclose(tc.sigmoid(z).data, 0.5)
    assert np.array_equal(tc.tanh(z).data, np.zeros((1, 3)))


def test_abs_gradient_at_minus_two():
    x = Tensor([[-2.0]], requires_grad=True)
    backward(tc.absval(x))
    assert x.grad[0, 0] == -1.0


def test_abs_subgradient_zero_at_zero():
    x = Tensor([[0.0]], requires_grad=True)
    backward(tc.absval(x))
    assert x.grad[0, 0] == 0.0


def test_log_domain_error():
    with pytest.raises(DomainError):
        tc.log(Tensor([[1.0, 0.0]]))


def test_selu_fixed_points():
    assert tc.selu(Tensor([[0.0]])).item() == 0.0
    # asymptote of the negative branch
    assert tc.selu(Tensor([[-50.0]])).item() == pytest.approx(-tc.SELU_LAMBDA * tc.SELU_ALPHA, rel=1e-12)


def test_binary_ops_shape_mismatch():
    a, b = Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3)))
    for op in (tc.add, tc.sub, tc.mul):
        with pytest.raises(ShapeError):
            op(a, b)


# ---------------------------------------------------------------------------
# reductions


def test_row_l2_normalize_triangle():
    y = tc.row_l2_normalize(Tensor([[3.0, 4.0]]))
    assert np.allclose(y.data, [[0.6, 0.8]], atol=1e-15)


def test_row_l2_normalize_zero_row_guard_counts():
    tc.reset_zero_row_guard_count()
    y = tc.row_l2_normalize(Tensor([[0.0, 0.0], [1.0, 0.0]]))
    assert tc.zero_row_guard_count == 1
    assert np.allclose(y.data[1], [1.0, 0.0])
    assert np.allclose(y.data[0], [0.0, 0.0])
    tc.reset_zero_row_guard_count()


def test_softmax_row_uniform():
    y = tc.softmax_row(Tensor([[0.0, 0.0, 0.0]]))
    assert np.allclose(y.data, 1.0 / 3.0, atol=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    y = tc.softmax_row(Tensor(rng.standard_normal((5, 7)) * 30))
    assert np.all(y.data >= 0)
    assert np.allclose(y.data.sum(axis=1), 1.0, atol=1e-9)


def test_frobenius_sq_matches_direct_summation():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 3))
    got = tc.frobenius_sq(Tensor(x)).item()
    want = sum(v * v for v in x.ravel())
    assert got == pytest.approx(want, abs=1e-12)


# ---------------------------------------------------------------------------
# kron


def test_kron_unit_vector():
    out = tc.kron(Tensor([[1.0, 0.0]]), Tensor([[5.0, 7.0]]))
    assert out.data.tolist() == [[5.0, 7.0, 0.0, 0.0]]


def test_kron_scalar_second_factor():
    out = tc.kron(Tensor([[2.0, 3.0]]), Tensor([[5.0]]))
    assert out.data.tolist() == [[10.0, 15.0]]


def test_kron_rejects_non_row_vectors():
    with pytest.raises(ShapeError):
        tc.kron(Tensor(np.zeros((2, 2))), Tensor(np.zeros((1, 2))))


def test_kron_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    a = rand_tensor(rng, 1, 4)
    b = rand_tensor(rng, 1, 3)
    report = grad_check(lambda: tc.frobenius_sq(tc.kron(a, b)), [a, b], tol=1e-6)
    assert report.passed, str(report)


# ---------------------------------------------------------------------------
# concat / transpose / add_rowvec


def test_concat_rows_and_cols_roundtrip_grads():
    rng = np.random.default_rng(2)
    a = rand_tensor(rng, 2, 3)
    b = rand_tensor(rng, 1, 3)
    c = rand_tensor(rng, 3, 1)

    def f():
        stacked = tc.concat_rows([a, b])        # 3x3
        wide = tc.concat_cols([stacked, tc.matmul(stacked, c)])  # 3x4
        return tc.frobenius_sq(wide)

    report = grad_check(f, [a, b, c], tol=1e-6)
    assert report.passed, str(report)


def test_transpose_grad():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    backward(tc.sum_all(tc.mul(tc.transpose(x), Tensor([[1.0, 10.0], [100.0, 1000.0]]))))
    assert x.grad.tolist() == [[1.0, 100.0], [10.0, 1000.0]]


def test_add_rowvec_bias_grad_sums_rows():
    x = Tensor(np.zeros((4, 2)), requires_grad=True)
    v = Tensor(np.zeros((1, 2)), requires_grad=True)
    backward(tc.sum_all(tc.add_rowvec(x, v)))
    assert np.array_equal(v.grad, [[4.0, 4.0]])
    assert np.array_equal(x.grad, np.ones((4, 2)))


# ---------------------------------------------------------------------------
# backward contract


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6, dtype=float).reshape(2, 3), requires_grad=True)
    backward(tc.sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_frobenius_gives_2x():
    rng = np.random.default_rng(5)
    x = rand_tensor(rng, 3, 2)
    backward(tc.frobenius_sq(x))
    assert np.allclose(x.grad, 2 * x.data, atol=1e-15)


def test_backward_rejects_non_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        backward(tc.tanh(x))


def test_backward_accumulates_across_graphs():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    backward(tc.sum_all(x))
    backward(tc.frobenius_sq(x))
    assert np.allclose(x.grad, 1.0 + 2 * x.data)


def test_backward_same_graph_replay_accumulates_linearly():
    x = Tensor([[1.0, -1.5]], requires_grad=True)
    loss = tc.frobenius_sq(tc.tanh(x))
    backward(loss)
    once = x.grad.copy()
    backward(loss)
    assert np.allclose(x.grad, 2 * once, atol=1e-15)


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(11)
    x = rand_tensor(rng, 2, 3)
    y = rand_tensor(rng, 3, 2)

    def gf():
        return tc.frobenius_sq(tc.matmul(x, y))

    def gg():
        return tc.sum_all(tc.sigmoid(tc.matmul(x, y)))

    a, b = 0.37, -2.5
    for t in (x, y):
        t.zero_grad()
    backward(gf())
    gfx, gfy = x.grad.copy(), y.grad.copy()
    for t in (x, y):
        t.zero_grad()
    backward(gg())
    ggx, ggy = x.grad.copy(), y.grad.copy()
    for t in (x, y):
        t.zero_grad()
    backward(tc.add(tc.scale(gf(), a), tc.scale(gg(), b)))
    assert np.allclose(x.grad, a * gfx + b * ggx, atol=1e-10)
    assert np.allclose(y.grad, a * gfy + b * ggy, atol=1e-10)


def test_graph_trace_orders_parents_before_consumers():
    x = Tensor([[1.0]], requires_grad=True)
    y = tc.tanh(x)
    z = tc.mul(y, y)
    loss = tc.sum_all(z)
    g = Graph.trace(loss)
    assert len(g.nodes) == len({id(n) for n in g.nodes})  # each node once
    pos = {id(n): i for i, n in enumerate(g.nodes)}
    for node in g.nodes:
        for parent in node._parents:
            assert pos[id(parent)] < pos[id(node)]


def test_graph_replay_is_bit_identical():
    def build(seed):
        rng = np.random.default_rng(seed)
        a = rand_tensor(rng, 3, 4)
        b = rand_tensor(rng, 4, 2)
        out = tc.softmax_row(tc.matmul(tc.tanh(a), b))
        return out.data.tobytes()

    assert build(42) == build(42)


# ---------------------------------------------------------------------------
# grad_check oracle


def test_grad_check_exact_for_linear():
    rng = np.random.default_rng(9)
    x = rand_tensor(rng, 2, 3)
    c = Tensor(rng.standard_normal((2, 3)))
    report = grad_check(lambda: tc.sum_all(tc.mul(x, c)), [x], tol=1e-10)
    assert report.passed, str(report)


def test_grad_check_flags_corrupted_backward_rule():
    x = Tensor([[0.3, -1.2]], requires_grad=True)

    def corrupted_square():
        out = Tensor._op(x.data**2, (x,), "bad_square")
        def _bw():
            x._accum(3.0 * x.data * out.grad)  # derivative should be 2x
        out._backward = _bw
        return tc.sum_all(out)

    report = grad_check(corrupted_square, [x], tol=1e-4)
    assert not report.passed
    assert report.max_rel_error > 1e-4


def test_grad_check_rejects_nonpositive_step():
    x = Tensor([[1.0]], requires_grad=True)
    with pytest.raises(ContractError):
        grad_check(lambda: tc.sum_all(x), [x], h=0.0)


# ---------------------------------------------------------------------------
# sweep: every differentiable op vs finite differences, 20 seeds


OP_BUILDERS = {
    "matmul": lambda a, b: tc.sum_all(tc.tanh(tc.matmul(a, b))),
    "add": lambda a, b: tc.frobenius_sq(tc.add(a, tc.transpose(b))),
    "sub": lambda a, b: tc.frobenius_sq(tc.sub(a, tc.transpose(b))),
    "mul": lambda a, b: tc.sum_all(tc.mul(a, tc.transpose(b))),
    "scale": lambda a, b: tc.sum_all(tc.scale(a, -1.7)),
    "tanh": lambda a, b: tc.frobenius_sq(tc.tanh(a)),
    "sigmoid": lambda a, b: tc.frobenius_sq(tc.sigmoid(a)),
    "exp": lambda a, b: tc.sum_all(tc.exp(a)),
    "log": lambda a, b: tc.sum_all(tc.log(tc.exp(a))),
    "abs": lambda a, b: tc.sum_all(tc.absval(a)),
    "relu": lambda a, b: tc.sum_all(tc.relu(a)),
    "selu": lambda a, b: tc.sum_all(tc.selu(a)),
    "clamp_min": lambda a, b: tc.sum_all(tc.clamp_min(a, 0.25)),
    "mean": lambda a, b: tc.mean_all(tc.sigmoid(a)),
    "row_l2_normalize": lambda a, b: tc.sum_all(tc.mul(tc.row_l2_normalize(a), tc.transpose(b))),
    "softmax_row": lambda a, b: tc.sum_all(tc.mul(tc.softmax_row(a), a)),
}


@pytest.mark.parametrize("name", sorted(OP_BUILDERS))
def test_op_gradients_over_seeds(name):
    build = OP_BUILDERS[name]
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a = rand_tensor(rng, 3, 4)
        b = rand_tensor(rng, 4, 3)
        report = grad_check(lambda: build(a, b), [a, b], h=1e-5, tol=1e-4)
        assert report.passed, f"{name} seed {seed}: {report}"


def test_kron_gradients_over_seeds():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a = rand_tensor(rng, 1, 5)
        b = rand_tensor(rng, 1, 4)
        report = grad_check(lambda: tc.frobenius_sq(tc.kron(a, b)), [a, b], tol=1e-4)
        assert report.passed, f"seed {seed}: {report}"
