import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from divpatch import autograd as ag
from divpatch.autograd import GraphError, ShapeError, Tensor, backward, finite_diff_check
from divpatch.gradcheck import op_checks


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ag.matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_row_by_column():
    assert ag.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_matmul_gradient_matches_finite_differences(rng):
    b = rng.standard_normal((4, 3))
    err = finite_diff_check(lambda a: ag.sum_(ag.matmul(a, b)), rng.standard_normal((2, 4)), 1e-3)
    assert err < 1e-4


def test_layer_norm_constant_vector_is_zero():
    out = ag.layer_norm(Tensor([1.0, 1.0, 1.0]), np.ones(3), np.zeros(3))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_layer_norm_symmetric_pair():
    out = ag.layer_norm(Tensor(np.array([-1.0, 1.0])), np.ones(2), np.zeros(2), eps=1e-12)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-6)


def test_layer_norm_empty_axis():
    with pytest.raises(ShapeError):
        ag.layer_norm(Tensor(np.zeros((3, 0))), np.ones(0), np.zeros(0))


def test_softmax_symmetric_and_stable():
    np.testing.assert_allclose(ag.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    out = ag.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-7)


def test_softmax_nan_flagged_on_request():
    x = Tensor([np.nan, 0.0])
    assert np.isnan(ag.softmax(x).data).all()
    with pytest.raises(FloatingPointError):
        ag.softmax(x, check_finite=True)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=12),
    st.floats(-100, 100),
)
def test_softmax_sums_to_one_and_is_shift_invariant(values, shift):
    x = np.array(values, dtype=np.float32)
    s = ag.softmax(Tensor(x)).data
    assert abs(s.sum() - 1.0) < 1e-6
    np.testing.assert_allclose(ag.softmax(Tensor(x + np.float32(shift))).data, s, atol=1e-6)


def test_elementwise_basics():
    assert ag.gelu(Tensor([0.0])).data[0] == 0.0
    assert ag.mean(Tensor([2.0, 4.0])).item() == 3.0


def test_slice_concat_round_trip(rng):
    x = Tensor(rng.standard_normal((3, 7)))
    for k in range(8):
        back = ag.concat([ag.slice_(x, 0, k, axis=1), ag.slice_(x, k, 7, axis=1)], axis=1)
        np.testing.assert_array_equal(back.data, x.data)


def test_slice_out_of_range():
    with pytest.raises(IndexError):
        ag.slice_(Tensor(np.zeros(4)), 2, 5)


def test_backward_of_sum_gives_ones(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    backward(ag.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_analytic_square():
    x = Tensor([3.0], requires_grad=True)
    backward(ag.sum_(x * x))
    assert x.grad.tolist() == [6.0]


def test_shared_subexpression_sums_both_paths(rng):
    def f(t):
        u = ag.exp(t)
        return ag.sum_(u * t + u)

    x0 = rng.standard_normal((3, 2))
    x = Tensor(x0, requires_grad=True)
    backward(f(x))
    np.testing.assert_allclose(x.grad, np.exp(x0) * (x0 + 2.0), rtol=1e-6)
    assert finite_diff_check(f, x0, 1e-3) < 1e-4


def test_backward_rejects_non_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        backward(x * 2.0)


def test_second_backward_on_same_graph_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = ag.sum_(x * x)
    backward(y)
    with pytest.raises(GraphError):
        backward(y)


def test_tape_is_topologically_ordered(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    y = ag.sum_(ag.exp(x) * x + x)
    tape = ag.Tape(y)
    position = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for parent in node._parents:
            assert position[id(parent)] < position[id(node)]
    assert len(position) == len(tape.nodes)


def test_root_grad_is_exactly_one():
    root = Tensor(np.array(5.0), requires_grad=True)
    backward(root)
    assert root.grad == 1.0


def test_finite_diff_check_sum_of_squares(rng):
    assert finite_diff_check(lambda t: ag.sum_(t * t), rng.standard_normal(5), 1e-3) < 1e-6


def test_finite_diff_check_catches_broken_backward(rng):
    def broken_square(t):
        return ag._make(t.data**2, (t,), lambda g: (g * 3.0 * t.data,), "broken")

    err = finite_diff_check(lambda t: ag.sum_(broken_square(t)), rng.standard_normal(4) + 2.0, 1e-3)
    assert err > 1e-2


def test_finite_diff_check_rejects_nondeterministic_f(rng):
    noise = np.random.default_rng()
    with pytest.raises(GraphError):
        finite_diff_check(lambda t: ag.sum_(t * noise.standard_normal()), np.ones(3), 1e-3)


def test_finite_diff_eps_range():
    with pytest.raises(ValueError):
        finite_diff_check(lambda t: ag.sum_(t), np.ones(2), 1.0)


@pytest.mark.parametrize("seed", range(20))
def test_every_op_matches_finite_differences(seed):
    for result in op_checks(seed):
        assert result.error < 1e-4, result.name


def test_determinism_bit_identical(rng):
    x0 = rng.standard_normal((4, 5)).astype(np.float32)
    w = rng.standard_normal((5, 3)).astype(np.float32)

    def run():
        x = Tensor(x0, requires_grad=True)
        y = ag.sum_(ag.log_softmax(ag.gelu(ag.matmul(x, w))))
        backward(y)
        return y.data.tobytes(), x.grad.tobytes()

    assert run() == run()


def test_float32_default_and_float64_promotion():
    assert Tensor([1, 2]).dtype == np.float32
    mixed = ag.matmul(Tensor(np.ones((2, 2), np.float32)), Tensor(np.ones((2, 2))))
    assert mixed.dtype == np.float64
