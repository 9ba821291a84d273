import gc

import numpy as np
import pytest

from attention_bench import tensor_core as tc
from attention_bench.exceptions import DataError, DimensionError, GraphError, NumericalError
from attention_bench.tensor_core import Instrumentation, Tensor


def numeric_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[index] += h
        minus[index] -= h
        grad[index] = (fn(plus) - fn(minus)) / (2 * h)
    return grad


def analytic_grad(build, x: np.ndarray) -> np.ndarray:
    leaf = Tensor(x, requires_grad=True)
    tc.backward(build(leaf))
    return leaf.grad.numpy()


def scalar(build):
    def run(x):
        return build(Tensor(x)).item()

    return run


@pytest.fixture
def float64():
    with Instrumentation(dtype=np.float64) as inst:
        yield inst


@pytest.mark.parametrize(
    "build",
    [
        lambda t: tc.reduce_sum(tc.gelu(t)),
        lambda t: tc.reduce_sum(tc.mul(tc.softmax_lastdim(t), np.arange(12.0).reshape(3, 4))),
        lambda t: tc.reduce_sum(
            tc.mul(tc.layernorm(t, Tensor(np.full(4, 1.5)), Tensor(np.zeros(4))), t)
        ),
        lambda t: tc.reduce_sum(tc.mul(tc.cumsum(t, axis=0), t)),
        lambda t: tc.reduce_sum(tc.div(t, tc.add(tc.mul(t, t), 1.0))),
        lambda t: tc.cross_entropy(t, np.array([0, 3, 2]), ignore_index=None),
        lambda t: tc.reduce_sum(tc.mul(tc.matmul(t, tc.transpose_last2(t)), 0.5)),
    ],
)
def test_gradients_match_finite_differences(float64, build):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 4))
    np.testing.assert_allclose(
        analytic_grad(build, x), numeric_grad(scalar(build), x), rtol=1e-5, atol=1e-7
    )


def test_take_and_take_along_axis_accumulate_repeated_indices(float64):
    x = np.arange(6.0).reshape(2, 3)
    grad = analytic_grad(lambda t: tc.reduce_sum(tc.take(t, np.array([2, 2, 0]), axis=1)), x)
    np.testing.assert_array_equal(grad, [[1, 0, 2], [1, 0, 2]])

    grad = analytic_grad(
        lambda t: tc.reduce_sum(tc.take_along_axis(t, np.array([[1, 1], [0, 2]]), axis=1)), x
    )
    np.testing.assert_array_equal(grad, [[0, 2, 0], [1, 0, 1]])


def test_softmax_of_large_equal_values_is_uniform():
    out = tc.softmax_lastdim(Tensor([1000.0, 1000.0]))
    np.testing.assert_allclose(out.numpy(), [0.5, 0.5])


def test_matmul_rejects_misaligned_shapes():
    with pytest.raises(DimensionError):
        tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_zero_extent_and_non_finite_values_are_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.ones((0, 3)))
    with pytest.raises(NumericalError):
        Tensor([1.0, np.nan])
    with pytest.raises(NumericalError):
        tc.div(Tensor([1.0]), Tensor([0.0]))


def test_backward_twice_on_the_same_graph_is_an_error():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    loss = tc.reduce_sum(tc.mul(x, x))
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_backward_needs_a_scalar_that_requires_grad():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(GraphError):
        tc.backward(tc.mul(x, 2.0))
    with pytest.raises(GraphError):
        tc.backward(tc.reduce_sum(Tensor(np.ones(3))))


def test_gradients_accumulate_across_backward_calls():
    x = Tensor(np.ones(3), requires_grad=True)
    tc.backward(tc.reduce_sum(tc.scale(x, 2.0)))
    tc.backward(tc.reduce_sum(tc.scale(x, 3.0)))
    np.testing.assert_allclose(x.grad.numpy(), [5.0, 5.0, 5.0])


def test_no_grad_records_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with tc.no_grad():
        y = tc.mul(x, x)
    assert not y.requires_grad
    assert y.is_leaf


def test_cross_entropy_ignores_padding_and_rejects_all_ignored():
    logits = Tensor(np.zeros((2, 4)))
    loss = tc.cross_entropy(logits, np.array([1, 9]), ignore_index=9)
    assert loss.item() == pytest.approx(np.log(4))
    with pytest.raises(DataError):
        tc.cross_entropy(logits, np.array([9, 9]), ignore_index=9)


def test_flop_costs_follow_the_convention():
    with Instrumentation() as inst:
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.ones((3, 4)))
        tc.matmul(a, b)
        assert inst.flops.total == 48
        tc.softmax_lastdim(Tensor(np.ones((2, 4))))
        assert inst.flops.by_category["softmax"] == 40
        tc.layernorm(Tensor(np.ones((2, 4))), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert inst.flops.by_category["norm"] == 2 * 4 * 7 + 2 * 2
        tc.gelu(Tensor(np.ones(5)))
        assert inst.flops.by_category["elementwise"] == 45
        tc.reshape(a, (3, 2))
        tc.permute(a, (1, 0))
        assert inst.flops.total == 48 + 40 + 60 + 45


def test_flop_scopes_nest_and_appear_in_snapshots():
    with Instrumentation() as inst:
        with tc.flop_scope("forward"):
            tc.scale(Tensor(np.ones(4)), 2.0)
            with tc.flop_scope("attention_core"):
                tc.scale(Tensor(np.ones(3)), 2.0)
    snapshot = inst.flops.snapshot()
    assert snapshot["total"] == 7
    assert snapshot["scope.forward"] == 7
    assert snapshot["scope.attention_core"] == 3
    assert snapshot["category.elementwise"] == 7


def test_allocation_tracker_follows_tensor_lifetimes():
    with Instrumentation() as inst:
        kept = Tensor(np.ones(10))
        with tc.alloc_tag("scores"):
            temp = Tensor(np.ones(100))
        del temp
        gc.collect()
        assert inst.alloc.live_bytes == kept.nbytes
        assert inst.alloc.peak_bytes == 110 * 4
        assert inst.alloc.peak_by_tag["scores"] == 400
        with inst.alloc.window() as window:
            with tc.scratch(64, tag="scores"):
                pass
        assert window.peak_bytes == kept.nbytes + 64
        assert window.peak_by_tag["scores"] == 64


def test_instrumentation_sets_the_precision():
    with Instrumentation(dtype=np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_kink_signature_changes_with_discrete_decisions():
    def signature(values):
        with Instrumentation(track_kinks=True) as inst:
            tc.relu(Tensor(values))
        return inst.kink_signature()

    assert signature([1.0, -1.0]) == signature([2.0, -3.0])
    assert signature([1.0, -1.0]) != signature([-1.0, 1.0])
