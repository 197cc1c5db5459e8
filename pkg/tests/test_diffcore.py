import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fdrl import diffcore as dc
from fdrl.diffcore import Tensor
from fdrl.errors import DimensionError, LabelRangeError

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def leaf(values):
    return Tensor(values, requires_grad=True)


# -- matmul ---------------------------------------------------------------

def test_matmul_identity():
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(dc.matmul(Tensor(np.eye(2)), Tensor(x)).data, x)


def test_matmul_small():
    assert dc.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_sum_gradient_matches_central_differences(rng):
    a = leaf(rng.uniform(-1, 1, (4, 3)))
    b = Tensor(rng.uniform(-1, 1, (3, 5)))

    def total():
        return float(dc.matmul(a, b).data.sum())

    out = dc.matmul(a, b)
    loss = dc.sum_scalars([dc.mean_rows(dc.matmul(out, Tensor(np.ones((5, 1)))))])
    loss.backward()
    # mean_rows divides by 4 rows
    numeric = dc.numeric_grad(total, a) / 4.0
    assert dc.relative_error(a.grad, numeric) < 1e-4


# -- relu -------------------------------------------------------------------

def test_relu_values():
    assert dc.relu(Tensor([[-1.0, 0.0, 2.0]])).data.tolist() == [[0.0, 0.0, 2.0]]


def test_relu_all_negative_has_zero_output_and_gradient():
    x = leaf([[-1.0, -2.0, -0.5]])
    dc.frobenius_sq(dc.add(dc.relu(x), Tensor([[1.0, 1.0, 1.0]]))).backward()
    assert np.all(dc.relu(Tensor(x.data)).data == 0)
    assert np.all(x.grad == 0)


def test_relu_subgradient_at_zero_is_zero():
    x = leaf([[0.0]])
    dc.frobenius_sq(dc.add(dc.relu(x), Tensor([[1.0]]))).backward()
    assert x.grad[0, 0] == 0.0


# -- softmax ----------------------------------------------------------------

def test_softmax_uniform_row():
    np.testing.assert_allclose(dc.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], rtol=0, atol=1e-15)


def test_softmax_large_logits_do_not_overflow():
    out = dc.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
def test_softmax_rows_are_distributions(x):
    s = dc.softmax_rows(Tensor(x)).data
    assert np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(s.sum(axis=1), 1.0, rtol=0, atol=1e-9)


# -- cross entropy ----------------------------------------------------------

@pytest.mark.parametrize("label", [0, 1])
def test_cross_entropy_uniform_logits(label):
    assert dc.cross_entropy(Tensor([[0.0, 0.0]]), [label]).item() == pytest.approx(math.log(2), abs=1e-15)


def test_cross_entropy_confident_correct():
    assert dc.cross_entropy(Tensor([[20.0, -20.0]]), [0]).item() < 1e-15


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(LabelRangeError):
        dc.cross_entropy(Tensor([[0.0, 0.0]]), [2])


# -- frobenius --------------------------------------------------------------

def test_frobenius_values():
    assert dc.frobenius_sq(Tensor(np.zeros((2, 2)))).item() == 0.0
    assert dc.frobenius_sq(Tensor([[1.0, 2.0], [3.0, 4.0]])).item() == 30.0


def test_frobenius_gradient_is_twice_input(rng):
    x = leaf(rng.uniform(-1, 1, (3, 3)))
    dc.frobenius_sq(x).backward()
    assert np.array_equal(x.grad, 2.0 * x.data)
    numeric = dc.numeric_grad(lambda: dc.frobenius_sq(Tensor(x.data)).item(), x)
    assert dc.relative_error(x.grad, numeric) < 1e-6


# -- gradient reversal ------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=finite),
       st.floats(0, 3))
def test_grad_reverse_forward_is_bit_identical(x, lam):
    out = dc.grad_reverse(Tensor(x), lam).data
    assert out.tobytes() == np.asarray(x, dtype=np.float64).tobytes()


def test_grad_reverse_lambda_zero_blocks_gradient():
    x = leaf([[0.3, -0.7]])
    dc.frobenius_sq(dc.grad_reverse(x, 0.0)).backward()
    assert np.all(x.grad == 0)


@pytest.mark.parametrize("x0", [-1.5, 0.25, 2.0])
def test_grad_reverse_square_chain(x0):
    x = leaf([[x0]])
    dc.frobenius_sq(dc.grad_reverse(x, 1.0)).backward()
    assert x.grad[0, 0] == -2.0 * x0


def test_grad_reverse_rejects_negative_lambda():
    with pytest.raises(ValueError):
        dc.grad_reverse(Tensor([[1.0]]), -0.1)


def test_dann_lambda_schedule_endpoints():
    assert dc.dann_lambda(0.0) == 0.0
    assert dc.dann_lambda(1.0) == pytest.approx(2 / (1 + math.exp(-10)) - 1, abs=1e-15)
    assert dc.dann_lambda(0.5) == pytest.approx(2 / (1 + math.exp(-5)) - 1, abs=1e-15)


# -- structural ops ---------------------------------------------------------

def test_elementwise_sum_with_zero(rng):
    x = rng.normal(size=(3, 4))
    assert np.array_equal(dc.elementwise_sum(Tensor(x), Tensor(np.zeros((3, 4)))).data, x)


def test_double_transpose(rng):
    x = rng.normal(size=(3, 4))
    assert np.array_equal(dc.transpose(dc.transpose(Tensor(x))).data, x)


def test_concat_split_round_trip(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(5, 3))
    parts = dc.split_rows(dc.concat_rows([Tensor(a), Tensor(b)]), [2, 5])
    assert np.array_equal(parts[0].data, a) and np.array_equal(parts[1].data, b)


def test_backward_requires_scalar():
    with pytest.raises(DimensionError):
        leaf(np.ones((2, 2))).backward()


# -- graph semantics --------------------------------------------------------

def test_parameter_used_twice_accumulates(rng):
    w = leaf(rng.uniform(-1, 1, (3, 3)))
    x = Tensor(rng.uniform(-1, 1, (2, 3)))

    def build(wt):
        h = dc.matmul(x, wt)
        return dc.frobenius_sq(dc.matmul(h, wt))  # w appears on two paths

    build(w).backward()
    numeric = dc.numeric_grad(lambda: build(Tensor(w.data)).item(), w)
    assert dc.relative_error(w.grad, numeric) < 1e-6

    # the same value split into two independent copies: gradients must add up
    w1, w2 = leaf(w.data.copy()), leaf(w.data.copy())
    dc.frobenius_sq(dc.matmul(dc.matmul(x, w1), w2)).backward()
    np.testing.assert_allclose(w.grad, w1.grad + w2.grad, rtol=1e-12, atol=1e-12)


def test_shared_subgraph_backward_runs_once_per_node(rng):
    x = leaf(rng.uniform(-1, 1, (2, 2)))
    h = dc.relu(x)
    calls = []
    original = h._backward

    def counting():
        calls.append(1)
        original()

    h._backward = counting
    dc.add(dc.frobenius_sq(h), dc.frobenius_sq(dc.scale(h, 2.0))).backward()
    assert len(calls) == 1


def test_every_reachable_parameter_gets_a_gradient(small_model, small_config, rng):
    from fdrl.objectives import compute_losses

    H = rng.normal(size=(4, 6))
    total, _, _ = compute_losses(small_model, H, H + 0.1, np.array([0, 1, 2, 0]), small_config, 0.5, 0.7)
    total.backward()
    missing = [n for n, p in small_model.parameters().items() if p.grad is None]
    assert missing == []


# -- registered finite-difference suite -------------------------------------

@pytest.mark.parametrize("name", sorted(dc.GRADCHECKS))
def test_registered_gradcheck(name):
    err = dc.run_gradchecks([name], seed=0)[name]
    assert err < 1e-4, f"{name}: {err:.3e}"


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_gradchecks_hold_for_random_seeds(seed):
    for name, err in dc.run_gradchecks(["matmul", "relu", "softmax_rows", "block_matmul_nt"], seed=seed).items():
        assert err < 1e-4, name
