"""Kernel contracts and gradient correctness of every primitive."""

import numpy as np
import pytest

from unienc import numerics as nx
from unienc.errors import ContractViolation, DomainError, NumericalError
from unienc.numerics import GradTape, Tensor


# ---------------------------------------------------------------------------
# log_sum_exp
# ---------------------------------------------------------------------------

def test_lse_identity():
    assert nx.log_sum_exp([0.0, 0.0]) == pytest.approx(0.6931471805599453, abs=1e-12)


def test_lse_absorbing_neg_inf():
    assert nx.log_sum_exp([-np.inf, 3.25]) == 3.25
    assert nx.log_sum_exp([-np.inf, -np.inf]) == -np.inf


def test_lse_shifted_far_from_zero():
    # frozen from a 40-digit evaluation of log(exp(-1000.5) + exp(-1001.5))
    assert nx.log_sum_exp([-1000.5, -1001.5]) == pytest.approx(
        -1000.1867383124818, abs=1e-10)


def test_lse_empty_is_domain_error():
    with pytest.raises(DomainError):
        nx.log_sum_exp([])


# ---------------------------------------------------------------------------
# forward contracts
# ---------------------------------------------------------------------------

def test_softmax_symmetry_and_row_sums(rng):
    out = nx.softmax_rows(Tensor([[0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[0.5, 0.5]])
    x = Tensor(rng.normal(size=(6, 9)))
    sums = nx.softmax_rows(x).data.sum(axis=1)
    np.testing.assert_allclose(sums, 1.0, atol=1e-12)


def test_log_softmax_exp_row_sums(rng):
    x = Tensor(rng.normal(scale=3.0, size=(5, 7)))
    sums = np.exp(nx.log_softmax_rows(x).data).sum(axis=1)
    np.testing.assert_allclose(sums, 1.0, atol=1e-10)


def test_layer_norm_constant_row_is_zero():
    gain = Tensor(np.ones(4))
    bias = Tensor(np.zeros(4))
    out = nx.layer_norm(Tensor([[2.5, 2.5, 2.5, 2.5]]), gain, bias)
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_attention_one_hot_mask_selects_value_row(rng):
    q = Tensor(rng.normal(size=(1, 3, 4)))
    k = Tensor(rng.normal(size=(1, 5, 4)))
    v = Tensor(rng.normal(size=(1, 5, 6)))
    mask = np.zeros((3, 5), dtype=bool)
    mask[:, 2] = True  # every query may only see key 2
    out = nx.masked_scaled_dot_attention(q, k, v, mask)
    for row in range(3):
        np.testing.assert_allclose(out.data[0, row], v.data[0, 2], atol=1e-12)


def test_attention_all_pass_mask_bit_identical(rng):
    q = Tensor(rng.normal(size=(2, 4, 8)))
    k = Tensor(rng.normal(size=(2, 6, 8)))
    v = Tensor(rng.normal(size=(2, 6, 8)))
    none = nx.masked_scaled_dot_attention(q, k, v, None)
    allpass = nx.masked_scaled_dot_attention(q, k, v, np.ones((4, 6), dtype=bool))
    assert np.array_equal(none.data, allpass.data)


def test_masked_positions_get_exactly_zero_weight(rng):
    scores = nx.mask_scores(Tensor(rng.normal(size=(3, 5))),
                            np.eye(3, 5, dtype=bool))
    weights = nx.softmax_rows(scores).data
    assert np.all(weights[~np.eye(3, 5, dtype=bool)] == 0.0)


def test_kernels_deterministic(rng):
    x = rng.normal(size=(7, 7))
    a = nx.gelu(nx.matmul(Tensor(x), Tensor(x))).data
    b = nx.gelu(nx.matmul(Tensor(x), Tensor(x))).data
    assert np.array_equal(a, b)


def test_shape_mismatch_raises():
    with pytest.raises(ContractViolation):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(ContractViolation):
        nx.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(ContractViolation):
        nx.add_bias(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))


def test_conv1d_shapes_and_too_short():
    x = Tensor(np.ones((5, 3)))
    w = Tensor(np.ones((3, 3, 2)))
    b = Tensor(np.zeros(2))
    out = nx.conv1d(x, w, b, stride=2, padding=1)
    assert out.shape == (3, 2)  # ceil(5/2)
    with pytest.raises(DomainError):
        nx.conv1d(Tensor(np.ones((1, 3))), w, b, stride=1, padding=0)


# ---------------------------------------------------------------------------
# backward: closed forms
# ---------------------------------------------------------------------------

def test_backward_linear_map_outer_product(rng):
    w = nx.parameter(rng.normal(size=(3, 4)), "w")
    x = Tensor(rng.normal(size=(4, 2)))
    with GradTape() as tape:
        loss = nx.sum_all(nx.matmul(w, x))
        grads = nx.backward(tape, loss)
    # d(sum(Wx))/dW = outer(1, sum over output cols of x rows) = 1 @ x^T
    expected = np.ones((3, 2)) @ x.data.T
    np.testing.assert_allclose(grads[w], expected, atol=1e-12)


def test_backward_log_softmax_ce_closed_form(rng):
    logits = nx.parameter(rng.normal(size=(1, 5)), "logits")
    target = 3
    with GradTape() as tape:
        lsm = nx.log_softmax_rows(logits)
        loss = nx.mul_const(nx.gather_rows(lsm, np.array([0]), np.array([target])), -1.0)
        loss = nx.sum_all(loss)
        grads = nx.backward(tape, loss)
    softmax = np.exp(logits.data) / np.exp(logits.data).sum()
    expected = softmax.copy()
    expected[0, target] -= 1.0
    np.testing.assert_allclose(grads[logits], expected, atol=1e-12)


def test_backward_requires_scalar_loss():
    w = nx.parameter(np.ones((2, 2)), "w")
    with GradTape() as tape:
        out = nx.matmul(w, Tensor(np.ones((2, 2))))
        with pytest.raises(ContractViolation):
            nx.backward(tape, out)


def test_backward_reuse_accumulates(rng):
    x = nx.parameter(rng.normal(size=(3, 3)), "x")
    with GradTape() as tape:
        loss = nx.sum_all(nx.add(x, x))
        grads = nx.backward(tape, loss)
    np.testing.assert_allclose(grads[x], 2 * np.ones((3, 3)), atol=1e-14)


# ---------------------------------------------------------------------------
# backward vs finite differences, every primitive with a registered gradient
# ---------------------------------------------------------------------------

def _check_grad(build, params, tol=1e-4):
    for p in params:
        p.grad = None
    with GradTape() as tape:
        loss = build()
        nx.backward(tape, loss)
    analytic = [p.grad for p in params]
    numeric = nx.finite_diff_grad(lambda: build().item(), params, eps=1e-5)
    for a, n in zip(analytic, numeric):
        assert nx.relative_error(a, n) < tol


def test_grad_matmul_add_bias(rng):
    a = nx.parameter(rng.uniform(-1, 1, (3, 4)), "a")
    b = nx.parameter(rng.uniform(-1, 1, (4, 5)), "b")
    c = nx.parameter(rng.uniform(-1, 1, 5), "c")
    _check_grad(lambda: nx.sum_all(nx.gelu(nx.add_bias(nx.matmul(a, b), c))), [a, b, c])


def test_grad_batched_matmul(rng):
    a = nx.parameter(rng.uniform(-1, 1, (2, 3, 4)), "a")
    b = nx.parameter(rng.uniform(-1, 1, (2, 4, 5)), "b")
    _check_grad(lambda: nx.sum_all(nx.matmul(a, b)), [a, b])


def test_grad_layer_norm(rng):
    x = nx.parameter(rng.uniform(-1, 1, (4, 6)), "x")
    g = nx.parameter(rng.uniform(0.5, 1.5, 6), "g")
    b = nx.parameter(rng.uniform(-0.5, 0.5, 6), "b")
    _check_grad(lambda: nx.sum_all(nx.gelu(nx.layer_norm(x, g, b))), [x, g, b])


def test_grad_activations(rng):
    x = nx.parameter(rng.uniform(-1, 1, (5, 5)) + 0.01, "x")  # keep off the relu kink
    _check_grad(lambda: nx.sum_all(nx.gelu(x)), [x])
    _check_grad(lambda: nx.sum_all(nx.relu(x)), [x])


def test_grad_softmaxes(rng):
    x = nx.parameter(rng.uniform(-1, 1, (4, 6)), "x")
    w = Tensor(rng.uniform(-1, 1, (4, 6)))
    _check_grad(lambda: nx.sum_all(nx.matmul(nx.softmax_rows(x), Tensor(np.ones((6, 2))))),
                [x])
    _check_grad(lambda: nx.mean_all(nx.add(nx.log_softmax_rows(x), w)), [x])


def test_grad_attention_with_mask(rng):
    q = nx.parameter(rng.uniform(-1, 1, (2, 3, 4)), "q")
    k = nx.parameter(rng.uniform(-1, 1, (2, 5, 4)), "k")
    v = nx.parameter(rng.uniform(-1, 1, (2, 5, 4)), "v")
    mask = rng.random((3, 5)) > 0.3
    mask[:, 0] = True  # keep every row attendable
    _check_grad(lambda: nx.sum_all(nx.masked_scaled_dot_attention(q, k, v, mask)),
                [q, k, v])


def test_grad_conv1d(rng):
    x = nx.parameter(rng.uniform(-1, 1, (9, 3)), "x")
    w = nx.parameter(rng.uniform(-1, 1, (3, 3, 4)), "w")
    b = nx.parameter(rng.uniform(-1, 1, 4), "b")
    _check_grad(lambda: nx.sum_all(nx.gelu(nx.conv1d(x, w, b, stride=2, padding=1))),
                [x, w, b])


def test_grad_shape_ops(rng):
    x = nx.parameter(rng.uniform(-1, 1, (4, 6)), "x")
    y = nx.parameter(rng.uniform(-1, 1, (3, 6)), "y")

    def build():
        stacked = nx.concat_rows(x, y)
        part = nx.slice_rows(stacked, 2, 6)
        shaped = nx.reshape(nx.transpose(nx.reshape(part, (2, 2, 6)), (1, 0, 2)), (4, 6))
        picked = nx.gather_rows(shaped, np.array([0, 1, 2]), np.array([5, 0, 3]))
        return nx.mean_all(picked)

    _check_grad(build, [x, y])


def test_grad_dropout_mask_is_differentiable_through(rng):
    x = nx.parameter(rng.uniform(-1, 1, (6, 6)), "x")
    mask_rng = np.random.default_rng(55)

    # freeze one dropout realization, then differentiate that fixed graph
    with GradTape() as tape:
        out = nx.dropout(x, 0.4, np.random.default_rng(99))
        loss = nx.sum_all(out)
        nx.backward(tape, loss)
    kept = out.data != 0.0
    expected = np.where(kept, 1.0 / 0.6, 0.0)
    np.testing.assert_allclose(x.grad, expected, atol=1e-12)
    del mask_rng


# ---------------------------------------------------------------------------
# finite_diff_grad contracts
# ---------------------------------------------------------------------------

def test_fd_quadratic_exact():
    x = nx.parameter(np.array([3.0]), "x")
    grads = nx.finite_diff_grad(lambda: float(x.data[0] ** 2), [x], eps=1e-3)
    assert grads[0][0] == pytest.approx(6.0, abs=1e-6)


def test_fd_constant_zero():
    x = nx.parameter(np.array([1.0, -2.0]), "x")
    grads = nx.finite_diff_grad(lambda: 4.2, [x], eps=1e-5)
    np.testing.assert_array_equal(grads[0], np.zeros(2))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fd_reports_nonfinite_probe():
    x = nx.parameter(np.array([0.0]), "x")

    def loss():
        return float(np.log(x.data[0]))  # -inf at 0, nan below

    with pytest.raises(NumericalError, match="coordinate 0"):
        nx.finite_diff_grad(loss, [x], eps=1e-3)


def test_nested_tapes_rejected():
    with GradTape():
        with pytest.raises(ContractViolation):
            with GradTape():
                pass
