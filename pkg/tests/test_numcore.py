import math

import numpy as np
import pytest

from dalip.errors import ContractError, NonFiniteError, ParameterError, ShapeError
from dalip.gradcheck import finite_diff_check
from dalip.numcore import BACKWARD_RULES, Primitive, Tape, as_tensor, backward


def test_as_tensor_shapes():
    assert as_tensor(3.0).shape == (1, 1)
    assert as_tensor([1, 2, 3]).shape == (1, 3)
    assert as_tensor([[1, 2], [3, 4]]).shape == (2, 2)

    with pytest.raises(ShapeError):
        as_tensor(np.zeros((2, 2, 2)))


def test_as_tensor_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        as_tensor([[1.0, math.nan]])

    with pytest.raises(NonFiniteError):
        as_tensor([[math.inf]])


def test_tensors_are_read_only():
    t = as_tensor([[1.0, 2.0]])

    with pytest.raises(ValueError):
        t[0, 0] = 5.0


def test_every_primitive_has_a_backward_rule():
    assert set(BACKWARD_RULES) == set(Primitive)


#
#   Forward values
#

def test_matmul_examples():
    tape = Tape()
    a = tape.constant([[1, 2], [3, 4]])

    np.testing.assert_array_equal(tape.value(tape.matmul(tape.constant(np.eye(2)), a)), [[1, 2], [3, 4]])
    np.testing.assert_array_equal(tape.value(tape.matmul(a, tape.constant([[5, 6], [7, 8]]))), [[19, 22], [43, 50]])
    np.testing.assert_array_equal(tape.value(tape.matmul(tape.constant(np.zeros((2, 2))), tape.constant(np.ones((2, 3))))),
                                  np.zeros((2, 3)))


def test_matmul_shape_error_names_both_shapes():
    tape = Tape()

    with pytest.raises(ShapeError, match=r"\(2×3\).*\(2×2\)"):
        tape.matmul(tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 2))))


def test_safe_sqrt_examples():
    tape = Tape()

    assert tape.value(tape.safe_sqrt(tape.constant(4.0), 0.0))[0, 0] == 2.0
    assert tape.value(tape.safe_sqrt(tape.constant(0.0), 1e-8))[0, 0] == pytest.approx(1e-4, rel=1e-12)
    assert tape.value(tape.safe_sqrt(tape.constant(-1e-16), 0.0))[0, 0] == 0.0

    x = tape.leaf(1.0)
    grads = backward(tape, tape.sum_all(tape.safe_sqrt(x, 0.0)))
    assert grads.of(x)[0, 0] == pytest.approx(0.5)


def test_safe_sqrt_rejects_negative_eps():
    tape = Tape()

    with pytest.raises(ParameterError):
        tape.safe_sqrt(tape.constant(1.0), -1e-3)


def test_layer_norm_examples():
    tape = Tape()
    gain, bias = tape.constant(np.ones((1, 3))), tape.constant(np.zeros((1, 3)))

    normed = tape.value(tape.layer_norm(tape.constant([[1.0, 2.0, 3.0]]), gain, bias, 1e-5))
    np.testing.assert_allclose(normed, [[-1.22474, 0.0, 1.22474]], atol=1e-5)

    for c in (0.0, 3.5, -12.0):
        flat = tape.value(tape.layer_norm(tape.constant([[c, c, c]]), gain, bias, 1e-5))
        np.testing.assert_array_equal(flat, np.zeros((1, 3)))


def test_layer_norm_shape_mismatch():
    tape = Tape()

    with pytest.raises(ShapeError):
        tape.layer_norm(tape.constant([[1.0, 2.0]]), tape.constant(np.ones((1, 3))), tape.constant(np.zeros((1, 3))))


def test_triu_vec_row_major():
    tape = Tape()
    value = tape.value(tape.triu_vec(tape.constant([[1, 2, 3], [4, 5, 6], [7, 8, 9]])))

    np.testing.assert_array_equal(value, [[1, 2, 3, 5, 6, 9]])


def test_log_sum_exp_rows_is_stable():
    tape = Tape()
    value = tape.value(tape.log_sum_exp_rows(tape.constant([[1000.0, 1000.0]])))

    assert value[0, 0] == pytest.approx(1000.0 + math.log(2.0))


def test_l2_normalize_keeps_zero_rows():
    tape = Tape()
    value = tape.value(tape.l2_normalize(tape.constant([[3.0, 4.0], [0.0, 0.0]])))

    np.testing.assert_allclose(value, [[0.6, 0.8], [0.0, 0.0]], atol=1e-12)


def test_mean_rows_and_gram_are_row_order_exact(rng):
    x = rng.standard_normal((9, 4))
    perm = rng.permutation(9)
    tape = Tape()

    assert np.array_equal(tape.value(tape.gram(tape.constant(x))), tape.value(tape.gram(tape.constant(x[perm]))))
    assert np.array_equal(tape.value(tape.mean_rows(tape.constant(x))), tape.value(tape.mean_rows(tape.constant(x[perm]))))


def test_split_then_concat_is_identity(rng):
    x = rng.standard_normal((3, 6))
    w = rng.standard_normal((3, 6))
    tape = Tape()
    leaf = tape.leaf(x)
    joined = tape.concat_cols(tape.split_cols(leaf, 3))

    assert np.array_equal(tape.value(joined), x)

    grads = backward(tape, tape.sum_all(tape.hadamard(joined, tape.constant(w))))
    assert np.array_equal(grads.of(leaf), w)


def test_split_cols_needs_equal_blocks():
    tape = Tape()

    with pytest.raises(ShapeError):
        tape.split_cols(tape.constant(np.ones((2, 5))), 2)


def test_operations_are_pure(rng):
    x = rng.standard_normal((5, 4))

    def run():
        tape = Tape()
        node = tape.log_sum_exp_rows(tape.matmul(tape.constant(x), tape.transpose(tape.constant(x))))
        return tape.value(node)

    assert np.array_equal(run(), run())


#
#   Backward
#

def test_backward_matmul_sum_gives_ones_times_b_transposed(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 4))
    tape = Tape()
    na = tape.leaf(a)
    grads = backward(tape, tape.sum_all(tape.matmul(na, tape.constant(b))))

    np.testing.assert_allclose(grads.of(na), np.ones((2, 4)) @ b.T)


def test_backward_sqrt_at_four():
    tape = Tape()
    x = tape.leaf([[4.0]])
    grads = backward(tape, tape.sum_all(tape.safe_sqrt(x, 0.0)))

    assert grads.of(x)[0, 0] == 0.25


def test_backward_needs_scalar_root():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)))

    with pytest.raises(ContractError):
        backward(tape, x)


def test_unreached_nodes_get_zero_gradients():
    tape = Tape()
    x, y = tape.leaf([[1.0, 2.0]]), tape.leaf([[3.0]])
    grads = backward(tape, tape.sum_all(x))

    assert y not in grads
    np.testing.assert_array_equal(grads.of(y), [[0.0]])


def test_fan_out_accumulates(rng):
    x0 = rng.standard_normal((3, 3))

    def fn(tape, nodes):
        x = nodes[0]
        return tape.sum_all(tape.add(tape.hadamard(x, x), tape.exp(tape.scale(x, 0.5))))

    report = finite_diff_check(fn, [x0])
    assert report.passed

    tape = Tape()
    x = tape.leaf(x0)
    grads = backward(tape, fn(tape, [x]))
    np.testing.assert_allclose(grads.of(x), 2 * x0 + 0.5 * np.exp(0.5 * x0), rtol=1e-12)


def _weighted(tape, node, seed):
    w = np.random.Generator(np.random.Philox(seed)).standard_normal(tape.value(node).shape)
    return tape.sum_all(tape.hadamard(node, tape.constant(w)))


def _case(primitive, rng):
    """ (function, parameters) exercising {primitive} on random shapes """

    r, c = (int(v) for v in rng.integers(1, 5, size=2))
    a = rng.standard_normal((r, c))

    if primitive is Primitive.MATMUL:
        return (lambda t, n: t.matmul(n[0], n[1])), [a, rng.standard_normal((c, int(rng.integers(1, 5))))]
    if primitive is Primitive.TRANSPOSE:
        return (lambda t, n: t.transpose(n[0])), [a]
    if primitive is Primitive.ADD:
        return (lambda t, n: t.add(n[0], n[1])), [a, rng.standard_normal((r, c))]
    if primitive is Primitive.SUBTRACT:
        return (lambda t, n: t.subtract(n[0], n[1])), [a, rng.standard_normal((r, c))]
    if primitive is Primitive.SCALE:
        return (lambda t, n: t.scale(n[0], -1.7)), [a]
    if primitive is Primitive.HADAMARD:
        return (lambda t, n: t.hadamard(n[0], n[1])), [a, rng.standard_normal((r, c))]
    if primitive is Primitive.SAFE_SQRT:
        return (lambda t, n: t.safe_sqrt(n[0], 1e-8)), [rng.uniform(0.5, 2.0, size=(r, c))]
    if primitive is Primitive.RELU:
        return (lambda t, n: t.relu(n[0])), [np.sign(a) * (np.abs(a) + 0.1)]
    if primitive is Primitive.LAYER_NORM:
        return (lambda t, n: t.layer_norm(n[0], n[1], n[2])), [rng.standard_normal((1, c + 1)), rng.standard_normal((1, c + 1)),
                                                              rng.standard_normal((1, c + 1))]
    if primitive is Primitive.L2_NORMALIZE:
        return (lambda t, n: t.l2_normalize(n[0])), [a + 0.1]
    if primitive is Primitive.MEAN_ROWS:
        return (lambda t, n: t.mean_rows(n[0])), [a]
    if primitive is Primitive.GRAM:
        return (lambda t, n: t.gram(n[0])), [a]
    if primitive is Primitive.CONCAT_COLS:
        return (lambda t, n: t.concat_cols([n[0], n[1]])), [a, rng.standard_normal((r, 2))]
    if primitive is Primitive.CONCAT_ROWS:
        return (lambda t, n: t.concat_rows([n[0], n[1]])), [a, rng.standard_normal((2, c))]
    if primitive is Primitive.SPLIT_COLS:
        return (lambda t, n: t.concat_cols(t.split_cols(n[0], 2)[::-1])), [rng.standard_normal((r, 2 * c))]
    if primitive is Primitive.TRIU_VEC:
        return (lambda t, n: t.triu_vec(n[0])), [rng.standard_normal((c, c))]
    if primitive is Primitive.SUM_ALL:
        return (lambda t, n: t.scale(t.sum_all(n[0]), 1.0)), [a]
    if primitive is Primitive.LOG_SUM_EXP_ROWS:
        return (lambda t, n: t.log_sum_exp_rows(n[0])), [a]
    if primitive is Primitive.EXP:
        return (lambda t, n: t.exp(n[0])), [a]
    if primitive is Primitive.SCALE_BY:
        return (lambda t, n: t.scale_by(n[0], n[1])), [a, rng.standard_normal((1, 1))]

    return (lambda t, n: n[0]), [a]


@pytest.mark.parametrize("primitive", list(Primitive), ids=lambda p: p.value)
def test_primitive_gradients_match_finite_differences(primitive):
    rng = np.random.Generator(np.random.Philox(list(Primitive).index(primitive)))

    for trial in range(20):
        fn, params = _case(primitive, rng)
        report = finite_diff_check(lambda tape, nodes: _weighted(tape, fn(tape, nodes), trial), params)

        assert report.passed, f"{primitive.value}, trial {trial}: {report.max_rel_error:.3e}"
