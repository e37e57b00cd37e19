import warnings
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from corrprune import diffmath as dm
from corrprune.audit import PRIMITIVE_CASES, case_primitive
from corrprune.exceptions import ContractError, DegenerateGeometryWarning, NumericError


def test_primitive_set_contents():
    prims = dm.primitive_set()
    assert "softmax" in prims
    assert "grouped-conv-1d" in prims
    assert "symmetric-smallest-eigenpair" in prims
    assert prims == dm.primitive_set()


def test_value_and_grad_square_sum():
    value, (g,) = dm.value_and_grad(lambda x: dm.sum(x * x), [np.array([1.0, 2.0])])
    assert value == 5.0
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_softmax_sum_has_zero_gradient():
    x = np.random.default_rng(0).normal(size=7)
    value, (g,) = dm.value_and_grad(lambda t: dm.sum(dm.softmax(t)), [x])
    assert value == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(g, 0.0, atol=1e-15)


def test_non_scalar_output_rejected():
    with pytest.raises(ContractError):
        dm.value_and_grad(lambda x: x * 2.0, [np.ones(3)])


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_nonfinite_reports_node():
    with pytest.raises(NumericError) as info:
        dm.value_and_grad(lambda x: dm.sum(dm.log(x)), [np.array([1.0, -1.0])])
    assert info.value.node is not None
    assert info.value.node.op == "log"


def test_finite_diff_exp_at_zero():
    report = dm.finite_diff_check(lambda x: dm.sum(dm.exp(x)), [np.zeros(1)])
    assert abs(report.entries[0].numeric[0] - 1.0) < 1e-8
    assert report.passed


def test_finite_diff_flags_abs_kink():
    absval = lambda x: dm.sum(dm.relu(x) + dm.relu(-x))
    report = dm.finite_diff_check(absval, [np.zeros(1)])
    assert report.flagged == ["0"]
    assert report.max_abs >= 0.5
    assert not report.passed


def test_finite_diff_requires_double():
    with pytest.raises(ContractError):
        dm.finite_diff_check(lambda x: dm.sum(x), [np.ones(2, dtype=np.float32)])


CASES = PRIMITIVE_CASES


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients_match_finite_differences(name):
    make, f = CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    report = dm.finite_diff_check(f, make(rng), rtol=1e-4, atol=1e-6)
    assert report.passed, report.table()


def test_every_primitive_has_a_gradcheck_case():
    covered = {case_primitive(name) for name in CASES}
    covered.add("detach")  # no gradient by definition; covered in test_detach_blocks_gradient
    missing = set(dm.primitive_set()) - covered
    assert not missing


def test_detach_blocks_gradient():
    x = np.array([0.3, -1.2])
    _, (g,) = dm.value_and_grad(lambda t: dm.sum(dm.detach(t) * t), [x])
    np.testing.assert_array_equal(g, x)


def test_straight_through_value_is_exactly_one():
    y = dm.softmax(dm.Tensor(np.random.default_rng(1).normal(size=50), True))
    r = 1.0 + (y - dm.detach(y))
    assert np.all(r.value == 1.0)


def test_eigen_gap_guard_zeroes_gradient():
    m = np.diag([1.0, 1.0, 3.0])
    with pytest.warns(DegenerateGeometryWarning):
        _, (g,) = dm.value_and_grad(lambda a: dm.sum(dm.sym_smallest_eigenpair(a)[0] * np.arange(3.0)), [m])
    np.testing.assert_array_equal(g, 0.0)


def test_eigenvector_sign_convention():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(5, 6, 6))
    vec, val = dm.sym_smallest_eigenpair(a)
    v = vec.value
    pivots = v[np.arange(5), np.abs(v).argmax(axis=1)]
    assert np.all(pivots > 0)
    sym = 0.5 * (a + a.transpose(0, 2, 1))
    np.testing.assert_allclose(np.einsum("bij,bj->bi", sym, v), val.value[:, None] * v, atol=1e-10)


def test_tape_is_deterministic():
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(4, 8, 6)), rng.normal(size=(6, 3))

    def f(a, b):
        h = dm.silu(dm.matmul(a, b))
        return dm.sum(dm.softmax(h, axis=1) * dm.var(h, axis=1, keepdims=True))

    v1, g1 = dm.value_and_grad(f, [x, w])
    v2, g2 = dm.value_and_grad(f, [x, w])
    assert v1 == v2
    for a, b in zip(g1, g2):
        assert np.array_equal(a, b)


def test_node_ids_increase():
    a = dm.Tensor(np.ones(2), True)
    b = dm.exp(a)
    c = dm.mul(b, a)
    assert a.id < b.id < c.id


def test_order_invariant_mean_is_permutation_exact():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(3, 257, 5)).astype(np.float32) * 1e3
    perm = rng.permutation(257)
    a = dm.mean(x, axis=1, order_invariant=True).value
    b = dm.mean(x[:, perm], axis=1, order_invariant=True).value
    assert np.array_equal(a, b)
    v1 = dm.var(x, axis=1, order_invariant=True).value
    v2 = dm.var(x[:, perm], axis=1, order_invariant=True).value
    assert np.array_equal(v1, v2)


def test_row_stable_matmul_is_permutation_exact():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(4, 301, 32))
    w = rng.normal(size=(32, 17))
    perm = rng.permutation(301)
    a = dm.matmul(x, w, row_stable=True).value[:, perm]
    b = dm.matmul(x[:, perm], w, row_stable=True).value
    assert np.array_equal(a, b)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_gradient_is_linear(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=6)
    f = lambda t: dm.sum(dm.tanh(t) * dm.exp(t * 0.3))
    g = lambda t: dm.sum(dm.softmax(t) * np.arange(6.0)) + dm.sum(dm.silu(t))
    _, (gf,) = dm.value_and_grad(f, [x])
    _, (gg,) = dm.value_and_grad(g, [x])
    _, (gs,) = dm.value_and_grad(lambda t: f(t) + g(t), [x])
    np.testing.assert_allclose(gs, gf + gg, rtol=1e-12, atol=1e-14)


def test_dict_inputs_round_trip():
    value, grads = dm.value_and_grad(lambda p: dm.sum(p["a"] * p["b"]), {"a": np.ones(3), "b": np.arange(3.0)})
    assert value == 3.0
    np.testing.assert_array_equal(grads["a"], np.arange(3.0))
    np.testing.assert_array_equal(grads["b"], np.ones(3))


def test_no_warnings_for_generic_eigen():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        dm.value_and_grad(lambda a: dm.sum(dm.sym_smallest_eigenpair(a)[0]), [np.diag([1.0, 2.0, 3.0])])
