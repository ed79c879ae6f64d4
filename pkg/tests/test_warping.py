import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import special

from microseq.exceptions import BadClass, DimMismatch, DomainError
from microseq.losses import loss_dtw
from microseq.warping import (
    SoftDtwConfig,
    beta_cdf,
    build_ideal_reference,
    build_target_sequence,
    hard_dtw,
    pairwise_cost_matrix,
    softdtw_distance,
    softdtw_gradient,
    softdtw_value,
)

from .oracles import beta_cdf_quad, enumerate_dtw, numeric_grad


def test_cost_matrix_examples():
    np.testing.assert_array_equal(pairwise_cost_matrix([[0.0], [1.0]], [[0.0], [1.0]]), [[0, 1], [1, 0]])
    B = np.array([[1.0, 2.0], [3.0, -1.0]])
    np.testing.assert_array_equal(pairwise_cost_matrix(np.zeros((1, 2)), B), [[5.0, 10.0]])


def test_cost_matrix_matches_double_loop():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    loop = np.array([[sum((A[i, k] - B[j, k]) ** 2 for k in range(3)) for j in range(5)] for i in range(4)])
    np.testing.assert_allclose(pairwise_cost_matrix(A, B), loop, atol=1e-12, rtol=0)


def test_cost_matrix_dim_mismatch():
    with pytest.raises(DimMismatch):
        pairwise_cost_matrix(np.zeros((2, 3)), np.zeros((2, 4)))


@pytest.mark.parametrize("gamma", [1e-3, 0.1, 1.0, 50.0])
def test_single_frame_value_is_zero(gamma):
    assert softdtw_value([[5.0]], [[5.0]], SoftDtwConfig(gamma)).value == 0.0


def test_three_by_two_example():
    A, B = [[0.0], [1.0], [2.0]], [[0.0], [2.0]]
    assert hard_dtw(A, B) == 1.0
    assert enumerate_dtw(A, B) == 1.0
    assert softdtw_value(A, B, SoftDtwConfig(1e-4)).value == pytest.approx(1.0, abs=1e-3)


def test_dp_table_shape_and_borders():
    res = softdtw_value(np.zeros((3, 2)), np.ones((4, 2)))
    assert res.dp_table.shape == (5, 6)
    assert np.isinf(res.dp_table[0, 1]) and np.isinf(res.dp_table[1, 0])
    assert res.value == res.dp_table[3, 4]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_hard_dtw_equals_path_enumeration(n, m, c, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(n, c)), rng.normal(size=(m, c))
    assert hard_dtw(A, B) == pytest.approx(enumerate_dtw(A, B), rel=1e-12, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 2**32 - 1))
def test_soft_value_bounded_by_hard(n, m, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(n, 2)), rng.normal(size=(m, 2))
    assert softdtw_value(A, B, SoftDtwConfig(1.0)).value <= hard_dtw(A, B) + 1e-12


def test_value_only_kernel_agrees_with_table():
    rng = np.random.default_rng(4)
    A, B = rng.normal(size=(9, 3)), rng.normal(size=(6, 3))
    for gamma in (0.01, 0.1, 2.0):
        assert softdtw_distance(A, B, gamma) == pytest.approx(softdtw_value(A, B, gamma).value, rel=1e-13)


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(1)
    A, B = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
    grad = softdtw_gradient(A, B, SoftDtwConfig(1.0)).grad_first
    num = numeric_grad(lambda a: softdtw_value(a, B, SoftDtwConfig(1.0)).value, A, h=1e-5)
    assert np.max(np.abs(grad - num)) / np.max(np.abs(num)) <= 1e-4


def test_gradient_vanishes_at_identity_for_small_gamma():
    A = np.random.default_rng(2).normal(size=(5, 2))
    grad = softdtw_gradient(A, A, SoftDtwConfig(1e-3)).grad_first
    num = numeric_grad(lambda a: softdtw_value(a, A, SoftDtwConfig(1e-3)).value, A, h=1e-6)
    assert np.linalg.norm(grad) < 1e-6
    assert np.linalg.norm(num) < 1e-4


def test_gradient_exactly_zero_for_zero_inputs():
    grad = softdtw_gradient(np.zeros((3, 2)), np.zeros((4, 2))).grad_first
    assert np.array_equal(grad, np.zeros((3, 2)))


def test_gamma_domain():
    with pytest.raises(ValueError):
        SoftDtwConfig(0.0)
    with pytest.raises(ValueError):
        SoftDtwConfig(2e6)


def test_beta_cdf_endpoints_and_uniform():
    assert beta_cdf(0.0, 3, 20) == 0.0
    assert beta_cdf(1.0, 3, 20) == 1.0
    assert beta_cdf(0.3, 1, 1) == pytest.approx(0.3, abs=1e-15)


def test_beta_cdf_quadrature_point():
    assert abs(beta_cdf(0.25, 3, 20) - beta_cdf_quad(0.25, 3, 20)) <= 1e-10


@pytest.mark.parametrize("alpha,beta", [(2, 5), (3, 20), (7, 3)])
def test_beta_cdf_matches_scipy(alpha, beta):
    for x in np.linspace(0, 1, 21):
        assert beta_cdf(x, alpha, beta) == pytest.approx(special.betainc(alpha, beta, x), abs=1e-13)


def test_beta_cdf_domain():
    with pytest.raises(DomainError):
        beta_cdf(1.5, 3, 20)
    with pytest.raises(DomainError):
        beta_cdf(0.5, 2.5, 3)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_beta_cdf_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert beta_cdf(lo, 3, 20) <= beta_cdf(hi, 3, 20)


def test_constant_target():
    t = build_target_sequence(3, 2, 1, "constant")
    np.testing.assert_array_equal(t.values, [[0, 1], [0, 1], [0, 1]])


def test_implicit_target_shape():
    t = build_target_sequence(75, 3, 2, "implicit")
    col = t.values[:, 2]
    assert np.all(np.diff(col) >= 0)
    assert col[-1] == 1.0
    np.testing.assert_allclose(t.values.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(t.values[:, 1] == 0.0)


def test_implicit_target_quadrature_row():
    t = build_target_sequence(25, 2, 1, "implicit")
    assert abs(t.values[6, 1] - beta_cdf_quad(0.28, 3, 20)) <= 1e-10
    assert abs(build_target_sequence(4, 2, 1).values[0, 1] - beta_cdf_quad(0.25, 3, 20)) <= 1e-10


def test_background_class_always_constant():
    t = build_target_sequence(5, 2, 0, "implicit")
    assert t.kind == "constant"
    np.testing.assert_array_equal(t.values[:, 0], 1.0)


def test_target_bad_class():
    with pytest.raises(BadClass):
        build_target_sequence(5, 2, 2)


def test_ideal_reference_identities():
    y_l = build_target_sequence(10, 2, 1)
    ideal = build_ideal_reference(10, 2, 1)
    np.testing.assert_array_equal(ideal.values, y_l.values)
    const = build_ideal_reference(7, 3, 2, "constant").values
    assert np.all(const == const[0])
    assert loss_dtw(build_ideal_reference(30, 2, 1).values, y_l, build_ideal_reference(30, 2, 1))[0] == 0.0

