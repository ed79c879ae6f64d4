import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from microseq.data_io import FeatureSequence
from microseq.exceptions import EmptyPool, NonFiniteValue
from microseq.preprocessing import (
    DuplicateFrameRemover,
    StationaryHaarSplitter,
    adjacent_differences,
    deduplicate_sequence,
    prepare_case,
    select_tau,
    stationary_haar_decompose,
)

finite = st.floats(-100, 100, allow_nan=False)
sequences = arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 4)), elements=finite)


def test_adjacent_difference_is_squared():
    np.testing.assert_array_equal(adjacent_differences(np.array([[0.0, 0.0], [3.0, 4.0]])), [25.0])


def test_adjacent_difference_identical_frames():
    x = np.array([[1.0, 2.0], [1.0, 2.0], [0.0, 0.0]])
    assert adjacent_differences(x)[0] == 0.0


def test_adjacent_difference_matches_summation():
    x = np.random.default_rng(3).normal(size=(6, 8))
    expected = [sum((x[i + 1, k] - x[i, k]) ** 2 for k in range(8)) for i in range(5)]
    np.testing.assert_allclose(adjacent_differences(x), expected, rtol=1e-13)


def test_adjacent_difference_single_frame_and_nan():
    assert adjacent_differences(np.ones((1, 3))).size == 0
    with pytest.raises(NonFiniteValue):
        adjacent_differences(np.array([[0.0], [np.inf]]))


def test_select_tau_quantile():
    # pooled differences 1, 2, 3, 4
    x = np.cumsum(np.sqrt([0.0, 1.0, 2.0, 3.0, 4.0]))[:, None]
    assert select_tau([x], 0.25) == pytest.approx(1.75)


def test_select_tau_zero_fraction_is_minimum():
    x = np.array([[0.0], [2.0], [3.0], [7.0]])
    tau = select_tau([x], 0.0)
    assert tau == pytest.approx(1.0)
    _, report = deduplicate_sequence(x, tau)
    assert report.removed_count == 0


def test_select_tau_degenerate_pool():
    x = np.sqrt(5.0) * np.arange(5.0)[:, None]
    assert select_tau([x], 0.25) == pytest.approx(5.0)


def test_select_tau_empty_pool():
    with pytest.raises(EmptyPool):
        select_tau([np.ones((1, 2))], 0.25)


def test_dedup_exact_duplicate():
    A, B = [0.0, 0.0], [1.0, 1.0]
    out, report = deduplicate_sequence(np.array([A, A, B]), tau=0.5)
    np.testing.assert_array_equal(out, [A, B])
    assert report.removed_count == 1 and report.kept_indices == [0, 2]


def test_dedup_zero_tau_is_identity():
    x = np.array([[1.0], [1.0], [1.0]])
    out, report = deduplicate_sequence(x, 0.0)
    np.testing.assert_array_equal(out, x)
    assert report.removed_count == 0


def _brute_sweep(x, tau):
    kept = [0]
    for i in range(1, len(x)):
        if np.sum((x[i] - x[kept[-1]]) ** 2) >= tau:
            kept.append(i)
    return kept


def test_dedup_chain_keeps_every_second_frame():
    u = np.array([0.6, 0.8])
    x = np.arange(9.0)[:, None] * u
    _, report = deduplicate_sequence(x, 1.5)
    assert report.kept_indices == [0, 2, 4, 6, 8]
    assert report.kept_indices == _brute_sweep(x, 1.5)


def test_dedup_keeps_feature_sequence_metadata():
    seq = FeatureSequence("c1", np.array([[0.0], [0.0], [5.0]], dtype=np.float32), label=1)
    out, _ = deduplicate_sequence(seq, 1.0)
    assert out.case_id == "c1" and out.label == 1 and out.n == 2


@settings(max_examples=60, deadline=None)
@given(sequences, st.floats(0, 50))
def test_dedup_properties(x, tau):
    once, report = deduplicate_sequence(x, tau)
    twice, _ = deduplicate_sequence(once, tau)
    np.testing.assert_array_equal(once, twice)
    assert len(once) <= len(x)
    assert report.removed_count + len(report.kept_indices) == len(x)
    assert report.kept_indices[0] == 0
    assert all(a < b for a, b in zip(report.kept_indices, report.kept_indices[1:]))
    if len(once) > 1:
        assert np.all(adjacent_differences(once) >= tau)


def test_haar_constant_sequence():
    pair = stationary_haar_decompose(np.full((3, 2), 4.0))
    np.testing.assert_array_equal(pair.stable, np.full((3, 2), 4.0))
    np.testing.assert_array_equal(pair.rapid, np.zeros((3, 2)))


def test_haar_scalar_example():
    pair = stationary_haar_decompose(np.array([[1.0], [3.0], [5.0]]))
    np.testing.assert_array_equal(pair.stable.ravel(), [1.0, 2.0, 4.0])
    np.testing.assert_array_equal(pair.rapid.ravel(), [0.0, 1.0, 1.0])


def test_haar_reconstruction_random():
    x = np.random.default_rng(1).normal(size=(9, 3))
    pair = stationary_haar_decompose(x)
    assert pair.stable.shape == x.shape and pair.rapid.shape == x.shape
    np.testing.assert_allclose(pair.stable + pair.rapid, x, atol=1e-12, rtol=0)


def test_haar_alternating_sequence():
    v = np.array([1.0, -2.0])
    x = np.array([v if i % 2 == 0 else -v for i in range(6)])
    pair = stationary_haar_decompose(x)
    np.testing.assert_array_equal(pair.stable[1:], 0.0)


@settings(max_examples=40, deadline=None)
@given(sequences, st.floats(-3, 3), st.floats(-3, 3))
def test_haar_linearity(x, a, b):
    y = np.roll(x, 1, axis=0) * 0.5 - 1.0
    lhs = stationary_haar_decompose(a * x + b * y)
    px, py = stationary_haar_decompose(x), stationary_haar_decompose(y)
    scale = 1.0 + np.abs(x).max() + np.abs(y).max()
    np.testing.assert_allclose(lhs.stable, a * px.stable + b * py.stable, atol=1e-12 * scale, rtol=0)
    np.testing.assert_allclose(lhs.rapid, a * px.rapid + b * py.rapid, atol=1e-12 * scale, rtol=0)


def test_haar_rejects_nan():
    with pytest.raises(NonFiniteValue):
        stationary_haar_decompose(np.array([[np.nan]]))


def test_transformers_follow_sklearn_protocol():
    rng = np.random.default_rng(0)
    X = [np.repeat(rng.normal(size=(5, 3)), 2, axis=0) + rng.normal(0, 1e-4, size=(10, 3)) for _ in range(4)]
    remover = DuplicateFrameRemover(duplicate_fraction=0.5)
    out = remover.fit_transform(X)
    assert remover.tau_ > 0
    # 36 pooled differences, 20 of them near zero: the median sits among them
    assert sum(len(o) for o in out) == 40 - 18
    assert remover.get_params() == {"duplicate_fraction": 0.5, "tau": None}
    pairs = StationaryHaarSplitter().fit_transform(out)
    assert len(pairs) == 4 and pairs[0].stable.shape == out[0].shape


def test_prepare_case_without_wavelet_feeds_raw_features():
    x = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 2.0]])
    case = prepare_case(x, 0.5, use_wavelet=False, label=1)
    assert case.removed == 1
    assert case.X_stb is case.X and case.X_rpd is case.X
