import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unfoldldm.degradation import (
    DegradationPair,
    SyntheticDegradation,
    apply_adjoint,
    apply_decomposed,
    degradation_factors,
    gaussian_blur_matrix,
    init_factors,
    l2_normalize,
    materialize_holistic,
    synthesize,
    unvec,
    vec,
)
from unfoldldm.errors import ShapeError


def rand(rng, *shape):
    return rng.standard_normal(shape)


def test_identity_operators_return_input():
    x = rand(np.random.default_rng(0), 2, 3, 4)
    out = apply_decomposed(np.repeat(np.eye(3)[None], 2, 0), x, np.repeat(np.eye(4)[None], 2, 0))
    np.testing.assert_array_equal(out, x)


def test_permutation_swaps_rows():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    out = apply_decomposed(np.array([[[0.0, 1.0], [1.0, 0.0]]]), x, np.eye(2)[None])
    np.testing.assert_array_equal(out, x[:, ::-1])


def test_apply_rejects_nonconforming_factors():
    with pytest.raises(ShapeError):
        apply_decomposed(np.eye(3)[None], np.zeros((1, 3, 4)), np.eye(3)[None])
    with pytest.raises(ShapeError):
        apply_decomposed(np.eye(3)[None], np.zeros((2, 3, 4)), np.eye(4)[None])


def test_vec_unvec_round_trip():
    x = rand(np.random.default_rng(1), 3, 4, 5)
    np.testing.assert_array_equal(unvec(vec(x), 4, 5), x)
    # column stacking: the first h entries are the first column
    np.testing.assert_array_equal(vec(x)[0, :4], x[0, :, 0])


def test_dense_of_identities_is_identity():
    D = materialize_holistic(np.eye(3)[None], np.eye(2)[None])
    np.testing.assert_array_equal(D[0], np.eye(6))


def test_degenerate_one_by_one():
    D = materialize_holistic(np.array([[[2.0]]]), np.array([[[3.0]]]))
    assert D.shape == (1, 1, 1) and D[0, 0, 0] == 6.0


def test_dense_matches_product_on_random_instance():
    rng = np.random.default_rng(2)
    W, M, x = rand(rng, 1, 4, 4), rand(rng, 1, 5, 5), rand(rng, 1, 4, 5)
    D = materialize_holistic(W, M)
    assert np.max(np.abs(D[0] @ vec(x)[0] - vec(apply_decomposed(W, x, M))[0])) <= 1e-10


def test_dense_matches_product_for_many_x():
    rng = np.random.default_rng(3)
    W, M = rand(rng, 1, 3, 3), rand(rng, 1, 2, 2)
    D = materialize_holistic(W, M)[0]
    for _ in range(100):
        x = rand(rng, 1, 3, 2)
        assert np.max(np.abs(D @ vec(x)[0] - vec(apply_decomposed(W, x, M))[0])) <= 1e-10


def test_materialize_respects_budget():
    with pytest.raises(MemoryError, match="oracle-scale"):
        materialize_holistic(np.eye(64)[None], np.eye(64)[None], budget=1000)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([1, 3]), st.integers(2, 6), st.integers(2, 6), st.integers(0, 2**16))
def test_kronecker_identity_property(c, h, w, seed):
    rng = np.random.default_rng(seed)
    W, M, x = rand(rng, c, h, h), rand(rng, c, w, w), rand(rng, c, h, w)
    D = materialize_holistic(W, M)
    lhs = np.einsum("cij,cj->ci", D, vec(x))
    assert np.max(np.abs(lhs - vec(apply_decomposed(W, x, M)))) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(2, 6), st.integers(2, 6), st.integers(0, 2**16))
def test_adjoint_identity_property(c, h, w, seed):
    rng = np.random.default_rng(seed)
    W, M = rand(rng, c, h, h), rand(rng, c, w, w)
    x, z = rand(rng, c, h, w), rand(rng, c, h, w)
    lhs = np.sum(apply_decomposed(W, x, M) * z)
    rhs = np.sum(x * apply_adjoint(W, z, M))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_normalize_three_four_five():
    np.testing.assert_allclose(l2_normalize(np.array([[3.0, 4.0]])), [[0.6, 0.8]])


def test_normalize_is_idempotent_and_unit():
    rng = np.random.default_rng(4)
    n = l2_normalize(rand(rng, 2, 4, 4))
    np.testing.assert_allclose(np.linalg.norm(n, axis=(-2, -1)), 1.0, atol=1e-9)
    assert np.max(np.abs(l2_normalize(n) - n)) <= 1e-12


def test_normalize_guards_zero_and_logs(caplog):
    with caplog.at_level(logging.WARNING):
        out = l2_normalize(np.zeros((1, 2, 2)))
    assert np.all(np.isfinite(out))
    assert "zero-norm" in caplog.text


def test_init_factors_constant_image():
    f = init_factors(np.ones((1, 2, 2)))
    np.testing.assert_allclose(f.M, 0.5)
    np.testing.assert_allclose(f.W, 0.5)


def test_init_factors_orthogonal_rows_give_diagonal_gram():
    y = np.array([[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]])
    W = init_factors(y).W[0]
    assert W.shape == (2, 2)
    assert W[0, 1] == 0.0 and W[1, 0] == 0.0


def test_init_factors_shapes_symmetry_and_psd():
    rng = np.random.default_rng(5)
    y = rng.random((3, 4, 6))
    f = init_factors(y)
    assert f.W.shape == (3, 4, 4) and f.M.shape == (3, 6, 6)
    for mat in (y @ np.swapaxes(y, -1, -2), np.swapaxes(y, -1, -2) @ y):
        assert np.max(np.abs(mat - np.swapaxes(mat, -1, -2))) <= 1e-12
        assert np.linalg.eigvalsh(mat).min() >= -1e-10
    for mat in (f.W, f.M):
        np.testing.assert_allclose(mat, np.swapaxes(mat, -1, -2), atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(mat, axis=(-2, -1)), 1.0, atol=1e-9)


def test_pair_validates_shapes():
    with pytest.raises(ShapeError):
        DegradationPair(np.zeros((1, 2, 3)), np.zeros((1, 2, 2)))
    with pytest.raises(ShapeError):
        DegradationPair(np.zeros((1, 2, 2)), np.zeros((2, 2, 2)))


def test_blur_matrix_rows_sum_to_one():
    B = gaussian_blur_matrix(16, 1.5)
    np.testing.assert_allclose(B.sum(axis=0), 1.0, atol=1e-12)
    np.testing.assert_array_equal(gaussian_blur_matrix(5, 0.0), np.eye(5))


def test_blur_operator_matches_separable_filter():
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(6)
    x = rng.random((1, 12, 10))
    spec = SyntheticDegradation("gaussian_blur", sigma=1.5, noise_sigma=0.0)
    pair = degradation_factors(spec, 1, 12, 10)
    ref = gaussian_filter(x[0], 1.5, mode="reflect", truncate=4.0)
    np.testing.assert_allclose(pair.apply(x)[0], ref, atol=1e-12)


def test_synthesize_identity_limit():
    x = np.random.default_rng(7).random((1, 8, 8))
    out = synthesize(x, SyntheticDegradation("gaussian_blur", sigma=0.0, noise_sigma=0.0))
    np.testing.assert_allclose(out, x, atol=1e-15)


def test_synthesize_noise_variance():
    x = np.full((1, 128, 128), 0.5)
    out = synthesize(x, SyntheticDegradation("gaussian_blur", sigma=0.0, noise_sigma=0.1, seed=3), clip=False)
    assert abs(np.var(out - 0.5) - 0.01) <= 0.05 * 0.01


def test_synthesize_is_deterministic():
    x = np.random.default_rng(8).random((3, 8, 8))
    for kind in ("gaussian_blur", "illumination", "row_streaks"):
        spec = SyntheticDegradation(kind, seed=11)
        assert synthesize(x, spec).tobytes() == synthesize(x, spec).tobytes()


def test_synthesize_unknown_kind():
    with pytest.raises(ValueError, match="unknown degradation"):
        synthesize(np.zeros((1, 4, 4)), SyntheticDegradation("fog"))


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["gaussian_blur", "illumination", "row_streaks"]),
       st.floats(0.0, 0.3), st.integers(0, 2**16))
def test_synthesize_stays_in_unit_range(kind, noise, seed):
    x = np.random.default_rng(seed).random((1, 8, 8))
    out = synthesize(x, SyntheticDegradation(kind, noise_sigma=noise, seed=seed))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_illumination_is_linear_in_kronecker_form():
    spec = SyntheticDegradation("illumination", gain=0.4, noise_sigma=0.0, seed=2)
    x = np.random.default_rng(9).random((1, 6, 7))
    pair = degradation_factors(spec, 1, 6, 7)
    np.testing.assert_allclose(synthesize(x, spec, clip=False), pair.apply(x))
    assert degradation_factors(SyntheticDegradation("row_streaks"), 1, 6, 7) is None
