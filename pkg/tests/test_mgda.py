import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unfoldldm.degradation import init_factors
from unfoldldm.errors import ShapeError
from unfoldldm.mgda import MGDA, SeqMixBlock, StageState, decomposed_step, holistic_step
from unfoldldm.tensor import ParamRegistry, Tensor
from unfoldldm.tensor.gradcheck import numeric_grad, rel_error


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def identity(x):
    return x


def fidelity_grad(x, y, W, M):
    """Analytic gradient of 1/2 ||y - W x M||^2 for one channel."""
    return -W.T @ (y - W @ x @ M) @ M.T


# ---------------------------------------------------------------- holistic

def test_zero_beta_is_identity():
    rng = np.random.default_rng(0)
    x, y = rng.random((1, 1, 4, 4)), rng.random((1, 1, 4, 4))
    reg = ParamRegistry(np.float64)
    mix = SeqMixBlock(reg, "m", 1)
    np.testing.assert_array_equal(holistic_step(T(x), T(y), T(0.0), mix, mix).data, x)


def test_identity_operators_fixed_point():
    x = np.random.default_rng(1).random((1, 1, 4, 4))
    out = holistic_step(T(x), T(x), T(0.7), identity, identity).data
    np.testing.assert_array_equal(out, x)


def test_full_step_on_identity_operator_hits_zero():
    x = np.random.default_rng(2).random((1, 1, 4, 4))
    out = holistic_step(T(x), T(np.zeros_like(x)), T(1.0), identity, identity).data
    np.testing.assert_array_equal(out, 0.0)


def test_seqmix_with_zero_scale_is_identity():
    reg = ParamRegistry(np.float64)
    mix = SeqMixBlock(reg, "m", 2, init_scale=0.0)
    x = np.random.default_rng(3).random((2, 2, 5, 6))
    np.testing.assert_array_equal(mix(T(x)).data, x)
    assert mix(T(x)).shape == x.shape


# ---------------------------------------------------------------- decomposed

def test_identity_factors_unit_gamma_solve_exactly():
    rng = np.random.default_rng(4)
    x, y = rng.random((1, 1, 3, 4)), rng.random((1, 1, 3, 4))
    out = decomposed_step(T(x), T(y), T(1.0), T(np.eye(3)[None, None]), T(np.eye(4)[None, None]))
    np.testing.assert_allclose(out.data, y, atol=1e-15)


def test_zero_gamma_is_identity():
    rng = np.random.default_rng(5)
    x, y = rng.random((1, 1, 3, 4)), rng.random((1, 1, 3, 4))
    W, M = rng.random((1, 1, 3, 3)), rng.random((1, 1, 4, 4))
    np.testing.assert_array_equal(decomposed_step(T(x), T(y), T(0.0), T(W), T(M)).data, x)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**16), st.floats(0.05, 2.0))
def test_decomposed_direction_is_fidelity_gradient(seed, gamma):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    W, M = rng.standard_normal((4, 4)), rng.standard_normal((5, 5))

    def h():
        r = y - W @ x @ M
        return 0.5 * float(np.sum(r * r))

    num = numeric_grad(h, x, 1e-6)
    out = decomposed_step(T(x[None, None]), T(y[None, None]), T(gamma), T(W[None, None]), T(M[None, None]))
    direction = (x - out.data[0, 0]) / gamma
    assert rel_error(direction, num) <= 1e-6
    assert rel_error(direction, fidelity_grad(x, y, W, M)) <= 1e-12


def test_decomposed_rejects_bad_factors():
    x = T(np.zeros((1, 1, 3, 4)))
    with pytest.raises(ShapeError):
        decomposed_step(x, x, T(1.0), T(np.zeros((1, 1, 4, 4))), T(np.zeros((1, 1, 4, 4))))


# ---------------------------------------------------------------- factor estimators

def make_mgda(h=6, w=6, c=1, scale=1.0, seed=0):
    reg = ParamRegistry(np.float64, seed=seed)
    return reg, MGDA(reg, c, h, w, hidden=8, mixer_scale=scale)


@pytest.mark.parametrize("c,h,w", [(1, 6, 6), (3, 4, 7)])
def test_factors_have_declared_shapes_and_unit_norm(c, h, w):
    rng = np.random.default_rng(6)
    _, m = make_mgda(h, w, c)
    y, p = T(rng.random((2, c, h, w))), T(rng.random((2, c, h, w)))
    M, W = m.estimate_M(y, p), m.estimate_W(y, p)
    assert M.shape == (2, c, w, w) and W.shape == (2, c, h, h)
    for f in (M, W):
        np.testing.assert_allclose(np.linalg.norm(f.data, axis=(-2, -1)), 1.0, atol=1e-9)


def test_tied_halves_give_symmetric_psd_factor():
    # mixers off and y equal to the partial product: both halves of the split coincide
    rng = np.random.default_rng(7)
    _, m = make_mgda()
    m.set_mixers(False)
    y = T(rng.random((1, 1, 6, 6)))
    M = m.estimate_M(y, y).data[0, 0]
    np.testing.assert_allclose(M, M.T, atol=1e-12)
    assert np.linalg.eigvalsh(M).min() >= -1e-10


def test_estimators_are_deterministic():
    rng = np.random.default_rng(8)
    y, p = T(rng.random((1, 1, 6, 6))), T(rng.random((1, 1, 6, 6)))
    _, a = make_mgda(seed=3)
    _, b = make_mgda(seed=3)
    assert a.estimate_M(y, p).data.tobytes() == b.estimate_M(y, p).data.tobytes()
    assert a.estimate_W(y, p).data.tobytes() == b.estimate_W(y, p).data.tobytes()


def test_w_estimator_is_transposed_m_estimator_under_tied_weights():
    rng = np.random.default_rng(9)
    reg, m = make_mgda(6, 6)
    # tie W-side weights to the M side; the depthwise kernel is transposed
    for name, t in list(reg.items()):
        if name.startswith("mgda.estW."):
            src = reg[name.replace("estW", "estM")].data
            t.data[...] = np.swapaxes(src, -1, -2) if name.endswith("dw.weight") else src
    y, p = rng.random((1, 1, 6, 6)), rng.random((1, 1, 6, 6))
    M = m.estimate_M(T(y), T(p)).data
    W = m.estimate_W(T(np.swapaxes(y, -1, -2)), T(np.swapaxes(p, -1, -2))).data
    np.testing.assert_allclose(W, np.swapaxes(M, -1, -2), atol=1e-12)


@pytest.mark.parametrize("s", [0.25, 1.0, 4.0])
def test_factors_unit_norm_under_intensity_scaling(s):
    rng = np.random.default_rng(10)
    _, m = make_mgda()
    y = rng.random((1, 1, 6, 6))
    M = m.estimate_M(T(s * y), T(s * y)).data
    np.testing.assert_allclose(np.linalg.norm(M, axis=(-2, -1)), 1.0, atol=1e-9)


# ---------------------------------------------------------------- full stage

def _stage_state(y):
    f = init_factors(y)
    return StageState(x_prev=T(y), x_hat=None, x_tilde=None, W=T(f.W), M=T(f.M), k=1)


def test_stage_one_fixed_point_on_consistent_input():
    """Constant y = x_prev with identity mixers: both branches leave x unchanged."""
    _, m = make_mgda(scale=0.0)
    y = np.full((1, 1, 6, 6), 0.4)
    x_hat, x_tilde, W, M = m.run_stage_gradients(_stage_state(y), T(y))
    np.testing.assert_allclose(x_hat.data, y, atol=1e-14)
    np.testing.assert_allclose(x_tilde.data, y, atol=1e-12)


def test_stage_outputs_finite_and_factors_unit_norm():
    rng = np.random.default_rng(11)
    _, m = make_mgda(6, 8, c=2)
    y = rng.random((2, 2, 6, 8))
    x_hat, x_tilde, W, M = m.run_stage_gradients(_stage_state(y), T(y))
    gap = np.abs(x_hat.data - x_tilde.data).mean()
    assert np.isfinite(gap)
    for f in (W, M):
        np.testing.assert_allclose(np.linalg.norm(f.data, axis=(-2, -1)), 1.0, atol=1e-9)


def test_zero_step_sizes_make_stage_identity():
    rng = np.random.default_rng(12)
    reg, m = make_mgda()
    # softplus underflows to exactly zero here
    reg["mgda.beta_raw"].data[...] = -1e4
    reg["mgda.gamma_raw"].data[...] = -1e4
    y = rng.random((1, 1, 6, 6))
    x = rng.random((1, 1, 6, 6))
    state = _stage_state(y)
    state.x_prev = T(x)
    x_hat, x_tilde, _, _ = m.run_stage_gradients(state, T(y))
    np.testing.assert_array_equal(x_hat.data, x)
    np.testing.assert_array_equal(x_tilde.data, x)


def test_ablated_branch_falls_back_to_other():
    rng = np.random.default_rng(13)
    _, m = make_mgda()
    m.use_x_hat = False
    y = rng.random((1, 1, 6, 6))
    x_hat, x_tilde, _, _ = m.run_stage_gradients(_stage_state(y), T(y))
    assert x_hat is x_tilde
    m.use_x_tilde = False
    with pytest.raises(ValueError):
        m.run_stage_gradients(_stage_state(y), T(y))
