import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ppir.image import Image
from ppir.optimizer import (OptimizerConfig, StepFailure, gauss_newton_step, intensity_error, register,
                            sample_indices)
from ppir.protocols import ClearSession, SessionConfig, establish_session
from ppir.synth import blob2d
from ppir.transforms import AffineTransform, displacement_rmse


def test_step_examples():
    assert not np.any(gauss_newton_step(np.zeros(3), np.eye(3)))
    np.testing.assert_allclose(gauss_newton_step([1.0, 2.0], np.eye(2)), [-1.0, -2.0])
    np.testing.assert_allclose(gauss_newton_step([1.0, 2.0], np.eye(2), damping=0.5), [-0.5, -1.0])


def test_step_failures():
    with pytest.raises(StepFailure):
        gauss_newton_step([1.0, 1.0], np.zeros((2, 2)))
    with pytest.raises(ValueError):
        gauss_newton_step([1.0, 1.0], np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        gauss_newton_step([1.0], np.eye(2))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (8, 4), elements=st.floats(-3, 3)), arrays(np.float64, 4, elements=st.floats(-5, 5)))
def test_step_solves_spd_system(X, G):
    H = X.T @ X + np.eye(4)
    d = gauss_newton_step(G, H)
    assert np.linalg.norm(H @ d + G) <= 1e-8 * max(1.0, np.linalg.norm(G))


def test_ridge_scales_with_trace():
    H = np.diag([4.0, 2.0])
    d = gauss_newton_step([1.0, 1.0], H, ridge=0.5)
    # λ = 0.5 * 6 / 2 = 1.5
    np.testing.assert_allclose(d, [-1 / 5.5, -1 / 3.5])


def test_sampling_full_and_urs():
    rng = np.random.default_rng(0)
    assert sample_indices("full", 7, 7, rng).tolist() == list(range(7))
    idx = sample_indices("urs", 100, 10, rng)
    assert len(set(idx.tolist())) == 10 and np.all(np.diff(idx) > 0)
    with pytest.raises(ValueError):
        sample_indices("urs", 10, 11, rng)


def test_gms_prefers_edges():
    data = np.zeros((40, 40))
    data[:, 20:] = 100.0
    weights = np.sqrt(sum(g ** 2 for g in np.gradient(data)))
    idx = sample_indices("gms", data.size, 60, np.random.default_rng(1), weights.ravel())
    assert np.mean(weights.ravel()[idx] > 0) >= 0.8


def test_gms_matches_weighted_draw_oracle():
    w = np.random.default_rng(2).random(500) ** 3
    got = sample_indices("gms", 500, 40, np.random.default_rng(7), w)
    want = np.sort(np.random.default_rng(7).choice(500, size=40, replace=False, p=w / w.sum()))
    np.testing.assert_array_equal(got, want)


def test_gms_zero_gradient_falls_back_to_uniform():
    got = sample_indices("gms", 50, 5, np.random.default_rng(3), np.zeros(50))
    np.testing.assert_array_equal(got, sample_indices("urs", 50, 5, np.random.default_rng(3)))


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(epsilon=0)
    with pytest.raises(ValueError):
        OptimizerConfig(levels=((1, 0.0), (2, 0.0)))
    with pytest.raises(ValueError):
        OptimizerConfig(sampling="stratified")


def test_identical_images_converge_immediately():
    fx = blob2d(0, dims=(48, 48))
    cfg = OptimizerConfig(epsilon=1e-3, max_iters=20)
    res = register(fx.moving, fx.dims, AffineTransform.identity(2), "ssd", cfg, ClearSession(fx.moving))
    assert res.total_iterations <= 3
    assert displacement_rmse(res.params, AffineTransform.identity(2), fx.dims) <= 1e-3


def test_translation_recovery_clear():
    fx = blob2d(1, dims=(64, 64), translation=(2.5, -1.5), angle_deg=0.0)
    cfg = OptimizerConfig(epsilon=1e-4, max_iters=60, levels=((2, 1.0), (1, 0.0)))
    res = register(fx.moving, fx.dims, AffineTransform.identity(2), "ssd", cfg, ClearSession(fx.fixed))
    assert res.error is None
    assert displacement_rmse(res.params, fx.truth, fx.dims) <= 0.5
    assert intensity_error(fx.moving, fx.fixed, res.params) < intensity_error(fx.moving, fx.fixed, AffineTransform.identity(2))


def test_mpc_matches_clear():
    fx = blob2d(2, dims=(48, 48), translation=(1.5, 1.0))
    cfg = OptimizerConfig(epsilon=1e-3, max_iters=30)
    clear = register(fx.moving, fx.dims, AffineTransform.identity(2), "ssd", cfg, ClearSession(fx.fixed))
    with establish_session(SessionConfig("mpc", seed=1, dealer_seed=2), fx.fixed) as s:
        secure = register(fx.moving, fx.dims, AffineTransform.identity(2), "ssd", cfg, s)
    assert secure.error is None
    assert displacement_rmse(secure.params, clear.params, fx.dims) <= 0.2
    assert all(r.bytes_party1 > 0 and r.bytes_party2 > 0 for r in secure.records)
    assert all(r.bytes_party1 == 0 for r in clear.records)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_input_raises():
    I = Image(np.full((8, 8), np.inf))
    with pytest.raises(ArithmeticError):
        register(I, (8, 8), AffineTransform.identity(2), "ssd", OptimizerConfig(), ClearSession(Image(np.zeros((8, 8)))))
