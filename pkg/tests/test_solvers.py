import numpy as np
import pytest

from onenet.linops import MaskSpec, MatrixOp, gaussian_matrix_op, identity_op, mask_op
from onenet.priors import IdentityProx, PixelL1Prox, soft_threshold
from onenet.solvers import (AdmmConfig, ContractError, NumericalError, admm_solve,
                            cg_solve, denoise_rho, z_update)
from onenet.tensor import ParameterError, RngStream


def test_cg_identity_one_iteration():
    x, info = cg_solve(lambda v: v, np.array([1.0, 2.0]))
    np.testing.assert_allclose(x, [1.0, 2.0])
    assert info.iterations == 1 and info.converged


def test_cg_two_by_two():
    M = np.array([[4.0, 1.0], [1.0, 3.0]])
    b = np.array([1.0, 2.0])
    expected = np.linalg.inv(M) @ b  # [1/11, 7/11]
    np.testing.assert_allclose(expected, [1 / 11, 7 / 11], rtol=1e-15)
    x, info = cg_solve(lambda v: M @ v, b)
    np.testing.assert_allclose(x, expected, rtol=1e-12)
    assert info.iterations <= 2


def test_cg_scalar():
    x, _ = cg_solve(lambda v: 2 * v, np.array([4.0]))
    np.testing.assert_allclose(x, [2.0])


def test_cg_zero_rhs_and_nonfinite():
    x, info = cg_solve(lambda v: v, np.zeros(3))
    assert np.all(x == 0) and info.iterations == 0
    with pytest.raises(NumericalError):
        cg_solve(lambda v: v, np.array([1.0, np.nan]))
    with pytest.raises(NumericalError) as err:
        cg_solve(lambda v: v * np.inf, np.array([1.0, 2.0]))
    assert err.value.iteration == 1


def test_cg_reports_unconverged():
    rng = RngStream(0)
    Q = rng.gaussian((30, 30))
    M = Q @ Q.T + 1e-3 * np.eye(30)
    x, info = cg_solve(lambda v: M @ v, rng.gaussian(30), tol=1e-14, max_iters=3)
    assert not info.converged and info.iterations == 3 and info.residual > 0


def test_z_update_identity_closed_form():
    rng = RngStream(1)
    y, x, u = rng.gaussian(10), rng.gaussian(10), rng.gaussian(10)
    A = identity_op(10)
    np.testing.assert_allclose(z_update(A, y, x, u, 1.0), (y + x + u) / 2, atol=1e-12)
    np.testing.assert_allclose(z_update(A, y, x, u, 1e6), x + u, atol=1e-4)


def test_z_update_dense_oracle():
    rng = RngStream(2)
    mat = rng.gaussian((8, 16))
    A = MatrixOp(mat)
    y, x, u = rng.gaussian(8), rng.gaussian(16), rng.gaussian(16)
    rho = 0.3
    lhs = mat.T @ mat + rho * np.eye(16)
    expected = np.linalg.solve(lhs, mat.T @ y + rho * (x + u))
    z = z_update(A, y, x, u, rho)
    np.testing.assert_allclose(z, expected, atol=1e-8)
    resid = lhs @ z - (mat.T @ y + rho * (x + u))
    assert np.linalg.norm(resid) <= 1e-9 * np.linalg.norm(mat.T @ y + rho * (x + u))


def test_admm_identity_operator_identity_prox():
    y = RngStream(3).uniform(-1, 1, 25)
    cfg = AdmmConfig(max_iters=5)
    x, trace = admm_solve(identity_op(25), y, IdentityProx(), cfg)
    # z0 carries the 1e-6 Tikhonov shrinkage, so equality is up to that factor
    np.testing.assert_allclose(x, y, atol=1e-5)
    assert trace.records[0].rmse_xz < 1e-6
    assert trace.converged and trace.iterations == 1


def test_admm_identity_operator_l1_closed_form():
    rng = RngStream(4)
    y = rng.gaussian(200)
    lam = 0.3
    cfg = AdmmConfig(rho=1.0, stop_tol=1e-12, max_iters=300, clamp_output=False)
    x, trace = admm_solve(identity_op(200), y, PixelL1Prox(lam), cfg)
    expected = np.sign(y) * np.maximum(np.abs(y) - lam, 0)
    assert np.max(np.abs(x - expected)) < 1e-6
    assert trace.iterations <= 300


def test_admm_square_operator_recovers_direct_solve():
    A = gaussian_matrix_op(16, 1.0, seed=5)
    x_true = RngStream(6).uniform(-1, 1, 16)
    y = A.forward(x_true)
    # small rho: with an identity prox each step is a proximal-point step on
    # the data term, contracting by rho / (sigma_min^2 + rho)
    cfg = AdmmConfig(rho=1e-3, stop_tol=1e-14, cg_tol=1e-14, clamp_output=False)
    x, _ = admm_solve(A, y, IdentityProx(), cfg)
    direct = np.linalg.solve(A.matrix, y)
    assert np.max(np.abs(x - direct)) < 1e-6


def test_admm_does_not_mutate_inputs():
    A = gaussian_matrix_op(36, 0.5, seed=1)
    y = RngStream(7).gaussian(A.out_dim)
    y_copy, mat_copy = y.copy(), A.matrix.copy()
    admm_solve(A, y, PixelL1Prox(0.1), AdmmConfig(max_iters=10))
    assert np.array_equal(y, y_copy) and np.array_equal(A.matrix, mat_copy)


def test_admm_trace_and_stop_reasons():
    A = mask_op(MaskSpec("pixelwise", seed=2), 8, 8)
    y = A.forward(RngStream(8).uniform(-1, 1, 64))
    gt = RngStream(8).uniform(-1, 1, 64)
    x, trace = admm_solve(A, y, PixelL1Prox(0.05), AdmmConfig(max_iters=7, stop_tol=1e-15),
                          ground_truth=gt)
    assert [r.iteration for r in trace.records] == list(range(1, 8))
    assert trace.stop_reason == "max_iters"
    assert all(r.psnr is not None for r in trace.records)
    _, trace = admm_solve(A, y, PixelL1Prox(0.05),
                          AdmmConfig(max_iters=50, early_stop_at=4, stop_tol=1e-15))
    assert trace.iterations == 4 and trace.stop_reason == "early_stop"
    assert np.all(np.abs(x) <= 1)
    text = trace.to_csv(comment="hash=abc seed=1")
    lines = text.splitlines()
    assert lines[0] == "# hash=abc seed=1"
    assert lines[1] == "iteration,rmse_xz,data_fidelity,psnr"
    assert len(lines) == 2 + 4
    assert lines[2].endswith(",")  # no ground truth -> blank psnr


def test_admm_prox_contract():
    with pytest.raises(ContractError):
        admm_solve(identity_op(4), np.zeros(4), lambda v, rho: np.zeros(3))


def test_admm_config_validation_and_presets():
    with pytest.raises(ParameterError):
        AdmmConfig(rho=0)
    with pytest.raises(ParameterError):
        AdmmConfig(stop_tol=0)
    assert AdmmConfig().rho == 0.3
    assert denoise_rho(25) == pytest.approx(75 / 255)


def test_soft_threshold_prox_is_fixed_point_of_penalty():
    # A = I with the l1 prox: the ADMM fixed point satisfies x = S(y, lam)
    y = np.array([3.0, -0.5, 0.0, -2.0])
    np.testing.assert_allclose(soft_threshold(y, 1.0), [2.0, 0.0, 0.0, -1.0])
