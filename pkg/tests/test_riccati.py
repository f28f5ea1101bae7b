from types import SimpleNamespace

import numpy as np
import pytest
from scipy.integrate import quad_vec
from scipy.linalg import expm

from rare_sorm.core import ModelError, Observable, SdeSystem
from rare_sorm.instanton import OptimizerConfig, find_instanton
from rare_sorm.models import additive_cubic, additive_ou, geometric_bm, linear_observable
from rare_sorm.prefactor import compute_prefactor
from rare_sorm.riccati import RiccatiSingularityError, riccati_prefactor, riccati_solve

TIGHT = OptimizerConfig(grad_tol=1e-9, constraint_tol=1e-10)


def _linear_system(J, S, x0=(0.0, 0.0)):
    J, S = np.asarray(J, float), np.asarray(S, float)
    n = J.shape[0]

    def shaped(x, *tail):
        return np.zeros(np.shape(x)[:-1] + tail)

    return SdeSystem(
        dim=n,
        drift=lambda x: np.asarray(x, float) @ J.T,
        diffusion=lambda x: np.broadcast_to(S, np.shape(x)[:-1] + S.shape).copy(),
        drift_jacobian=lambda x: np.broadcast_to(J, np.shape(x)[:-1] + J.shape).copy(),
        drift_hessian=lambda x: shaped(x, n, n, n),
        diffusion_jacobian=lambda x: shaped(x, n, n, n),
        diffusion_hessian=lambda x: shaped(x, n, n, n, n),
        x0=x0, horizon=1.0, name="linear2d")


def test_ou_closed_form():
    system, obs = additive_ou()
    grid = system.grid(1000)
    sol = find_instanton(system, obs, grid, 1.0, TIGHT)
    C = riccati_prefactor(system, obs, grid, sol)
    q = (1 - np.exp(-2)) / 2
    assert C == pytest.approx(np.sqrt(q), rel=2e-3)
    assert C == pytest.approx(0.65752, rel=2e-3)


def test_ou_agrees_with_operator_route():
    system, obs = additive_ou()
    grid = system.grid(1000)
    sol = find_instanton(system, obs, grid, 1.0, TIGHT)
    C_ric = riccati_prefactor(system, obs, grid, sol)
    C_op = compute_prefactor(system, obs, grid, sol, M=10).C
    assert C_ric == pytest.approx(C_op, rel=2e-3)


def test_linear_covariance_matches_matrix_exponential():
    J = [[-1.0, 0.5], [-0.3, -0.4]]
    S = [[1.0, 0.0], [0.4, 0.6]]
    system = _linear_system(J, S)
    obs = linear_observable([1.0, -0.5])
    grid = system.grid(400)
    sol = find_instanton(system, obs, grid, 0.8, TIGHT)
    st = riccati_solve(system, obs, grid, sol)
    Ja, Sa = np.asarray(J), np.asarray(S)
    exact = quad_vec(lambda s: expm(Ja * s) @ Sa @ Sa.T @ expm(Ja * s).T, 0.0, 1.0, epsabs=1e-13)[0]
    np.testing.assert_allclose(st.Q[-1], exact, rtol=1e-10, atol=1e-12)
    assert st.integral == 0.0
    np.testing.assert_array_equal(st.U, np.eye(2))


def test_linear_drift_q_is_independent_of_the_target():
    system = _linear_system([[-1.0, 0.5], [-0.3, -0.4]], [[1.0, 0.0], [0.4, 0.6]])
    obs = linear_observable([1.0, -0.5])
    grid = system.grid(200)
    Qs = [riccati_solve(system, obs, grid, find_instanton(system, obs, grid, z, TIGHT)).Q for z in (0.3, 1.2)]
    np.testing.assert_array_equal(Qs[0], Qs[1])


def test_q_symmetric_positive_semidefinite():
    system, obs = additive_cubic()
    grid = system.grid(300)
    sol = find_instanton(system, obs, grid, 1.0, TIGHT)
    _, st = riccati_prefactor(system, obs, grid, sol, return_state=True)
    assert st.max_asymmetry == 0.0
    assert st.min_eigenvalue >= 0.0
    assert st.Q[0, 0, 0] == 0.0
    system2 = _linear_system([[-1.0, 0.5], [-0.3, -0.4]], [[1.0, 0.0], [0.4, 0.6]])
    obs2 = linear_observable([1.0, -0.5])
    g2 = system2.grid(100)
    st2 = riccati_solve(system2, obs2, g2, find_instanton(system2, obs2, g2, 0.5, TIGHT))
    assert st2.max_asymmetry == 0.0
    assert st2.min_eigenvalue >= -1e-15


def test_multiplicative_noise_rejected():
    system, obs = geometric_bm()
    grid = system.grid(50)
    sol = find_instanton(system, obs, grid, 0.5)
    with pytest.raises(ModelError):
        riccati_prefactor(system, obs, grid, sol)


def test_nonlinear_drift_agrees_with_operator_route():
    system, obs = additive_cubic()
    grid = system.grid(1000)
    sol = find_instanton(system, obs, grid, 1.0, TIGHT)
    C_ric = riccati_prefactor(system, obs, grid, sol)
    bd = compute_prefactor(system, obs, grid, sol, M=60)
    assert bd.det2_projected != 1.0
    assert C_ric == pytest.approx(bd.C, rel=1e-2)


def test_singular_final_matrix():
    # f = x^2 / 2 makes U = 1 - lam Q(T); choose lam = 1 / Q(T)
    system, _ = additive_ou()
    quad = Observable(value=lambda x: 0.5 * np.asarray(x)[..., 0] ** 2,
                      gradient=lambda x: np.asarray(x, float),
                      hessian=lambda x: np.ones(np.shape(x)[:-1] + (1, 1)), name="square")
    grid = system.grid(200)
    sol = find_instanton(system, linear_observable([1.0]), grid, 1.0, TIGHT)
    QT = riccati_solve(system, quad, grid, sol).Q[-1, 0, 0]
    fake = SimpleNamespace(phi_z=sol.phi_z, theta_z=sol.theta_z, lambda_z=1.0 / QT)
    with pytest.raises(RiccatiSingularityError):
        riccati_prefactor(system, quad, grid, fake)


def test_trivial_multiplier_rejected():
    system, obs = additive_ou()
    grid = system.grid(20)
    sol = find_instanton(system, obs, grid, 1.0)
    with pytest.raises(ValueError):
        riccati_prefactor(system, obs, grid, SimpleNamespace(phi_z=sol.phi_z, theta_z=sol.theta_z, lambda_z=0.0))
