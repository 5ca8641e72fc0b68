import numpy as np
import pytest

from rakomo.komo import (
    AlState,
    FeatureTerm,
    SolverParams,
    Trajectory,
    Weights,
    arm_limit_feature,
    assemble_gn_system,
    band_to_dense,
    ee_target_feature,
    margin_feature,
    position_bias_feature,
    smoothness_feature,
    solve,
)

RNG = np.random.default_rng(13)


def _quadratic_terms(n, dim, target):
    """Pure cost: pull every waypoint to a fixed target."""

    def func(window):
        return window[-1] - target, np.eye(dim)

    return [FeatureTerm("pull", "cost", 0, tuple(range(n + 1)), func)]


def test_quadratic_single_gn_step_exact():
    n, dim = 6, 3
    target = np.array([0.4, -0.2, 1.0])
    terms = _quadratic_terms(n, dim, target)
    traj0 = Trajectory(np.zeros((n + 1, dim)))
    out, report = solve(traj0, terms, SolverParams(damping=1e-12))
    assert report.converged
    assert np.max(np.abs(out.points - target)) < 1e-7
    # quadratic => a single inner Gauss-Newton step suffices
    assert report.inner_iterations == 1


def test_smoothness_coupled_quadratic_matches_dense_solve():
    # quadratic problem with second-order coupling: compare against a dense
    # least-squares solve of the same normal equations
    n, dim = 8, 2
    anchor = RNG.normal(0, 1.0, (n + 1, dim))

    def pull(window):
        return window[-1] - anchor[pull.t], np.eye(dim)

    terms = []
    for t in range(n + 1):
        a = anchor[t]

        def make(a=a):
            def f(window):
                return window[-1] - a, np.eye(dim)

            return f

        terms.append(FeatureTerm(f"pull{t}", "cost", 0, (t,), make()))
    terms.append(
        FeatureTerm("smooth", "cost", 2, tuple(range(2, n + 1)), smoothness_feature(dim, 3.0))
    )

    traj0 = Trajectory(np.zeros((n + 1, dim)))
    out, report = solve(traj0, terms, SolverParams(damping=1e-12, tol_step=1e-10))
    assert report.converged

    # dense reference: minimize sum |x_t - a_t|^2 + 3 |x_{t-2} -2x_{t-1} + x_t|^2
    N = (n + 1) * dim
    H = np.eye(N)
    g = -anchor.ravel()
    s = np.sqrt(3.0)
    for t in range(2, n + 1):
        row = np.zeros((dim, N))
        row[:, (t - 2) * dim : (t - 1) * dim] = s * np.eye(dim)
        row[:, (t - 1) * dim : t * dim] = -2 * s * np.eye(dim)
        row[:, t * dim : (t + 1) * dim] = s * np.eye(dim)
        H += row.T @ row
    x = np.linalg.solve(H, -g)
    assert np.max(np.abs(out.points.ravel() - x)) < 1e-7


def test_equality_toy_converges_tightly():
    # minimize |x - a|^2 subject to sum(x) = 1 on a single waypoint
    dim = 4
    a = np.array([0.3, -0.1, 0.7, 0.2])

    def cost(window):
        return window[-1] - a, np.eye(dim)

    def h(window):
        return np.array([window[-1].sum() - 1.0]), np.ones((1, dim))

    terms = [
        FeatureTerm("cost", "cost", 0, (0,), cost),
        FeatureTerm("h", "eq", 0, (0,), h),
    ]
    traj0 = Trajectory(np.zeros((1, dim)))
    out, report = solve(traj0, terms, SolverParams(tol_con=1e-5, tol_step=1e-6))
    assert report.converged
    assert report.max_abs_h < 1e-4
    # analytic optimum: a + (1 - sum a)/dim
    want = a + (1.0 - a.sum()) / dim
    assert np.max(np.abs(out.points[0] - want)) < 1e-4


def test_inequality_toy_respects_active_constraint():
    # minimize |x|^2 subject to 1 - x_0 <= 0 (active at x_0 = 1)
    dim = 2

    def cost(window):
        return window[-1], np.eye(dim)

    def g(window):
        return np.array([1.0 - window[-1][0]]), np.array([[-1.0, 0.0]])

    terms = [
        FeatureTerm("cost", "cost", 0, (0,), cost),
        FeatureTerm("g", "ineq", 0, (0,), g),
    ]
    out, report = solve(Trajectory(np.zeros((1, dim))), terms)
    assert report.converged
    assert out.points[0, 0] == pytest.approx(1.0, abs=2e-3)
    assert abs(out.points[0, 1]) < 1e-6
    assert report.max_pos_g < 1e-3


def test_inactive_inequality_ignored():
    dim = 2

    def cost(window):
        return window[-1] - np.array([2.0, 0.0]), np.eye(dim)

    def g(window):
        return np.array([1.0 - window[-1][0]]), np.array([[-1.0, 0.0]])

    terms = [
        FeatureTerm("cost", "cost", 0, (0,), cost),
        FeatureTerm("g", "ineq", 0, (0,), g),
    ]
    out, report = solve(Trajectory(np.zeros((1, dim))), terms)
    assert report.converged
    assert np.allclose(out.points[0], [2.0, 0.0], atol=1e-6)
    assert report.ineq_multiplier_norm < 1e-9


def test_banded_structure_matches_dense_outer_product():
    # assembled band equals the dense Gauss-Newton Hessian of the same terms,
    # and entries outside the band are exactly zero
    n, dim = 5, 3
    X = RNG.normal(0, 0.5, (n + 1, dim))
    traj = Trajectory(X)
    def pull(window):
        return window[-1], np.eye(dim)

    terms = [
        FeatureTerm("bias", "cost", 0, tuple(range(n + 1)), pull),
        FeatureTerm(
            "smooth", "cost", 2, tuple(range(2, n + 1)), smoothness_feature(dim, 2.0)
        ),
    ]
    al = AlState(mu=1.0)
    ab, grad = assemble_gn_system(traj, terms, al)
    H = band_to_dense(ab)
    assert np.allclose(H, H.T)

    # dense reference
    N = (n + 1) * dim
    H_ref = np.zeros((N, N))
    g_ref = np.zeros(N)
    sqb = np.sqrt(1.0)
    for t in range(n + 1):
        J = np.zeros((dim, N))
        J[:, t * dim : (t + 1) * dim] = sqb * np.eye(dim)
        r = sqb * X[t]
        H_ref += 2 * J.T @ J  # Gauss-Newton Hessian of w * |r|^2 is 2w J^T J
        g_ref += 2 * J.T @ r
    s = np.sqrt(2.0)
    for t in range(2, n + 1):
        J = np.zeros((dim, N))
        J[:, (t - 2) * dim : (t - 1) * dim] = s * np.eye(dim)
        J[:, (t - 1) * dim : t * dim] = -2 * s * np.eye(dim)
        J[:, t * dim : (t + 1) * dim] = s * np.eye(dim)
        r = s * (X[t] - 2 * X[t - 1] + X[t - 2])
        H_ref += 2 * J.T @ J
        g_ref += 2 * J.T @ r
    assert np.allclose(H, H_ref, atol=1e-12)
    assert np.allclose(grad, g_ref, atol=1e-12)

    # bandwidth: blocks further than (order+1) slices apart are zero
    u = ab.shape[0] - 1
    for i in range(N):
        for j in range(N):
            if abs(i - j) > u:
                assert H[i, j] == 0.0


def test_gradient_matches_merit_finite_difference():
    # the assembled gradient is the exact gradient of the AL merit
    from rakomo.komo import _evaluate, _merit

    n, dim = 4, 2
    X = RNG.normal(0, 0.4, (n + 1, dim))

    def cost(window):
        r = window[-1] ** 2
        return r, np.diag(2 * window[-1])

    def h(window):
        return np.array([window[-1] @ window[-1] - 1.0]), 2 * window[-1][None, :]

    def g(window):
        return np.array([0.3 - window[-1][0]]), np.array([[-1.0, 0.0]])

    terms = [
        FeatureTerm("c", "cost", 0, tuple(range(n + 1)), cost, weight=1.7),
        FeatureTerm("h", "eq", 0, (1, 3), h),
        FeatureTerm("g", "ineq", 0, (2,), g),
    ]
    al = AlState(mu=2.5)
    al.lam_eq[(1, 1)] = np.array([0.4])
    al.lam_ineq[(2, 2)] = np.array([0.6])
    traj = Trajectory(X)
    _, grad = assemble_gn_system(traj, terms, al)

    eps = 1e-7
    flat = X.ravel().copy()
    fd = np.zeros_like(flat)
    for k in range(len(flat)):
        fp, fm = flat.copy(), flat.copy()
        fp[k] += eps
        fm[k] -= eps
        mp = _merit(_evaluate(terms, fp.reshape(X.shape)), al)
        mm = _merit(_evaluate(terms, fm.reshape(X.shape)), al)
        fd[k] = (mp - mm) / (2 * eps)
    assert np.max(np.abs(grad - fd)) < 1e-6


def test_feature_term_validation():
    f = lambda w: (w[-1], np.eye(2))
    with pytest.raises(ValueError):
        FeatureTerm("x", "soft", 0, (0,), f)
    with pytest.raises(ValueError):
        FeatureTerm("x", "cost", 3, (3,), f)
    with pytest.raises(ValueError):
        FeatureTerm("x", "cost", 2, (1,), f)  # slice below order window
    with pytest.raises(ValueError):
        FeatureTerm("x", "cost", 0, (0,), f, weight=0.0)


def test_solver_params_validation():
    with pytest.raises(ValueError):
        SolverParams(mu_growth=1.0)
    with pytest.raises(ValueError):
        SolverParams(tol_step=0.0)


def test_nonfinite_residual_reports_term_and_slice():
    def bad(window):
        return np.array([np.nan]), np.zeros((1, 2))

    terms = [FeatureTerm("exploding", "cost", 0, (1,), bad)]
    with pytest.raises(FloatingPointError, match="exploding.*slice 1"):
        solve(Trajectory(np.zeros((2, 2))), terms)


def test_jacobian_shape_mismatch_reports_term():
    def bad(window):
        return np.zeros(2), np.zeros((2, 3))

    terms = [FeatureTerm("lopsided", "cost", 0, (0,), bad)]
    with pytest.raises(ValueError, match="lopsided"):
        solve(Trajectory(np.zeros((1, 2))), terms)


def test_arm_limit_feature_rows():
    from rakomo.kinematics import nominal_model

    kin = nominal_model()
    feat = arm_limit_feature(kin)
    q = np.zeros(kin.dim)
    q[6] = 2.95  # above the first arm joint's upper limit of 2.9
    r, J = feat(q[None])
    assert len(r) == 2 * kin.n_arm
    assert r[0] == pytest.approx(0.05)
    assert np.all(r[1:] < 0)
    assert J.shape == (2 * kin.n_arm, kin.dim)


def test_ee_target_feature_zero_at_target():
    from rakomo.kinematics import Configuration, fk_frame, nominal_model

    kin = nominal_model()
    q = Configuration((0.0, 0.0, 0.5), (0, 0, 0), (0.1, 0.4, -0.7, 0.2, 0.3, -0.1))
    target = fk_frame(kin, q, "ee")[:3, 3]
    feat = ee_target_feature(kin, target)
    r, J = feat(q.to_vector()[None])
    assert np.allclose(r, 0.0, atol=1e-12)
    assert J.shape == (3, kin.dim)


def test_margin_feature_arm_columns_zero():
    from rakomo.kinematics import nominal_model, nominal_stance
    from rakomo.surrogate import SampleRanges, init_model

    kin = nominal_model()
    q, feet = nominal_stance(kin, 0.5)
    mlp = init_model(15, (8, 8), np.random.default_rng(0), ranges=SampleRanges())
    feat = margin_feature(kin, mlp, feet, target=0.15)
    r, J = feat(q.to_vector()[None])
    assert r.shape == (1,)
    assert np.allclose(J[0, 6:], 0.0)
    assert np.any(np.abs(J[0, :6]) > 0)
