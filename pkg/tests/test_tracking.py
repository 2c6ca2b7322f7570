import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jetpose.geometry import MotionParams, fundamental_matrix, project_to_line
from jetpose.image import gaussian_kernel, patch_systems
from jetpose.tracking import (
    ConstrainedDisplacements, EpipoleDegenerate, IllConditioned, condition_number, displacement_f, jacobian_f,
    lk_step, lk_step_constrained, regularize, sqrt_psd2,
)

from oracles import K_TEST, constrained_instance, line_sweep_minimum, random_pose, random_psd, smooth_image, stencil5

seeds = st.integers(0, 2**31 - 1)


def test_lk_step_examples():
    np.testing.assert_array_equal(lk_step(np.eye(2), [0.0, 0.0]), [0.0, 0.0])
    np.testing.assert_allclose(lk_step(np.eye(2), [1.0, 2.0]), [-1.0, -2.0])
    with pytest.raises(IllConditioned):
        lk_step(np.diag([1.0, 1e-9]), [1.0, 0.0])


@settings(max_examples=30)
@given(seeds)
def test_lk_step_matches_grid_search(seed):
    rng = np.random.default_rng(seed)
    A = random_psd(rng, max_cond=100, scale=1.0)
    b = rng.uniform(-1, 1, 2)
    v = lk_step(A, b)
    g = np.linspace(-1, 1, 801)
    V = np.stack(np.meshgrid(v[0] + g, v[1] + g), -1).reshape(-1, 2)
    q = np.einsum("ni,ij,nj->n", V, A, V) + 2 * V @ b
    assert np.linalg.norm(V[np.argmin(q)] - v) <= np.sqrt(2) * (g[1] - g[0])


def test_regularization_and_zero_gradient_patch():
    A = np.diag([4.0, 2.0])
    np.testing.assert_allclose(regularize(A), A + 3e-6 * np.eye(2))
    with pytest.raises(IllConditioned):
        lk_step_constrained(regularize(np.zeros((2, 2))), [0.0, 0.0], [100.0, 100.0], [100.0, 100.0],
                            fundamental_matrix(MotionParams(0, 0, 0, 0.1, 0), K_TEST))
    assert condition_number(np.eye(2)) == 1.0


@given(seeds)
def test_sqrt_psd(seed):
    A = random_psd(np.random.default_rng(seed))
    S = sqrt_psd2(A)
    np.testing.assert_allclose(S @ S, A, rtol=1e-9, atol=1e-9 * np.trace(A))
    np.testing.assert_allclose(S, S.T)


def test_inactive_constraint_gives_zero_multiplier():
    rng = np.random.default_rng(1)
    A, b, x, y, F0 = constrained_instance(rng)
    target = y - np.linalg.solve(A, b)
    # a line through x's epipolar geometry that passes exactly through y - A^-1 b:
    # build F whose line for x is the horizontal line through the target
    F = np.zeros((3, 3))
    F[1, 2] = 1.0
    F[2, 2] = -target[1]
    step = lk_step_constrained(A, b, x, y, F)
    assert abs(step.lam) < 1e-10
    np.testing.assert_allclose(step.v, -np.linalg.solve(A, b), atol=1e-10)


@given(seeds)
def test_identity_metric_projects_onto_line(seed):
    rng = np.random.default_rng(seed)
    _, b, x, y, F = constrained_instance(rng)
    step = lk_step_constrained(np.eye(2), b, x, y, F)
    np.testing.assert_allclose(y + step.v, project_to_line(y - b, F @ np.append(x, 1.0)), atol=1e-9)


def test_epipole_degenerate():
    F = fundamental_matrix(MotionParams(0, 0, 0, 0, 0), K_TEST)
    with pytest.raises(EpipoleDegenerate):
        lk_step_constrained(np.eye(2), [0.0, 0.0], [K_TEST.cx, K_TEST.cy], [K_TEST.cx, K_TEST.cy], F)


@settings(max_examples=200)
@given(seeds)
def test_kkt_feasibility_and_line_optimality(seed):
    A, b, x, y, F = constrained_instance(np.random.default_rng(seed))
    s = lk_step_constrained(A, b, x, y, F)
    g = (F @ np.append(x, 1.0))[:2]
    assert np.linalg.norm(A @ s.v + b + s.lam * g) <= 1e-8 * (np.linalg.norm(b) + 1)
    assert abs(np.append(y + s.v, 1.0) @ F @ np.append(x, 1.0)) <= 1e-9
    q_star = s.v @ A @ s.v + 2 * s.v @ b
    q_min, _ = line_sweep_minimum(A, b, x, y, F)
    assert q_star <= q_min + 1e-9 * (1 + abs(q_min))


def _feature(seed):
    rng = np.random.default_rng(seed)
    I = smooth_image(rng)
    J = smooth_image(np.random.default_rng(seed + 1))
    x = rng.uniform([30, 30], [130, 90])
    y = x + rng.uniform(-2, 2, 2)
    ps = patch_systems(I, J, [x], [y], gaussian_kernel())[0]
    ps.A = regularize(ps.A)
    return ps, x, y, random_pose(rng)


def test_displacement_f_is_composition():
    ps, x, y, p = _feature(3)
    a = displacement_f(p, K_TEST, ps, x, y)
    b = lk_step_constrained(ps.A, ps.b, x, y, fundamental_matrix(p, K_TEST))
    np.testing.assert_array_equal(a.v, b.v)


def test_zero_displacement_at_aligned_ground_truth():
    p = MotionParams(0.01, -0.02, 0.005, 0.1, -0.05)
    F = fundamental_matrix(p, K_TEST)
    x = np.array([200.0, 100.0])
    y = project_to_line([210.0, 97.0], F @ np.append(x, 1.0))
    s = displacement_f(p, K_TEST, type("P", (), {"A": np.diag([3.0, 1.0]), "b": np.zeros(2)})(), x, y)
    np.testing.assert_allclose(s.v, 0.0, atol=1e-9)


def _unit_line(p, x):
    l = fundamental_matrix(p, K_TEST) @ np.append(x, 1.0)
    l = l / np.linalg.norm(l[:2])
    return l * np.sign(l[1])


def test_line_preserving_perturbation_leaves_displacement():
    ps, x, y, p = _feature(5)
    p0 = p.as_array()
    Jl = stencil5(lambda q: _unit_line(MotionParams.from_array(q), x), p0, 1e-5)
    n = np.linalg.svd(Jl)[2][-1]  # direction with no first-order change of the line
    eps = 1e-4
    v0 = displacement_f(p, K_TEST, ps, x, y).v
    v1 = displacement_f(MotionParams.from_array(p0 + eps * n), K_TEST, ps, x, y).v
    other = np.linalg.svd(Jl)[2][0]
    v2 = displacement_f(MotionParams.from_array(p0 + eps * other), K_TEST, ps, x, y).v
    assert np.linalg.norm(v1 - v0) < 1e-3 * np.linalg.norm(v2 - v0)


@settings(max_examples=30)
@given(seeds)
def test_jacobian_matches_stencil_and_is_step_stable(seed):
    ps, x, y, p = _feature(seed % 10000)
    J6 = jacobian_f(p, K_TEST, ps, x, y, 1e-6)
    J5 = stencil5(lambda q: lk_step_constrained(ps.A, ps.b, x, y, fundamental_matrix(q, K_TEST)).v, p.as_array())
    scale = np.linalg.norm(J5)
    assert np.linalg.norm(J6 - J5) <= 1e-4 * scale
    Ja = jacobian_f(p, K_TEST, ps, x, y, 1e-5)
    Jb = jacobian_f(p, K_TEST, ps, x, y, 5e-6)
    assert np.linalg.norm(Ja - Jb) <= 1e-4 * scale


def test_batched_model_matches_single_feature_path():
    rng = np.random.default_rng(11)
    I, J = smooth_image(rng), smooth_image(rng)
    xs = rng.uniform([30, 30], [130, 90], (25, 2))
    ys = xs + rng.uniform(-2, 2, (25, 2))
    S = patch_systems(I, J, xs, ys, gaussian_kernel())
    A = regularize(S.A)
    p = random_pose(rng)
    model = ConstrainedDisplacements(A, S.b, xs, ys, K_TEST)
    v, lam, ok = model.displacements(p)
    assert ok.all()
    for k in range(25):
        s = lk_step_constrained(A[k], S.b[k], xs[k], ys[k], fundamental_matrix(p, K_TEST))
        np.testing.assert_allclose(v[k], s.v, rtol=1e-9, atol=1e-9)
    Ja, _ = model.jacobian(p)
    Jf, _ = model.jacobian_fd(p)
    np.testing.assert_allclose(Ja, Jf, rtol=1e-5, atol=1e-6 * np.abs(Ja).max())
