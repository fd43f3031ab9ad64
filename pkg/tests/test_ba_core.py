import numpy as np

from clustersfm.ba_core import (
    BAProblem,
    jacobian_dense,
    lm_minimize,
    pack_parameters,
    residual_vector_at,
    residuals,
)
from clustersfm.geometry import so3_exp
from clustersfm.synthetic import _look_at


def make_problem(rng, n_cams=4, n_pts=15, pixel_noise=0.0, fix_first=True):
    centers = rng.normal(size=(n_cams, 3)) * 2.0
    target = np.array([0.0, 0.0, 30.0])
    rotations = np.array([_look_at(c, target).R for c in centers])
    points = rng.normal(size=(n_pts, 3)) + target
    intr = np.tile(np.array([800.0, 640.0, 480.0]), (n_cams, 1))
    cam_idx, pt_idx = np.meshgrid(np.arange(n_cams), np.arange(n_pts), indexing="ij")
    cam_idx, pt_idx = cam_idx.ravel(), pt_idx.ravel()
    pix = np.zeros((len(cam_idx), 2))
    for m, (c, p) in enumerate(zip(cam_idx, pt_idx)):
        Y = rotations[c] @ (points[p] - centers[c])
        pix[m] = [800 * Y[0] / Y[2] + 640, 800 * Y[1] / Y[2] + 480]
    if pixel_noise:
        pix = pix + rng.normal(0, pixel_noise, pix.shape)
    free_cams = np.ones(n_cams, dtype=bool)
    if fix_first:
        free_cams[0] = False
    return BAProblem(
        rotations=rotations,
        centers=centers,
        intrinsics=intr,
        points=points,
        cam_idx=cam_idx,
        pt_idx=pt_idx,
        pixels=pix,
        free_cams=free_cams,
        free_pts=np.ones(n_pts, dtype=bool),
    ), (rotations.copy(), centers.copy(), points.copy())


def finite_difference_jacobian(problem, h=1e-6):
    params = pack_parameters(problem)
    J = np.zeros((2 * len(problem.cam_idx), len(params)))
    for k in range(len(params)):
        up, dn = params.copy(), params.copy()
        up[k] += h
        dn[k] -= h
        J[:, k] = (residual_vector_at(problem, up) - residual_vector_at(problem, dn)) / (2 * h)
    return J


def max_relative_error(Ja, Jfd):
    denom = np.maximum.reduce([np.abs(Ja), np.abs(Jfd), np.ones_like(Ja)])
    return float((np.abs(Ja - Jfd) / denom).max())


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(0)
    problem, _ = make_problem(rng, pixel_noise=2.0)
    assert max_relative_error(jacobian_dense(problem), finite_difference_jacobian(problem)) < 1e-4


def test_ground_truth_is_fixed_point():
    rng = np.random.default_rng(1)
    problem, _ = make_problem(rng)
    result = lm_minimize(problem)
    assert result.converged
    assert result.iterations <= 1
    assert result.cost < 1e-15


def test_perturbed_state_recovers():
    rng = np.random.default_rng(2)
    problem, (rot, cen, pts) = make_problem(rng)
    problem.rotations = problem.rotations.copy()
    problem.centers = problem.centers.copy()
    problem.points = problem.points.copy()
    for c in range(1, len(rot)):
        problem.rotations[c] = so3_exp(rng.normal(size=3) * 0.01) @ problem.rotations[c]
        problem.centers[c] = problem.centers[c] + rng.normal(size=3) * 0.03
    problem.points = problem.points + rng.normal(size=pts.shape) * 0.03
    result = lm_minimize(problem, max_iterations=100)
    assert result.cost < 1e-16 * len(problem.cam_idx) or result.cost < result.initial_cost * 1e-12


def test_cost_trace_monotone():
    rng = np.random.default_rng(3)
    problem, _ = make_problem(rng, pixel_noise=1.0)
    problem.rotations = problem.rotations.copy()
    for c in range(1, 4):
        problem.rotations[c] = so3_exp(rng.normal(size=3) * 0.02) @ problem.rotations[c]
    result = lm_minimize(problem, max_iterations=60)
    trace = result.cost_trace
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


def test_fixed_blocks_do_not_move():
    rng = np.random.default_rng(4)
    problem, (rot, cen, pts) = make_problem(rng, pixel_noise=1.0)
    problem.free_pts = np.zeros(len(pts), dtype=bool)
    problem.free_pts[:5] = True
    result = lm_minimize(problem, max_iterations=20)
    assert np.array_equal(result.rotations[0], rot[0])
    assert np.array_equal(result.centers[0], cen[0])
    assert np.array_equal(result.points[5:], pts[5:])


def test_rescale_hook_is_cost_invariant():
    rng = np.random.default_rng(5)
    problem, _ = make_problem(rng, pixel_noise=0.5)

    def rescale(rotations, centers, points):
        origin = centers[0]
        s = 1.0 / max(np.linalg.norm(centers[1] - origin), 1e-12)
        return rotations, origin + (centers - origin) * s, origin + (points - origin) * s

    result = lm_minimize(problem, max_iterations=40, rescale_fn=rescale)
    assert abs(np.linalg.norm(result.centers[1] - result.centers[0]) - 1.0) < 1e-9
    r = residuals(problem, result.rotations, result.centers, result.points)
    assert np.isfinite(r).all()
