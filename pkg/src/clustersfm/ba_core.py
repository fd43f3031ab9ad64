"""Levenberg-Marquardt reprojection minimization over poses and points.

One implementation serves local incremental SfM, single-pose refinement and
the partition solves of distributed bundle adjustment. Points are eliminated
per iteration through the Schur complement, so each step costs one dense
solve over the free camera blocks only.

Parameterization: rotations update multiplicatively, R <- exp([w]x) R;
centers and points additively. Residual of one observation is
project(R (X - c)) - pixel, so the Jacobian blocks are

    A = d(uv)/dY = [[f/z, 0, -f x / z^2], [0, f/z, -f y / z^2]]
    dY/dw = -[Y]x,   dY/dc = -R,   dY/dX = R,      with Y = R (X - c).
"""

from dataclasses import dataclass, field

import numpy as np

DEFAULT_MAX_ITERATIONS = 50
DEFAULT_RELATIVE_TOL = 1e-10
DEFAULT_GRADIENT_TOL = 1e-12
LAMBDA_INIT = 1e-3
LAMBDA_MAX = 1e12


@dataclass
class BAProblem:
    """Dense-array bundle adjustment state.

    intrinsics rows are (focal, cx, cy) per camera. cam_idx/pt_idx/pixels
    describe observations; free masks select which blocks move.
    """

    rotations: np.ndarray  # (C, 3, 3)
    centers: np.ndarray  # (C, 3)
    intrinsics: np.ndarray  # (C, 3)
    points: np.ndarray  # (P, 3)
    cam_idx: np.ndarray  # (M,)
    pt_idx: np.ndarray  # (M,)
    pixels: np.ndarray  # (M, 2)
    free_cams: np.ndarray  # (C,) bool
    free_pts: np.ndarray  # (P,) bool

    def copy_state(self):
        return self.rotations.copy(), self.centers.copy(), self.points.copy()


@dataclass
class BAResult:
    rotations: np.ndarray
    centers: np.ndarray
    points: np.ndarray
    cost: float
    initial_cost: float
    iterations: int
    converged: bool
    residual_norms: np.ndarray  # (M,) pixel error per observation
    cost_trace: list = field(default_factory=list)


def _camera_frame(rotations, centers, points, cam_idx, pt_idx):
    d = points[pt_idx] - centers[cam_idx]
    return np.matmul(rotations[cam_idx], d[:, :, None])[:, :, 0]


def residuals(problem: BAProblem, rotations=None, centers=None, points=None) -> np.ndarray:
    """(M, 2) residual array; observations behind a camera get +inf."""
    rotations = problem.rotations if rotations is None else rotations
    centers = problem.centers if centers is None else centers
    points = problem.points if points is None else points
    Y = _camera_frame(rotations, centers, points, problem.cam_idx, problem.pt_idx)
    K = problem.intrinsics[problem.cam_idx]
    z = Y[:, 2]
    bad = z <= 1e-12
    zs = np.where(bad, 1.0, z)
    u = K[:, 0] * Y[:, 0] / zs + K[:, 1]
    v = K[:, 0] * Y[:, 1] / zs + K[:, 2]
    r = np.stack([u, v], axis=1) - problem.pixels
    r[bad] = np.inf
    return r


def cost_of(r: np.ndarray) -> float:
    if not np.all(np.isfinite(r)):
        return np.inf
    return float(np.sum(r * r))


def jacobian_blocks(problem: BAProblem, rotations=None, centers=None, points=None):
    """Per-observation Jacobian blocks (J_cam (M,2,6), J_pt (M,2,3))."""
    rotations = problem.rotations if rotations is None else rotations
    centers = problem.centers if centers is None else centers
    points = problem.points if points is None else points
    cam_idx, pt_idx = problem.cam_idx, problem.pt_idx
    R = rotations[cam_idx]
    Y = _camera_frame(rotations, centers, points, cam_idx, pt_idx)
    f = problem.intrinsics[cam_idx][:, 0]
    z = Y[:, 2]
    m = len(cam_idx)
    A = np.zeros((m, 2, 3))
    A[:, 0, 0] = f / z
    A[:, 0, 2] = -f * Y[:, 0] / z**2
    A[:, 1, 1] = f / z
    A[:, 1, 2] = -f * Y[:, 1] / z**2
    # -[Y]x
    negYx = np.zeros((m, 3, 3))
    negYx[:, 0, 1] = Y[:, 2]
    negYx[:, 0, 2] = -Y[:, 1]
    negYx[:, 1, 0] = -Y[:, 2]
    negYx[:, 1, 2] = Y[:, 0]
    negYx[:, 2, 0] = Y[:, 1]
    negYx[:, 2, 1] = -Y[:, 0]
    AR = np.matmul(A, R)
    J_rot = np.matmul(A, negYx)
    J_cam = np.concatenate([J_rot, -AR], axis=2)
    J_pt = AR
    return J_cam, J_pt


def pack_parameters(problem: BAProblem) -> np.ndarray:
    """Parameter vector [w_c, c_c for free cams..., X_p for free points...].

    Rotations enter as zero local increments around the current state.
    """
    n_c = int(problem.free_cams.sum())
    n_p = int(problem.free_pts.sum())
    params = np.zeros(6 * n_c + 3 * n_p)
    params[6 * n_c :] = problem.points[problem.free_pts].ravel()
    cam_ids = np.flatnonzero(problem.free_cams)
    for k, c in enumerate(cam_ids):
        params[6 * k + 3 : 6 * k + 6] = problem.centers[c]
    return params


def residual_vector_at(problem: BAProblem, params: np.ndarray) -> np.ndarray:
    """Flat residual vector at the given parameter vector (for FD checks)."""
    from .geometry import so3_exp

    rotations, centers, points = problem.copy_state()
    cam_ids = np.flatnonzero(problem.free_cams)
    for k, c in enumerate(cam_ids):
        w = params[6 * k : 6 * k + 3]
        rotations[c] = so3_exp(w) @ problem.rotations[c]
        centers[c] = params[6 * k + 3 : 6 * k + 6]
    n_c = len(cam_ids)
    pt_ids = np.flatnonzero(problem.free_pts)
    points[pt_ids] = params[6 * n_c :].reshape(-1, 3)
    return residuals(problem, rotations, centers, points).ravel()


def jacobian_dense(problem: BAProblem) -> np.ndarray:
    """Full analytic Jacobian (2M x (6 Cf + 3 Pf)) in pack_parameters order."""
    J_cam, J_pt = jacobian_blocks(problem)
    cam_ids = np.flatnonzero(problem.free_cams)
    pt_ids = np.flatnonzero(problem.free_pts)
    cpos = {c: k for k, c in enumerate(cam_ids)}
    ppos = {p: k for k, p in enumerate(pt_ids)}
    m = len(problem.cam_idx)
    J = np.zeros((2 * m, 6 * len(cam_ids) + 3 * len(pt_ids)))
    off = 6 * len(cam_ids)
    for o in range(m):
        c, p = problem.cam_idx[o], problem.pt_idx[o]
        if c in cpos:
            J[2 * o : 2 * o + 2, 6 * cpos[c] : 6 * cpos[c] + 6] = J_cam[o]
        if p in ppos:
            J[2 * o : 2 * o + 2, off + 3 * ppos[p] : off + 3 * ppos[p] + 3] = J_pt[o]
    return J


class _SchurStructure:
    """Precomputed index arrays for assembling the reduced camera system."""

    def __init__(self, problem: BAProblem):
        self.cam_map = -np.ones(len(problem.rotations), dtype=np.int64)
        free_cam_ids = np.flatnonzero(problem.free_cams)
        self.cam_map[free_cam_ids] = np.arange(len(free_cam_ids))
        self.n_free_cams = len(free_cam_ids)
        self.pt_map = -np.ones(len(problem.points), dtype=np.int64)
        free_pt_ids = np.flatnonzero(problem.free_pts)
        self.pt_map[free_pt_ids] = np.arange(len(free_pt_ids))
        self.n_free_pts = len(free_pt_ids)

        cam_idx = np.asarray(problem.cam_idx, dtype=np.int64)
        pt_idx = np.asarray(problem.pt_idx, dtype=np.int64)
        self.obs_cam = self.cam_map[cam_idx]  # -1 where camera fixed
        self.obs_pt = self.pt_map[pt_idx]
        # coupling observations: both the camera and the point are free
        self.coupled = np.flatnonzero((self.obs_cam >= 0) & (self.obs_pt >= 0))
        # sparse indices for the stacked W = J_c^T J_p block matrix
        oc = self.obs_cam[self.coupled]
        op = self.obs_pt[self.coupled]
        self.w_rows = (6 * oc[:, None, None] + np.arange(6)[None, :, None]).repeat(3, axis=2).ravel()
        self.w_cols = (3 * op[:, None, None] + np.arange(3)[None, None, :]).repeat(6, axis=1).ravel()
        npnt = self.n_free_pts
        self.hpp_rows = (3 * np.arange(npnt)[:, None, None] + np.arange(3)[None, :, None]).repeat(3, axis=2).ravel()
        self.hpp_cols = (3 * np.arange(npnt)[:, None, None] + np.arange(3)[None, None, :]).repeat(3, axis=1).ravel()


def _scatter_add(target: np.ndarray, idx: np.ndarray, values: np.ndarray) -> None:
    """Accumulate values into target rows by index; bincount is much faster
    than np.add.at for many repeated indices."""
    flat = values.reshape(len(values), -1)
    n = target.shape[0]
    out = np.empty((n, flat.shape[1]))
    for k in range(flat.shape[1]):
        out[:, k] = np.bincount(idx, weights=flat[:, k], minlength=n)
    target += out.reshape(target.shape)


def _solve_lm_step(problem, struct, J_cam, J_pt, r, lam):
    """One damped normal-equation solve; returns (d_cam (Cf,6), d_pt (Pf,3))."""
    nc, npnt = struct.n_free_cams, struct.n_free_pts
    obs_cam, obs_pt = struct.obs_cam, struct.obs_pt

    cam_obs = np.flatnonzero(obs_cam >= 0)
    pt_obs = np.flatnonzero(obs_pt >= 0)

    H_cc = np.zeros((nc, 6, 6))
    g_c = np.zeros((nc, 6))
    if len(cam_obs):
        J = J_cam[cam_obs]
        JtJ = np.matmul(J.transpose(0, 2, 1), J)
        Jtr = np.matmul(J.transpose(0, 2, 1), r[cam_obs, :, None])[:, :, 0]
        _scatter_add(H_cc, obs_cam[cam_obs], JtJ)
        _scatter_add(g_c, obs_cam[cam_obs], Jtr)

    H_pp = np.zeros((npnt, 3, 3))
    g_p = np.zeros((npnt, 3))
    if len(pt_obs):
        J = J_pt[pt_obs]
        JtJ = np.matmul(J.transpose(0, 2, 1), J)
        Jtr = np.matmul(J.transpose(0, 2, 1), r[pt_obs, :, None])[:, :, 0]
        _scatter_add(H_pp, obs_pt[pt_obs], JtJ)
        _scatter_add(g_p, obs_pt[pt_obs], Jtr)

    # multiplicative damping on the block diagonals
    idx3 = np.arange(3)
    idx6 = np.arange(6)
    H_cc_d = H_cc.copy()
    H_cc_d[:, idx6, idx6] += lam * H_cc[:, idx6, idx6] + 1e-12
    H_pp_d = H_pp.copy()
    H_pp_d[:, idx3, idx3] += lam * H_pp[:, idx3, idx3] + 1e-12

    if npnt == 0:
        S = _blocks_to_dense(H_cc_d, nc)
        try:
            d_cam = np.linalg.solve(S, -g_c.ravel()).reshape(nc, 6)
        except np.linalg.LinAlgError:
            return None, None
        return d_cam, np.zeros((0, 3))

    try:
        H_pp_inv = np.linalg.inv(H_pp_d)
    except np.linalg.LinAlgError:
        return None, None

    if nc == 0:
        d_pt = -np.matmul(H_pp_inv, g_p[:, :, None])[:, :, 0]
        return np.zeros((0, 6)), d_pt

    # stacked sparse W (6nc x 3npnt) and block-diagonal Hpp^-1
    from scipy.sparse import coo_matrix

    coupled = struct.coupled
    W = np.matmul(J_cam[coupled].transpose(0, 2, 1), J_pt[coupled])  # (mc, 6, 3)
    Wsp = coo_matrix(
        (W.ravel(), (struct.w_rows, struct.w_cols)), shape=(6 * nc, 3 * npnt)
    ).tocsr()
    Hinv_sp = coo_matrix(
        (H_pp_inv.ravel(), (struct.hpp_rows, struct.hpp_cols)), shape=(3 * npnt, 3 * npnt)
    ).tocsr()

    # reduced gradient and camera system: S = Hcc - W Hpp^-1 W^T
    g_red = g_c.ravel() - Wsp @ (Hinv_sp @ g_p.ravel())
    WH = Wsp @ Hinv_sp
    S_dense = _blocks_to_dense(H_cc_d, nc) - (WH @ Wsp.T).toarray()
    try:
        d_cam_flat = np.linalg.solve(S_dense, -g_red)
    except np.linalg.LinAlgError:
        return None, None
    d_cam = d_cam_flat.reshape(nc, 6)

    # back-substitute points: d_p = -Hpp^-1 (g_p + W^T d_cam)
    rhs = g_p.ravel() + Wsp.T @ d_cam_flat
    d_pt = -(Hinv_sp @ rhs).reshape(npnt, 3)
    return d_cam, d_pt


def _blocks_to_dense(diag_blocks, nc):
    S = np.zeros((nc, nc, 6, 6))
    S[np.arange(nc), np.arange(nc)] = diag_blocks
    return S.transpose(0, 2, 1, 3).reshape(6 * nc, 6 * nc)


def _gradient_inf_norm(problem, struct, J_cam, J_pt, r):
    g = 0.0
    cam_obs = np.flatnonzero(struct.obs_cam >= 0)
    if len(cam_obs):
        g_c = np.zeros((struct.n_free_cams, 6))
        vals = np.matmul(J_cam[cam_obs].transpose(0, 2, 1), r[cam_obs, :, None])[:, :, 0]
        _scatter_add(g_c, struct.obs_cam[cam_obs], vals)
        g = max(g, float(np.abs(g_c).max(initial=0.0)))
    pt_obs = np.flatnonzero(struct.obs_pt >= 0)
    if len(pt_obs):
        g_p = np.zeros((struct.n_free_pts, 3))
        vals = np.matmul(J_pt[pt_obs].transpose(0, 2, 1), r[pt_obs, :, None])[:, :, 0]
        _scatter_add(g_p, struct.obs_pt[pt_obs], vals)
        g = max(g, float(np.abs(g_p).max(initial=0.0)))
    return g


def lm_minimize(
    problem: BAProblem,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    relative_tol: float = DEFAULT_RELATIVE_TOL,
    gradient_tol: float = DEFAULT_GRADIENT_TOL,
    rescale_fn=None,
) -> BAResult:
    """Minimize total squared reprojection error over the free blocks.

    Cost is non-increasing across accepted steps by construction. The
    optional rescale_fn(rotations, centers, points) is applied after each
    accepted step to hold a gauge (it must leave the cost unchanged).
    """
    from .geometry import so3_exp

    struct = _SchurStructure(problem)
    rotations, centers, points = problem.copy_state()
    r = residuals(problem, rotations, centers, points)
    cost = cost_of(r)
    initial_cost = cost
    trace = [cost]
    lam = LAMBDA_INIT
    iterations = 0
    converged = False
    cost_floor = 1e-18 * max(len(problem.cam_idx), 1)

    if (struct.n_free_cams == 0 and struct.n_free_pts == 0) or cost <= cost_floor:
        converged = True

    while not converged and iterations < max_iterations and np.isfinite(cost):
        J_cam, J_pt = jacobian_blocks(problem, rotations, centers, points)
        if _gradient_inf_norm(problem, struct, J_cam, J_pt, r) < gradient_tol:
            converged = True
            break
        accepted = False
        while iterations < max_iterations and lam <= LAMBDA_MAX:
            d_cam, d_pt = _solve_lm_step(problem, struct, J_cam, J_pt, r, lam)
            iterations += 1
            if d_cam is None:
                lam *= 2.0
                continue
            new_rot, new_cen, new_pts = rotations.copy(), centers.copy(), points.copy()
            cam_ids = np.flatnonzero(problem.free_cams)
            for k, c in enumerate(cam_ids):
                new_rot[c] = so3_exp(d_cam[k, :3]) @ rotations[c]
                new_cen[c] = centers[c] + d_cam[k, 3:]
            pt_ids = np.flatnonzero(problem.free_pts)
            if len(pt_ids):
                new_pts[pt_ids] = points[pt_ids] + d_pt
            new_r = residuals(problem, new_rot, new_cen, new_pts)
            new_cost = cost_of(new_r)
            if new_cost < cost:
                decrease = cost - new_cost
                rotations, centers, points, r = new_rot, new_cen, new_pts, new_r
                cost = new_cost
                trace.append(cost)
                lam = max(lam * 0.5, 1e-12)
                accepted = True
                if rescale_fn is not None:
                    rotations, centers, points = rescale_fn(rotations, centers, points)
                    r = residuals(problem, rotations, centers, points)
                    cost = cost_of(r)
                if decrease <= relative_tol * max(cost, 1e-300) or cost <= cost_floor:
                    converged = True
                break
            lam *= 2.0
        if not accepted:
            break

    norms = np.linalg.norm(residuals(problem, rotations, centers, points), axis=1)
    return BAResult(
        rotations=rotations,
        centers=centers,
        points=points,
        cost=cost,
        initial_cost=initial_cost,
        iterations=iterations,
        converged=converged,
        residual_norms=norms,
        cost_trace=trace,
    )
