"""Multi-view geometry primitives: SO(3) maps, essential matrix estimation,
linear triangulation, camera resection, and a generic RANSAC loop."""

import numpy as np

from .errors import NumericalError


# ---------------------------------------------------------------------------
# SO(3)
# ---------------------------------------------------------------------------

def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues exponential map, axis-angle vector -> rotation matrix."""
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        W = skew(w)
        return np.eye(3) + W + 0.5 * W @ W
    axis = w / theta
    W = skew(axis)
    return np.eye(3) + np.sin(theta) * W + (1.0 - np.cos(theta)) * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Logarithm map, rotation matrix -> axis-angle vector (norm in [0, pi])."""
    cos_theta = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-10:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) * 0.5
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; recover the axis from
        # the symmetric part S = cos(theta) I + (1 - cos(theta)) a a^T
        S = (R + R.T) * 0.5
        aaT = (S - cos_theta * np.eye(3)) / max(1.0 - cos_theta, 1e-12)
        k = int(np.argmax(np.diag(aaT)))
        axis = aaT[:, k] / np.sqrt(max(aaT[k, k], 1e-15))
        axis = axis / max(np.linalg.norm(axis), 1e-12)
        w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(w, axis) < 0.0:
            axis = -axis
        return axis * theta
    return (
        np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        * theta
        / (2.0 * np.sin(theta))
    )


def rotation_angle(R: np.ndarray) -> float:
    """Rotation angle of R in radians."""
    return float(np.arccos(np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)))


def project_to_so3(M: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in Frobenius norm."""
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return R


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return so3_exp(rng.normal(size=3) * rng.uniform(0.0, np.pi) / np.sqrt(3.0))


def angle_between(u: np.ndarray, v: np.ndarray) -> float:
    """Angle between two vectors in radians."""
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-15 or nv < 1e-15:
        return 0.0
    return float(np.arccos(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0)))


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------

def ransac(
    num_data: int,
    min_samples: int,
    fit_fn,
    residual_fn,
    threshold: float,
    rng: np.random.Generator,
    confidence: float = 0.9999,
    max_iterations: int = 10000,
    sample_size: int | None = None,
    local_optimize: bool = True,
):
    """Generic LO-RANSAC. fit_fn(indices) returns a model or None;
    residual_fn returns per-datum residuals.

    sample_size may exceed min_samples: non-minimal least-squares samples
    average out measurement noise, which matters for近-degenerate fits.
    When a sample improves the consensus, the model is re-fit on its inliers
    with an annealed threshold (4x -> 2x -> 1x), the classic local
    optimization step. Returns (model, inlier_mask) or (None, None).
    """
    sample_size = sample_size or min_samples
    if num_data < sample_size:
        sample_size = min_samples
    if num_data < min_samples:
        return None, None

    def optimized(model, mask):
        if not local_optimize:
            return model, mask
        current = model
        for factor in (4.0, 2.0, 1.0):
            inliers = residual_fn(current) < factor * threshold
            if inliers.sum() >= min_samples:
                refit = fit_fn(np.flatnonzero(inliers))
                if refit is not None:
                    current = refit
        new_mask = residual_fn(current) < threshold
        if new_mask.sum() > mask.sum():
            return current, new_mask
        return model, mask

    best_model, best_mask, best_count = None, None, -1
    iteration, needed = 0, max_iterations
    while iteration < min(needed, max_iterations):
        sample = rng.choice(num_data, size=sample_size, replace=False)
        model = fit_fn(sample)
        iteration += 1
        if model is None:
            continue
        mask = residual_fn(model) < threshold
        count = int(mask.sum())
        if count > best_count and count >= min_samples:
            model, mask = optimized(model, mask)
            count = int(mask.sum())
        if count > best_count:
            best_model, best_mask, best_count = model, mask, count
            ratio = max(count / num_data, 1e-9)
            if ratio >= 1.0 - 1e-12:
                break
            denom = np.log(max(1.0 - ratio**min_samples, 1e-15))
            if denom >= -1e-15:
                needed = max_iterations
            else:
                needed = int(np.ceil(np.log(max(1.0 - confidence, 1e-15)) / denom))
    if best_model is None:
        return None, None
    return best_model, best_mask


# ---------------------------------------------------------------------------
# Essential matrix (two-view relative pose)
# ---------------------------------------------------------------------------

def _normalize_2d(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hartley normalization: zero centroid, mean distance sqrt(2)."""
    centroid = x.mean(axis=0)
    d = np.linalg.norm(x - centroid, axis=1).mean()
    s = np.sqrt(2.0) / max(d, 1e-12)
    T = np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])
    xn = (x - centroid) * s
    return xn, T


def eight_point_essential(rays_i: np.ndarray, rays_j: np.ndarray) -> np.ndarray | None:
    """Essential matrix from >= 8 calibrated correspondences.

    rays are inhomogeneous normalized image coordinates (x/z, y/z); the
    returned E satisfies ray_j^T E ray_i = 0 (homogeneous rays).
    """
    n = len(rays_i)
    if n < 8:
        return None
    xi, Ti = _normalize_2d(rays_i)
    xj, Tj = _normalize_2d(rays_j)
    A = np.empty((n, 9))
    A[:, 0] = xj[:, 0] * xi[:, 0]
    A[:, 1] = xj[:, 0] * xi[:, 1]
    A[:, 2] = xj[:, 0]
    A[:, 3] = xj[:, 1] * xi[:, 0]
    A[:, 4] = xj[:, 1] * xi[:, 1]
    A[:, 5] = xj[:, 1]
    A[:, 6] = xi[:, 0]
    A[:, 7] = xi[:, 1]
    A[:, 8] = 1.0
    try:
        _, _, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError:
        return None
    F = Vt[-1].reshape(3, 3)
    F = Tj.T @ F @ Ti
    # project onto the essential manifold: two equal singular values, one zero
    U, S, Vt = np.linalg.svd(F)
    s = (S[0] + S[1]) * 0.5
    return U @ np.diag([s, s, 0.0]) @ Vt


def sampson_distance(F: np.ndarray, x_i: np.ndarray, x_j: np.ndarray) -> np.ndarray:
    """First-order epipolar distance of pixel correspondences under F."""
    xi = np.column_stack([x_i, np.ones(len(x_i))])
    xj = np.column_stack([x_j, np.ones(len(x_j))])
    Fxi = xi @ F.T  # rows: F @ xi
    Ftxj = xj @ F  # rows: F^T @ xj
    num = np.sum(xj * Fxi, axis=1) ** 2
    den = Fxi[:, 0] ** 2 + Fxi[:, 1] ** 2 + Ftxj[:, 0] ** 2 + Ftxj[:, 1] ** 2
    return np.sqrt(num / np.maximum(den, 1e-15))


def decompose_essential(
    E: np.ndarray, rays_i: np.ndarray, rays_j: np.ndarray
) -> tuple[np.ndarray, np.ndarray] | None:
    """Pick the cheirality-positive (R, t) with x_j ~ R x_i + t, |t| = 1."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    best, best_count = None, -1
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for tc in (t, -t):
            P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
            P2 = np.hstack([R, tc.reshape(3, 1)])
            X = triangulate_two_view_batch(P1, P2, rays_i, rays_j)
            z1 = X[:, 2]
            z2 = (X @ R.T + tc)[:, 2]
            count = int(((z1 > 0) & (z2 > 0)).sum())
            if count > best_count:
                best, best_count = (R, tc.copy()), count
    if best is None or best_count <= 0:
        return None
    return best


# ---------------------------------------------------------------------------
# Triangulation
# ---------------------------------------------------------------------------

def triangulate_two_view_batch(
    P1: np.ndarray, P2: np.ndarray, x1: np.ndarray, x2: np.ndarray
) -> np.ndarray:
    """DLT triangulation of many correspondences for two 3x4 cameras.

    x1, x2 are inhomogeneous 2D coordinates in the frame P expects.
    """
    n = len(x1)
    A = np.empty((n, 4, 4))
    A[:, 0] = x1[:, 0, None] * P1[2] - P1[0]
    A[:, 1] = x1[:, 1, None] * P1[2] - P1[1]
    A[:, 2] = x2[:, 0, None] * P2[2] - P2[0]
    A[:, 3] = x2[:, 1, None] * P2[2] - P2[1]
    _, _, Vt = np.linalg.svd(A)
    X = Vt[:, -1, :]
    w = X[:, 3]
    w = np.where(np.abs(w) < 1e-15, 1e-15, w)
    return X[:, :3] / w[:, None]


def triangulate_linear(Ps: list[np.ndarray], xs: np.ndarray) -> np.ndarray:
    """Homogeneous least-squares triangulation from >= 2 views.

    Ps are 3x4 projection matrices; xs the matching 2D points, one row per
    view, in the same coordinates the Ps produce.
    """
    A = np.empty((2 * len(Ps), 4))
    for k, (P, x) in enumerate(zip(Ps, xs)):
        A[2 * k] = x[0] * P[2] - P[0]
        A[2 * k + 1] = x[1] * P[2] - P[1]
    _, _, Vt = np.linalg.svd(A)
    X = Vt[-1]
    if abs(X[3]) < 1e-15:
        raise NumericalError("triangulation at infinity")
    return X[:3] / X[3]


# ---------------------------------------------------------------------------
# Camera resection (absolute pose from 2D-3D)
# ---------------------------------------------------------------------------

def resect_linear(points3d: np.ndarray, rays: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    """Linear 6-point resection on normalized image coordinates.

    Returns (R, t) with x_cam = R X + t, or None if degenerate.
    """
    n = len(points3d)
    if n < 6:
        return None
    Xc = points3d.mean(axis=0)
    scale = np.linalg.norm(points3d - Xc, axis=1).mean()
    if scale < 1e-12:
        return None
    Xn = (points3d - Xc) / scale
    A = np.zeros((2 * n, 12))
    A[0::2, 0:3] = Xn
    A[0::2, 3] = 1.0
    A[0::2, 8:11] = -rays[:, 0, None] * Xn
    A[0::2, 11] = -rays[:, 0]
    A[1::2, 4:7] = Xn
    A[1::2, 7] = 1.0
    A[1::2, 8:11] = -rays[:, 1, None] * Xn
    A[1::2, 11] = -rays[:, 1]
    try:
        _, _, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError:
        return None
    P = Vt[-1].reshape(3, 4)
    # undo the 3D normalization: x ~ M X + p4 in original coordinates
    M = P[:, :3] / scale
    p4 = P[:, 3] - M @ Xc
    U, S, Vt2 = np.linalg.svd(M)
    if S[2] < 1e-10 * max(S[0], 1e-300):
        return None
    R = U @ Vt2
    lam = S.mean()
    if np.linalg.det(R) < 0:
        R = -R
        lam = -lam
    t = p4 / lam
    depths = (points3d @ R.T + t)[:, 2]
    if np.median(depths) < 0:
        return None
    return R, t


def reprojection_residuals_pixels(
    R: np.ndarray, t: np.ndarray, K: np.ndarray, points3d: np.ndarray, pixels: np.ndarray
) -> np.ndarray:
    """Per-point pixel reprojection error for x_cam = R X + t; behind-camera
    points get +inf."""
    xc = points3d @ R.T + t
    z = xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K[0, 0] * xc[:, 0] / z + K[0, 2]
        v = K[1, 1] * xc[:, 1] / z + K[1, 2]
    err = np.sqrt((u - pixels[:, 0]) ** 2 + (v - pixels[:, 1]) ** 2)
    err[z <= 0] = np.inf
    err[~np.isfinite(err)] = np.inf
    return err
