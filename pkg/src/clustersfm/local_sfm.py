"""Per-cluster incremental structure from motion.

Each interdependent cluster is reconstructed independently in its own frame
and scale: seed-pair initialization from the essential matrix, next-best-view
resection, multi-view triangulation, and repeated local bundle adjustment
with outlier pruning. The cluster's relative motions are then extracted for
global motion averaging.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import ba_core
from .clustering import Cluster
from .errors import NumericalError
from .geometry import (
    angle_between,
    decompose_essential,
    eight_point_essential,
    ransac,
    reprojection_residuals_pixels,
    resect_linear,
    sampson_distance,
    triangulate_linear,
)
from .scene import Camera, CameraGraph
from .tracks import Track
from .utils import seeded_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LocalSfMConfig:
    min_seed_correspondences: int = 16
    seed_median_angle_deg: float = 2.0
    ransac_threshold_px: float = 2.0
    ransac_confidence: float = 0.9999
    ransac_max_iterations: int = 10000
    resection_min_visible: int = 12
    resection_min_inliers: int = 12
    resection_min_inlier_ratio: float = 0.3
    resection_threshold_px: float = 4.0
    triangulation_min_angle_deg: float = 1.0
    max_reprojection_px: float = 4.0
    ba_every: int = 5
    ba_max_iterations: int = 50
    intermediate_ba_max_iterations: int = 25
    seed: int = 0


class SeedFailure(NumericalError):
    """No camera pair in the cluster yields a usable two-view geometry."""


@dataclass
class LocalReconstruction:
    """One cluster's reconstruction in an arbitrary local frame and scale."""

    cluster_id: int
    rotations: dict = field(default_factory=dict)  # camera id -> (3,3)
    centers: dict = field(default_factory=dict)  # camera id -> (3,)
    points: dict = field(default_factory=dict)  # track id -> (3,)
    observations: dict = field(default_factory=dict)  # track id -> [(cam, x, y)] inliers
    seed_pair: tuple | None = None
    failed: bool = False
    mean_reprojection: float = float("nan")

    @property
    def registered(self) -> list[int]:
        return sorted(self.rotations)

    def camera_point_index(self) -> dict[int, set]:
        out: dict[int, set] = {}
        for tid, obs in self.observations.items():
            for cam, _x, _y in obs:
                out.setdefault(cam, set()).add(tid)
        return out


@dataclass(frozen=True, eq=False)
class RelativeMotion:
    """Relative pose of pair (i, j) measured inside cluster k; the
    translation carries the cluster's arbitrary scale."""

    i: int
    j: int
    cluster_id: int
    rotation: np.ndarray  # R_ij = R_j R_i^T
    translation: np.ndarray  # t_ij = R_j (c_i - c_j), cluster scale
    support: int


# ---------------------------------------------------------------------------
# Cluster-restricted track view
# ---------------------------------------------------------------------------

class ClusterTracks:
    """Tracks filtered to one cluster's cameras, with per-camera indexes."""

    def __init__(self, cluster_cameras, tracks: list[Track]):
        inside = set(int(c) for c in cluster_cameras)
        self.track_ids = []
        self.cams = []  # per track: (n,) camera ids
        self.xys = []  # per track: (n, 2)
        self.cam_slots: dict[int, list] = {c: [] for c in inside}
        for t in tracks:
            mask = np.array([int(c) in inside for c in t.cameras])
            if mask.sum() < 2:
                continue
            idx = len(self.track_ids)
            cams = t.cameras[mask].astype(int)
            self.track_ids.append(int(t.id))
            self.cams.append(cams)
            self.xys.append(t.xy[mask])
            for slot, c in enumerate(cams):
                self.cam_slots[int(c)].append((idx, slot))

    def __len__(self) -> int:
        return len(self.track_ids)

    def shared_tracks(self, i: int, j: int) -> list[int]:
        set_j = {t for t, _ in self.cam_slots.get(j, [])}
        return sorted(t for t, _ in self.cam_slots.get(i, []) if t in set_j)

    def obs_of(self, t_idx: int, cam: int) -> np.ndarray:
        cams = self.cams[t_idx]
        slot = int(np.flatnonzero(cams == cam)[0])
        return self.xys[t_idx][slot]


# ---------------------------------------------------------------------------
# Two-view seed
# ---------------------------------------------------------------------------

def _pixels_to_rays(K: np.ndarray, xy: np.ndarray) -> np.ndarray:
    return np.column_stack([(xy[:, 0] - K[0, 2]) / K[0, 0], (xy[:, 1] - K[1, 2]) / K[1, 1]])


def estimate_relative_pose(
    K_i: np.ndarray,
    K_j: np.ndarray,
    xy_i: np.ndarray,
    xy_j: np.ndarray,
    config: LocalSfMConfig,
    rng: np.random.Generator,
):
    """Essential-matrix relative pose with RANSAC on the Sampson distance.

    Returns (R, t, inlier_mask) with x_j ~ R x_i + t and |t| = 1, or None.
    """
    rays_i = _pixels_to_rays(K_i, xy_i)
    rays_j = _pixels_to_rays(K_j, xy_j)
    Ki_inv = np.linalg.inv(K_i)
    Kj_inv = np.linalg.inv(K_j)

    def fit(idx):
        return eight_point_essential(rays_i[idx], rays_j[idx])

    def residual(E):
        F = Kj_inv.T @ E @ Ki_inv
        return sampson_distance(F, xy_i, xy_j)

    E, mask = ransac(
        len(xy_i),
        8,
        fit,
        residual,
        config.ransac_threshold_px,
        rng,
        confidence=config.ransac_confidence,
        max_iterations=config.ransac_max_iterations,
        sample_size=12,
    )
    if E is None or mask.sum() < 8:
        return None
    # refit on the full inlier set
    E_ref = eight_point_essential(rays_i[mask], rays_j[mask])
    if E_ref is not None:
        F = Kj_inv.T @ E_ref @ Ki_inv
        mask_ref = sampson_distance(F, xy_i, xy_j) < config.ransac_threshold_px
        if mask_ref.sum() >= mask.sum():
            E, mask = E_ref, mask_ref
    pose = decompose_essential(E, rays_i[mask], rays_j[mask])
    if pose is None:
        return None
    R, t = pose
    return R, t, mask


def estimate_seed_pair(
    graph: CameraGraph,
    cluster: Cluster,
    tracks: ClusterTracks,
    cameras: list[Camera],
    config: LocalSfMConfig,
    rng: np.random.Generator,
):
    """Pick the strongest edge whose two-view geometry has enough parallax.

    Candidates are visited by descending edge weight; the first pair whose
    RANSAC-inlier triangulations reach the median-angle threshold wins.
    Returns (pair, poses dict, {track idx: xyz}).
    """
    candidates = sorted(
        ((i, j) for (i, j) in graph.induced_edges(cluster.cameras)),
        key=lambda e: (-graph.weight(*e), e),
    )
    for (i, j) in candidates:
        shared = tracks.shared_tracks(i, j)
        if len(shared) < config.min_seed_correspondences:
            continue
        xy_i = np.array([tracks.obs_of(t, i) for t in shared])
        xy_j = np.array([tracks.obs_of(t, j) for t in shared])
        est = estimate_relative_pose(
            cameras[i].K, cameras[j].K, xy_i, xy_j, config, rng
        )
        if est is None:
            continue
        R, t, mask = est
        if mask.sum() < config.min_seed_correspondences:
            continue
        # gauge: camera i at the origin, unit baseline
        R_i, c_i = np.eye(3), np.zeros(3)
        R_j, c_j = R, -R.T @ t
        poses = {i: (R_i, c_i), j: (R_j, c_j)}
        points, angles = {}, []
        for t_idx, keep in zip(shared, mask):
            if not keep:
                continue
            X = _triangulate_in_poses(
                [poses[i], poses[j]],
                [cameras[i], cameras[j]],
                np.vstack([tracks.obs_of(t_idx, i), tracks.obs_of(t_idx, j)]),
                config,
            )
            if X is None:
                continue
            points[t_idx] = X
            angles.append(np.degrees(angle_between(c_i - X, c_j - X)))
        if len(points) >= 8 and np.median(angles) >= config.seed_median_angle_deg:
            return (i, j), poses, points
    raise SeedFailure("no seed pair with sufficient parallax")


# ---------------------------------------------------------------------------
# Triangulation and resection against a partial reconstruction
# ---------------------------------------------------------------------------

def _triangulate_in_poses(poses, cams, xys, config: LocalSfMConfig):
    """Multi-view linear triangulation with cheirality, reprojection, and
    parallax-angle validation; None on rejection."""
    Ps = [
        cam.K @ np.hstack([R, (-R @ c).reshape(3, 1)])
        for (R, c), cam in zip(poses, cams)
    ]
    try:
        X = triangulate_linear(Ps, xys)
    except NumericalError:
        return None
    max_angle = 0.0
    for a in range(len(poses)):
        R, c = poses[a]
        z = (R @ (X - c))[2]
        if z <= 0:
            return None
        uv = Ps[a] @ np.append(X, 1.0)
        err = np.hypot(uv[0] / uv[2] - xys[a][0], uv[1] / uv[2] - xys[a][1])
        if err > config.max_reprojection_px:
            return None
        for b in range(a + 1, len(poses)):
            max_angle = max(
                max_angle, np.degrees(angle_between(poses[a][1] - X, poses[b][1] - X))
            )
    if max_angle < config.triangulation_min_angle_deg:
        return None
    return X


def triangulate_track_local(poses, cams, xys, config: LocalSfMConfig | None = None):
    """Public triangulation entry: poses is a list of (R, c), cams the
    matching Camera objects, xys the (n, 2) observations."""
    return _triangulate_in_poses(poses, cams, np.asarray(xys, dtype=float), config or LocalSfMConfig())


def register_next_view(
    camera: Camera,
    points3d: np.ndarray,
    pixels: np.ndarray,
    config: LocalSfMConfig,
    rng: np.random.Generator,
):
    """Absolute pose from 2D-3D correspondences: linear 6-point resection
    inside RANSAC, then single-pose refinement on the inliers.

    Returns (R, c, inlier_mask) or None if the view cannot be registered.
    """
    n = len(points3d)
    if n < config.resection_min_visible:
        return None
    K = camera.K
    rays = _pixels_to_rays(K, pixels)

    def fit(idx):
        return resect_linear(points3d[idx], rays[idx])

    def residual(model):
        R, t = model
        return reprojection_residuals_pixels(R, t, K, points3d, pixels)

    model, mask = ransac(
        n,
        6,
        fit,
        residual,
        config.resection_threshold_px,
        rng,
        confidence=config.ransac_confidence,
        max_iterations=1000,
    )
    if model is None:
        return None
    refit = resect_linear(points3d[mask], rays[mask])
    if refit is not None:
        mask_ref = residual(refit) < config.resection_threshold_px
        if mask_ref.sum() >= mask.sum():
            model, mask = refit, mask_ref
    count = int(mask.sum())
    if count < config.resection_min_inliers or count / n < config.resection_min_inlier_ratio:
        return None
    R, t = model
    c = -R.T @ t
    R, c = _refine_single_pose(camera, R, c, points3d[mask], pixels[mask])
    final_err = reprojection_residuals_pixels(R, -R @ c, K, points3d, pixels)
    mask = final_err < config.resection_threshold_px
    count = int(mask.sum())
    if count < config.resection_min_inliers or count / n < config.resection_min_inlier_ratio:
        return None
    return R, c, mask


def _refine_single_pose(camera: Camera, R, c, points3d, pixels):
    problem = ba_core.BAProblem(
        rotations=R[None, :, :].copy(),
        centers=c[None, :].copy(),
        intrinsics=np.array([[camera.focal, camera.cx, camera.cy]]),
        points=points3d.copy(),
        cam_idx=np.zeros(len(points3d), dtype=np.int64),
        pt_idx=np.arange(len(points3d), dtype=np.int64),
        pixels=pixels.copy(),
        free_cams=np.array([True]),
        free_pts=np.zeros(len(points3d), dtype=bool),
    )
    result = ba_core.lm_minimize(problem, max_iterations=30)
    return result.rotations[0], result.centers[0]


# ---------------------------------------------------------------------------
# Local bundle adjustment with gauge fixing and pruning
# ---------------------------------------------------------------------------

class _SfMState:
    """Mutable reconstruction state during the incremental loop."""

    def __init__(self, cluster_id, tracks: ClusterTracks, cameras, config):
        self.cluster_id = cluster_id
        self.tracks = tracks
        self.cameras = cameras
        self.config = config
        self.rotations: dict[int, np.ndarray] = {}
        self.centers: dict[int, np.ndarray] = {}
        self.points: dict[int, np.ndarray] = {}  # track idx -> xyz
        # per active track: list of camera ids currently used as inliers
        self.inlier_cams: dict[int, list[int]] = {}
        self.dead_tracks: set[int] = set()
        self.seed_pair = None

    def registered(self):
        return sorted(self.rotations)

    def pose_of(self, cam):
        return self.rotations[cam], self.centers[cam]

    def reproj_error(self, cam: int, t_idx: int) -> float:
        R, c = self.pose_of(cam)
        K = self.cameras[cam].K
        err = reprojection_residuals_pixels(
            R, -R @ c, K, self.points[t_idx][None, :], self.tracks.obs_of(t_idx, cam)[None, :]
        )
        return float(err[0])

    def add_camera_observations(self, cam: int):
        """Attach the freshly registered camera to existing active points."""
        for t_idx, _slot in self.tracks.cam_slots.get(cam, []):
            if t_idx in self.points:
                if self.reproj_error(cam, t_idx) <= self.config.max_reprojection_px:
                    self.inlier_cams[t_idx].append(cam)

    def try_triangulate(self, t_idx: int) -> bool:
        if t_idx in self.points or t_idx in self.dead_tracks:
            return False
        cams = [int(c) for c in self.tracks.cams[t_idx] if int(c) in self.rotations]
        if len(cams) < 2:
            return False
        poses = [self.pose_of(c) for c in cams]
        cam_objs = [self.cameras[c] for c in cams]
        xys = np.array([self.tracks.obs_of(t_idx, c) for c in cams])
        X = _triangulate_in_poses(poses, cam_objs, xys, self.config)
        if X is None:
            return False
        self.points[t_idx] = X
        self.inlier_cams[t_idx] = list(cams)
        return True

    def bundle_adjust(self, max_iterations=None, relative_tol=None) -> ba_core.BAResult:
        """Local BA over all registered cameras and active points; the seed
        camera is pinned and the seed baseline renormalized to hold the
        gauge. Afterwards observations beyond the reprojection threshold are
        dropped and starved points deactivated."""
        cams = self.registered()
        cam_pos = {c: k for k, c in enumerate(cams)}
        pts = sorted(self.points)
        pt_pos = {t: k for k, t in enumerate(pts)}
        obs_cam, obs_pt, obs_xy = [], [], []
        for t in pts:
            for c in self.inlier_cams[t]:
                obs_cam.append(cam_pos[c])
                obs_pt.append(pt_pos[t])
                obs_xy.append(self.tracks.obs_of(t, c))
        if len(pts) < 4 or len(cams) < 2:
            raise NumericalError("bundle adjustment needs >= 2 cameras and >= 4 points")
        free_cams = np.ones(len(cams), dtype=bool)
        anchor, baseline = self.seed_pair
        free_cams[cam_pos[anchor]] = False

        anchor_pos, base_pos = cam_pos[anchor], cam_pos[baseline]

        def rescale(rotations, centers, points):
            # cost-invariant similarity: unit seed baseline about the anchor
            d = np.linalg.norm(centers[base_pos] - centers[anchor_pos])
            if d < 1e-12:
                return rotations, centers, points
            s = 1.0 / d
            origin = centers[anchor_pos]
            centers = origin + (centers - origin) * s
            points = origin + (points - origin) * s
            return rotations, centers, points

        problem = ba_core.BAProblem(
            rotations=np.array([self.rotations[c] for c in cams]),
            centers=np.array([self.centers[c] for c in cams]),
            intrinsics=np.array([[self.cameras[c].focal, self.cameras[c].cx, self.cameras[c].cy] for c in cams]),
            points=np.array([self.points[t] for t in pts]),
            cam_idx=np.array(obs_cam, dtype=np.int64),
            pt_idx=np.array(obs_pt, dtype=np.int64),
            pixels=np.array(obs_xy),
            free_cams=free_cams,
            free_pts=np.ones(len(pts), dtype=bool),
        )
        result = ba_core.lm_minimize(
            problem,
            max_iterations=max_iterations or self.config.ba_max_iterations,
            relative_tol=relative_tol or ba_core.DEFAULT_RELATIVE_TOL,
            rescale_fn=rescale,
        )
        assert all(
            b <= a + 1e-9 * max(a, 1.0)
            for a, b in zip(result.cost_trace, result.cost_trace[1:])
        ), "LM cost increased across accepted steps"
        for k, c in enumerate(cams):
            self.rotations[c] = result.rotations[k]
            self.centers[c] = result.centers[k]
        for k, t in enumerate(pts):
            self.points[t] = result.points[k]
        # prune observations beyond the threshold, then re-validate points
        o = 0
        for t in pts:
            keep = []
            for c in self.inlier_cams[t]:
                if result.residual_norms[o] <= self.config.max_reprojection_px:
                    keep.append(c)
                o += 1
            self.inlier_cams[t] = keep
        for t in pts:
            if len(self.inlier_cams[t]) < 2:
                del self.points[t]
                del self.inlier_cams[t]
                self.dead_tracks.add(t)
        return result


def run_local_sfm(
    graph: CameraGraph,
    cluster: Cluster,
    tracks: list[Track] | ClusterTracks,
    cameras: list[Camera],
    config: LocalSfMConfig | None = None,
) -> LocalReconstruction:
    """Incremental SfM over one interdependent cluster.

    Deterministic for a fixed config seed: the cluster RNG is derived by
    stable hashing, so worker scheduling cannot change results. A cluster
    whose seed pair cannot be established is returned marked failed.
    """
    config = config or LocalSfMConfig()
    ct = tracks if isinstance(tracks, ClusterTracks) else ClusterTracks(cluster.cameras, tracks)
    rng = seeded_rng(config.seed, "local_sfm", cluster.id)
    rec = LocalReconstruction(cluster_id=cluster.id)
    state = _SfMState(cluster.id, ct, cameras, config)

    try:
        pair, poses, seed_points = estimate_seed_pair(graph, cluster, ct, cameras, config, rng)
    except SeedFailure as exc:
        logger.warning("cluster %d: %s", cluster.id, exc)
        rec.failed = True
        return rec
    state.seed_pair = pair
    for cam, (R, c) in poses.items():
        state.rotations[cam] = R
        state.centers[cam] = c
    for t_idx, X in seed_points.items():
        state.points[t_idx] = X
        state.inlier_cams[t_idx] = [pair[0], pair[1]]
    if len(state.points) >= 4:
        state.bundle_adjust()

    registrations = 0
    unregistered = [c for c in cluster.cameras if c not in state.rotations]
    while unregistered:
        # next-best-view: most visible active points, ties by camera id
        visible = {}
        for cam in unregistered:
            tids = [t for t, _ in ct.cam_slots.get(cam, []) if t in state.points]
            if len(tids) >= config.resection_min_visible:
                visible[cam] = tids
        if not visible:
            break
        order = sorted(visible, key=lambda c: (-len(visible[c]), c))
        registered_one = False
        for cam in order:
            tids = visible[cam]
            pts3d = np.array([state.points[t] for t in tids])
            pix = np.array([ct.obs_of(t, cam) for t in tids])
            result = register_next_view(cameras[cam], pts3d, pix, config, rng)
            if result is None:
                continue
            R, c, mask = result
            state.rotations[cam] = R
            state.centers[cam] = c
            state.add_camera_observations(cam)
            registrations += 1
            registered_one = True
            unregistered.remove(cam)
            # triangulate tracks that just gained their second-plus view
            for t_idx, _slot in ct.cam_slots.get(cam, []):
                state.try_triangulate(t_idx)
            if registrations % config.ba_every == 0 and len(state.points) >= 4:
                state.bundle_adjust(
                    max_iterations=config.intermediate_ba_max_iterations,
                    relative_tol=1e-8,
                )
            break
        if not registered_one:
            break

    if len(state.points) >= 4 and len(state.registered()) >= 2:
        final = state.bundle_adjust()
        rec.mean_reprojection = float(np.mean(final.residual_norms)) if len(final.residual_norms) else float("nan")

    rec.seed_pair = state.seed_pair
    rec.rotations = dict(state.rotations)
    rec.centers = dict(state.centers)
    rec.points = {ct.track_ids[t]: X for t, X in state.points.items()}
    rec.observations = {
        ct.track_ids[t]: [
            (c, float(ct.obs_of(t, c)[0]), float(ct.obs_of(t, c)[1]))
            for c in sorted(state.inlier_cams[t])
        ]
        for t in state.points
    }
    if len(rec.rotations) < 2:
        rec.failed = True
    return rec


def extract_relative_motions(rec: LocalReconstruction, graph: CameraGraph) -> list[RelativeMotion]:
    """Relative motions for every graph edge with both endpoints registered
    in the cluster: R_ij = R_j R_i^T and t_ij = R_j (c_i - c_j), with the
    support count equal to the shared inlier observations."""
    if rec.failed or len(rec.rotations) < 2:
        return []
    cam_points = rec.camera_point_index()
    motions = []
    registered = set(rec.rotations)
    for (i, j) in graph.induced_edges(sorted(registered)):
        R_i, c_i = rec.rotations[i], rec.centers[i]
        R_j, c_j = rec.rotations[j], rec.centers[j]
        support = len(cam_points.get(i, set()) & cam_points.get(j, set()))
        motions.append(
            RelativeMotion(
                i=i,
                j=j,
                cluster_id=rec.cluster_id,
                rotation=R_j @ R_i.T,
                translation=R_j @ (c_i - c_j),
                support=support,
            )
        )
    return motions
