"""Global point triangulation and cluster-partitioned bundle adjustment.

The independent (disjoint) clusters define the sub-problems: each partition
refines its own cameras and the points it owns, with points whose
observations span partitions held fixed at the shared consensus value.
Between rounds, boundary points are re-estimated from all current cameras
with a guard that never lets the global cost increase.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import ba_core
from .clustering import ClusterSet
from .errors import DataError, NumericalError
from .geometry import triangulate_linear
from .scene import Camera
from .tracks import Track
from .utils import parallel_map

logger = logging.getLogger(__name__)

MIN_GLOBAL_VIEWS = 3
MAX_GLOBAL_REPROJECTION_PX = 4.0
DEFAULT_ROUNDS = 10
ROUND_RMS_TOL = 1e-6


@dataclass
class GlobalPoint:
    track_id: int
    position: np.ndarray | None
    cluster_id: int  # owning independent cluster
    cameras: np.ndarray  # observing cameras (posed ones)
    xy: np.ndarray  # (n, 2)
    status: str  # "active" | "too_few_views" | "cheirality" | "reprojection"

    @property
    def active(self) -> bool:
        return self.status == "active"


@dataclass
class BAPartition:
    cluster_id: int
    cameras: tuple
    owned_points: list  # indices into the active point list
    interior_points: list  # owned points seen only by this partition
    obs_indices: np.ndarray  # indices into the global observation arrays


@dataclass
class RoundLog:
    round: int
    cost: float
    rms_px: float


def _projection_setup(motion, cameras):
    cams = sorted(motion.centers)
    rot = np.array([motion.rotations[c] for c in cams])
    cen = np.array([motion.centers[c] for c in cams])
    intr = np.array([[cameras[c].focal, cameras[c].cx, cameras[c].cy] for c in cams])
    return cams, rot, cen, intr


def triangulate_global(
    tracks: list[Track],
    motion,
    cluster_set: ClusterSet,
    cameras: list[Camera],
    min_views: int = MIN_GLOBAL_VIEWS,
    max_reprojection_px: float = MAX_GLOBAL_REPROJECTION_PX,
) -> list[GlobalPoint]:
    """Triangulate every track against the averaged global poses.

    Tracks failing the view-count, cheirality, or reprojection gates are
    kept with a reason code, never silently dropped. Each accepted point is
    owned by the independent cluster holding the plurality of its
    observations (ties to the lowest cluster id).
    """
    posed = set(motion.centers)
    owner_of_camera = cluster_set.independent_cluster_of()
    out = []
    for t in tracks:
        sel = [k for k, c in enumerate(t.cameras) if int(c) in posed]
        cams = np.array([int(t.cameras[k]) for k in sel])
        xy = t.xy[sel] if sel else np.zeros((0, 2))
        owners = [owner_of_camera.get(int(c), -1) for c in cams]
        cluster_id = -1
        valid_owners = [o for o in owners if o >= 0]
        if valid_owners:
            counts = {}
            for o in valid_owners:
                counts[o] = counts.get(o, 0) + 1
            best = max(counts.values())
            cluster_id = min(o for o, n in counts.items() if n == best)
        if len(sel) < min_views:
            out.append(GlobalPoint(t.id, None, cluster_id, cams, xy, "too_few_views"))
            continue
        Ps = [
            cameras[c].K @ np.hstack(
                [motion.rotations[c], (-motion.rotations[c] @ motion.centers[c]).reshape(3, 1)]
            )
            for c in cams
        ]
        try:
            X = triangulate_linear(Ps, xy)
        except NumericalError:
            out.append(GlobalPoint(t.id, None, cluster_id, cams, xy, "cheirality"))
            continue
        status = "active"
        for k, c in enumerate(cams):
            z = (motion.rotations[c] @ (X - motion.centers[c]))[2]
            if z <= 0:
                status = "cheirality"
                break
            uvw = Ps[k] @ np.append(X, 1.0)
            err = np.hypot(uvw[0] / uvw[2] - xy[k, 0], uvw[1] / uvw[2] - xy[k, 1])
            if err > max_reprojection_px:
                status = "reprojection"
                break
        out.append(GlobalPoint(t.id, X if status == "active" else None, cluster_id, cams, xy, status))
    n_active = sum(p.active for p in out)
    logger.info("triangulated %d/%d tracks", n_active, len(out))
    return out


def build_partitions(points: list[GlobalPoint], cluster_set: ClusterSet, motion) -> list[BAPartition]:
    """Assemble disjoint per-independent-cluster sub-problems.

    Every observation lands in exactly one partition (its camera's
    cluster); a point is interior when all its observations stay inside its
    owner.
    """
    posed = set(motion.centers)
    owner_of_camera = cluster_set.independent_cluster_of()
    active = [p for p in points if p.active]
    obs_cam, obs_pt = [], []
    for pi, p in enumerate(active):
        for c in p.cameras:
            obs_cam.append(int(c))
            obs_pt.append(pi)
    obs_cam = np.array(obs_cam, dtype=np.int64)
    obs_pt = np.array(obs_pt, dtype=np.int64)

    cluster_ids = sorted({cl.id for cl in cluster_set.independent})
    partitions = []
    seen_cameras: set = set()
    for cid in cluster_ids:
        cams = tuple(sorted(c for c in cluster_set.independent[cid].cameras if c in posed))
        if not cams:
            continue
        overlap = seen_cameras.intersection(cams)
        if overlap:
            raise DataError(f"independent clusters share cameras {sorted(overlap)}")
        seen_cameras.update(cams)
        cam_set = set(cams)
        owned = [pi for pi, p in enumerate(active) if p.cluster_id == cid]
        interior = [
            pi for pi in owned if all(int(c) in cam_set for c in active[pi].cameras)
        ]
        obs_idx = np.flatnonzero(np.isin(obs_cam, list(cam_set)))
        partitions.append(
            BAPartition(
                cluster_id=cid,
                cameras=cams,
                owned_points=owned,
                interior_points=interior,
                obs_indices=obs_idx,
            )
        )
    return partitions


def distributed_bundle_adjust(
    partitions: list[BAPartition],
    motion,
    points: list[GlobalPoint],
    cameras: list[Camera],
    rounds: int = DEFAULT_ROUNDS,
    inner_max_iterations: int = 50,
    rms_tol: float = ROUND_RMS_TOL,
    workers: int | None = None,
):
    """Block-coordinate consensus bundle adjustment over the partitions.

    Each round runs the partition solves in parallel (their sub-problems
    share no mutable state), then re-triangulates boundary points from all
    partitions' cameras with a per-point no-worsening guard, so the global
    reprojection cost never increases between rounds. Returns
    (motion, points, round_log).
    """
    active = [p for p in points if p.active]
    cam_ids = sorted(motion.centers)
    cam_pos = {c: k for k, c in enumerate(cam_ids)}
    rotations = np.array([motion.rotations[c] for c in cam_ids])
    centers = np.array([motion.centers[c] for c in cam_ids])
    intrinsics = np.array([[cameras[c].focal, cameras[c].cx, cameras[c].cy] for c in cam_ids])
    positions = np.array([p.position for p in active]) if active else np.zeros((0, 3))

    obs_cam, obs_pt, obs_xy = [], [], []
    for pi, p in enumerate(active):
        for k, c in enumerate(p.cameras):
            if int(c) in cam_pos:
                obs_cam.append(cam_pos[int(c)])
                obs_pt.append(pi)
                obs_xy.append(p.xy[k])
    obs_cam = np.array(obs_cam, dtype=np.int64)
    obs_pt = np.array(obs_pt, dtype=np.int64)
    obs_xy = np.array(obs_xy).reshape(-1, 2)

    def global_cost():
        problem = ba_core.BAProblem(
            rotations=rotations,
            centers=centers,
            intrinsics=intrinsics,
            points=positions,
            cam_idx=obs_cam,
            pt_idx=obs_pt,
            pixels=obs_xy,
            free_cams=np.zeros(len(cam_ids), dtype=bool),
            free_pts=np.zeros(len(active), dtype=bool),
        )
        r = ba_core.residuals(problem)
        finite = np.isfinite(r).all(axis=1)
        cost = float(np.sum(r[finite] ** 2))
        rms = float(np.sqrt(cost / max(len(r), 1)))
        return cost, rms

    log: list[RoundLog] = []
    cost, rms = global_cost()
    log.append(RoundLog(round=0, cost=cost, rms_px=rms))
    prev_rms = rms

    for rnd in range(1, rounds + 1):
        state = (rotations.copy(), centers.copy(), positions.copy())

        def solve_partition(part: BAPartition):
            rot_s, cen_s, pos_s = state
            sub_obs = part.obs_indices
            free_cams = np.zeros(len(cam_ids), dtype=bool)
            free_cams[[cam_pos[c] for c in part.cameras]] = True
            free_pts = np.zeros(len(active), dtype=bool)
            free_pts[part.interior_points] = True
            problem = ba_core.BAProblem(
                rotations=rot_s,
                centers=cen_s,
                intrinsics=intrinsics,
                points=pos_s,
                cam_idx=obs_cam[sub_obs],
                pt_idx=obs_pt[sub_obs],
                pixels=obs_xy[sub_obs],
                free_cams=free_cams,
                free_pts=free_pts,
            )
            result = ba_core.lm_minimize(problem, max_iterations=inner_max_iterations)
            return part, result

        results = parallel_map(solve_partition, partitions, workers=workers)
        for part, result in results:
            if result.cost > result.initial_cost + 1e-12:
                logger.warning(
                    "partition %d diverged (cost %.3e -> %.3e); rolled back",
                    part.cluster_id,
                    result.initial_cost,
                    result.cost,
                )
                continue
            sel = [cam_pos[c] for c in part.cameras]
            rotations[sel] = result.rotations[sel]
            centers[sel] = result.centers[sel]
            if part.interior_points:
                positions[part.interior_points] = result.points[part.interior_points]

        # consensus: re-triangulate boundary points, guarded per point
        boundary = sorted(
            set(range(len(active)))
            - {pi for part in partitions for pi in part.interior_points}
        )
        for pi in boundary:
            p = active[pi]
            sel = [cam_pos[int(c)] for c in p.cameras if int(c) in cam_pos]
            if len(sel) < 2:
                continue
            Ps = [
                intrinsics_to_P(intrinsics[s], rotations[s], centers[s]) for s in sel
            ]
            xy = p.xy[[k for k, c in enumerate(p.cameras) if int(c) in cam_pos]]
            try:
                X_new = triangulate_linear(Ps, xy)
            except NumericalError:
                continue
            if _point_cost(Ps, xy, X_new) <= _point_cost(Ps, xy, positions[pi]):
                positions[pi] = X_new

        cost_new, rms_new = global_cost()
        if cost_new > cost + 1e-9 * max(cost, 1.0):
            raise NumericalError(
                f"global cost increased in round {rnd}: {cost:.6e} -> {cost_new:.6e}"
            )
        cost, rms = cost_new, rms_new
        log.append(RoundLog(round=rnd, cost=cost, rms_px=rms))
        if prev_rms - rms < rms_tol:
            break
        prev_rms = rms

    out_motion = type(motion)(
        rotations={c: rotations[cam_pos[c]] for c in cam_ids},
        centers={c: centers[cam_pos[c]] for c in cam_ids},
        scales=dict(getattr(motion, "scales", {})),
        residual_norms=np.zeros(0),
        objective=cost,
    )
    out_points = []
    idx = 0
    for p in points:
        if p.active:
            out_points.append(
                GlobalPoint(p.track_id, positions[idx].copy(), p.cluster_id, p.cameras, p.xy, "active")
            )
            idx += 1
        else:
            out_points.append(p)
    return out_motion, out_points, log


def intrinsics_to_P(intr, R, c):
    K = np.array([[intr[0], 0.0, intr[1]], [0.0, intr[0], intr[2]], [0.0, 0.0, 1.0]])
    return K @ np.hstack([R, (-R @ c).reshape(3, 1)])


def _point_cost(Ps, xy, X):
    total = 0.0
    Xh = np.append(X, 1.0)
    for P, z in zip(Ps, xy):
        uvw = P @ Xh
        if uvw[2] <= 1e-12:
            return np.inf
        total += (uvw[0] / uvw[2] - z[0]) ** 2 + (uvw[1] / uvw[2] - z[1]) ** 2
    return total
