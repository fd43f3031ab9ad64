"""Synthetic ground-truth scenes standing in for real capture sessions.

Camera layouts are deterministic functions of the layout name and camera
count; point placement, pixel noise, and outlier injection all come from the
seed, so two seeds share the exact same camera geometry.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .scene import Camera, MatchEdge, Pose, project_points

LAYOUTS = ("grid", "orbit", "loop", "cityBlocks")

DEFAULT_FOCAL = 800.0
DEFAULT_WIDTH = 1280
DEFAULT_HEIGHT = 960


@dataclass
class SyntheticScene:
    """Ground-truth oracle for a generated scene.

    feature_points[c][f] is the 3D point id behind feature f of camera c;
    feature_xy[c][f] is its (noisy) pixel observation. Outlier features
    injected into the match list use indices >= len(feature_points[c]).
    """

    cameras: list[Camera]
    poses: list[Pose]
    points: np.ndarray  # (P, 3) world units
    visibility: list[np.ndarray]  # per point: sorted camera ids
    feature_points: list[np.ndarray]  # per camera: point id per feature
    feature_xy: list[np.ndarray]  # per camera: (F, 2) noisy pixels
    pixel_sigma: float
    outlier_fraction: float
    seed: int

    @property
    def num_cameras(self) -> int:
        return len(self.cameras)

    def centers(self) -> np.ndarray:
        return np.array([p.c for p in self.poses])

    def diameter(self) -> float:
        """Max pairwise distance between camera centers."""
        c = self.centers()
        d = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)
        return float(d.max())

    def true_correspondence_mask(self, edge: MatchEdge) -> np.ndarray:
        """True for correspondences that link real observations of one point."""
        real_i = len(self.feature_points[edge.i])
        real_j = len(self.feature_points[edge.j])
        ok = (edge.feat_i < real_i) & (edge.feat_j < real_j)
        out = np.zeros(edge.weight, dtype=bool)
        idx = np.flatnonzero(ok)
        if len(idx):
            pi = self.feature_points[edge.i][edge.feat_i[idx]]
            pj = self.feature_points[edge.j][edge.feat_j[idx]]
            out[idx] = pi == pj
        return out


def _look_at(center: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    z = np.asarray(target, dtype=float) - center
    z = z / np.linalg.norm(z)
    up = np.asarray(up, dtype=float)
    x = np.cross(z, up)
    nx = np.linalg.norm(x)
    if nx < 1e-9:  # looking along the up axis
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(z, x)
    return Pose(R=np.vstack([x, y, z]), c=np.asarray(center, dtype=float))


def _layout_orbit(n: int) -> tuple[list[Pose], dict]:
    theta = 2.0 * np.pi * np.arange(n) / n
    radius = 10.0
    centers = np.stack(
        [radius * np.cos(theta), radius * np.sin(theta), 1.5 * np.sin(3.0 * theta)], axis=1
    )
    poses = [_look_at(c, np.zeros(3)) for c in centers]
    region = {"kind": "ball", "center": np.zeros(3), "radius": 3.0}
    return poses, region


def _layout_loop(n: int) -> tuple[list[Pose], dict]:
    theta = 2.0 * np.pi * np.arange(n) / n
    radius = 10.0
    centers = np.stack(
        [radius * np.cos(theta), radius * np.sin(theta), 0.5 * np.sin(2.0 * theta)], axis=1
    )
    outward = np.stack([np.cos(theta), np.sin(theta), np.zeros(n)], axis=1)
    poses = [_look_at(c, c + 5.0 * d) for c, d in zip(centers, outward)]
    region = {"kind": "cylinder", "r_min": 16.0, "r_max": 22.0, "z_min": -4.0, "z_max": 5.0}
    return poses, region


def _layout_grid(n: int) -> tuple[list[Pose], dict]:
    if n < 4:
        raise ConfigurationError("grid layout needs at least 4 cameras")
    cols = int(np.ceil(np.sqrt(n)))
    spacing = 2.0
    centers = []
    for k in range(n):
        r, c = divmod(k, cols)
        centers.append([spacing * c, spacing * r, 8.0 + 0.3 * ((r + c) % 3)])
    centers = np.array(centers)
    poses = [_look_at(c, c + np.array([0.0, 0.0, -5.0]), up=(0.0, 1.0, 0.0)) for c in centers]
    lo = centers[:, :2].min(axis=0) - 3.0
    hi = centers[:, :2].max(axis=0) + 3.0
    region = {"kind": "slab", "lo": lo, "hi": hi, "z_min": 0.0, "z_max": 1.5}
    return poses, region


def _layout_city_blocks(n: int) -> tuple[list[Pose], dict]:
    if n < 4:
        raise ConfigurationError("cityBlocks layout needs at least 4 cameras")
    blocks_per_side = max(2, int(round(np.sqrt(n / 12.0))))
    pitch = 10.0
    # Serpentine walk along the horizontal streets; cameras look sideways
    # at the nearest row of buildings, alternating sides.
    street_ys = [pitch * k for k in range(blocks_per_side + 1)]
    span = pitch * blocks_per_side
    total = span * len(street_ys)
    step = total / n
    centers, targets = [], []
    for k in range(n):
        s = k * step
        row = min(int(s // span), len(street_ys) - 1)
        along = s - row * span
        if row % 2 == 1:
            along = span - along
        x, y = along, street_ys[row]
        side = 1.0 if k % 2 == 0 else -1.0
        if row == 0:
            side = 1.0
        elif row == len(street_ys) - 1:
            side = -1.0
        centers.append([x, y, 2.0])
        targets.append([x, y + side * 5.0, 1.5])
    poses = [_look_at(np.array(c), np.array(t)) for c, t in zip(centers, targets)]
    region = {"kind": "blocks", "blocks_per_side": blocks_per_side, "pitch": pitch}
    return poses, region


def _sample_region(region: dict, count: int, rng: np.random.Generator) -> np.ndarray:
    kind = region["kind"]
    if kind == "ball":
        pts = rng.normal(size=(count, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        r = region["radius"] * rng.uniform(0.0, 1.0, size=count) ** (1.0 / 3.0)
        return region["center"] + pts * r[:, None]
    if kind == "cylinder":
        phi = rng.uniform(0.0, 2.0 * np.pi, size=count)
        rho = rng.uniform(region["r_min"], region["r_max"], size=count)
        z = rng.uniform(region["z_min"], region["z_max"], size=count)
        return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    if kind == "slab":
        xy = rng.uniform(region["lo"], region["hi"], size=(count, 2))
        z = rng.uniform(region["z_min"], region["z_max"], size=count)
        return np.column_stack([xy, z])
    if kind == "blocks":
        b, pitch = region["blocks_per_side"], region["pitch"]
        block = rng.integers(0, b * b, size=count)
        bx, by = block % b, block // b
        local = rng.uniform(2.0, 8.0, size=(count, 2))
        z = rng.uniform(0.0, 6.0, size=count)
        return np.column_stack([bx * pitch + local[:, 0], by * pitch + local[:, 1], z])
    raise ConfigurationError(f"unknown point region kind {kind!r}")


def _layout_poses(layout: str, num_cameras: int) -> tuple[list[Pose], dict]:
    if layout == "orbit":
        return _layout_orbit(num_cameras)
    if layout == "loop":
        return _layout_loop(num_cameras)
    if layout == "grid":
        return _layout_grid(num_cameras)
    if layout == "cityBlocks":
        return _layout_city_blocks(num_cameras)
    raise ConfigurationError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")


def generate_synthetic_scene(
    layout: str,
    num_cameras: int,
    num_points: int,
    pixel_sigma: float = 0.0,
    outlier_fraction: float = 0.0,
    seed: int = 0,
    focal: float = DEFAULT_FOCAL,
    width: int = DEFAULT_WIDTH,
    height: int = DEFAULT_HEIGHT,
) -> tuple[SyntheticScene, list[MatchEdge]]:
    """Generate a ground-truth scene plus its pairwise match edges.

    Matches are projections of shared 3D points with isotropic Gaussian
    pixel noise; outlier_fraction of each edge's correspondences are
    replaced by fresh uniform-random image points (new feature indices on
    both sides, so real feature tracks stay uncorrupted).
    """
    if num_cameras < 2:
        raise ConfigurationError("need at least 2 cameras")
    if num_points < 1:
        raise ConfigurationError("need at least 1 point")
    if pixel_sigma < 0:
        raise ConfigurationError("pixelSigma must be >= 0")
    if not (0.0 <= outlier_fraction < 1.0):
        raise ConfigurationError("outlierFraction must be in [0, 1)")

    poses, region = _layout_poses(layout, num_cameras)
    cameras = [
        Camera(id=i, focal=focal, cx=width / 2.0, cy=height / 2.0, width=width, height=height)
        for i in range(num_cameras)
    ]
    rng = np.random.default_rng(seed)

    # Rejection-sample points until num_points land in >= 2 views.
    points_list, vis_list, exact_uv = [], [], []
    for _ in range(40):
        need = num_points - len(points_list)
        if need <= 0:
            break
        cand = _sample_region(region, max(need * 2, 64), rng)
        uv_all = np.empty((num_cameras, len(cand), 2))
        vis_all = np.empty((num_cameras, len(cand)), dtype=bool)
        for ci, (pose, cam) in enumerate(zip(poses, cameras)):
            uv, depth = project_points(pose, cam, cand)
            ok = depth > 0.1
            ok &= np.where(np.isnan(uv).any(axis=1), False, True)
            inb = np.zeros(len(cand), dtype=bool)
            inb[ok] = cam.contains(uv[ok])
            uv_all[ci] = uv
            vis_all[ci] = ok & inb
        good = vis_all.sum(axis=0) >= 2
        for idx in np.flatnonzero(good):
            if len(points_list) >= num_points:
                break
            points_list.append(cand[idx])
            vis_list.append(np.flatnonzero(vis_all[:, idx]))
            exact_uv.append({int(ci): uv_all[ci, idx].copy() for ci in vis_list[-1]})
    if len(points_list) < num_points:
        raise ConfigurationError(
            f"layout {layout!r} with {num_cameras} cameras cannot host {num_points} points"
        )
    points = np.array(points_list)

    # Per-camera feature tables; noise drawn in (camera, point-id) order.
    cam_point_ids: list[list[int]] = [[] for _ in range(num_cameras)]
    for pid, vis in enumerate(vis_list):
        for ci in vis:
            cam_point_ids[ci].append(pid)
    feature_points, feature_xy, feat_index = [], [], []
    for ci in range(num_cameras):
        pids = np.array(sorted(cam_point_ids[ci]), dtype=np.int64)
        xy = np.array([exact_uv[p][ci] for p in pids]).reshape(-1, 2)
        if pixel_sigma > 0 and len(xy):
            xy = xy + rng.normal(0.0, pixel_sigma, size=xy.shape)
        feature_points.append(pids)
        feature_xy.append(xy)
        feat_index.append({int(p): f for f, p in enumerate(pids)})

    # Shared-point matches per camera pair, then per-edge outlier injection.
    pair_points: dict[tuple[int, int], list[int]] = {}
    for pid, vis in enumerate(vis_list):
        for a in range(len(vis)):
            for b in range(a + 1, len(vis)):
                pair_points.setdefault((int(vis[a]), int(vis[b])), []).append(pid)
    next_extra = [len(fp) for fp in feature_points]
    matches = []
    for (i, j) in sorted(pair_points):
        pids = pair_points[(i, j)]
        fi = np.array([feat_index[i][p] for p in pids], dtype=np.int64)
        fj = np.array([feat_index[j][p] for p in pids], dtype=np.int64)
        xi = feature_xy[i][fi]
        xj = feature_xy[j][fj]
        n = len(pids)
        n_out = int(round(outlier_fraction * n))
        if n_out > 0:
            drop = rng.choice(n, size=n_out, replace=False)
            keep = np.setdiff1d(np.arange(n), drop)
            fi, fj, xi, xj = fi[keep], fj[keep], xi[keep], xj[keep]
            fi = np.concatenate([fi, next_extra[i] + np.arange(n_out)])
            fj = np.concatenate([fj, next_extra[j] + np.arange(n_out)])
            next_extra[i] += n_out
            next_extra[j] += n_out
            xi = np.vstack([xi, rng.uniform([0, 0], [width - 1, height - 1], size=(n_out, 2))])
            xj = np.vstack([xj, rng.uniform([0, 0], [width - 1, height - 1], size=(n_out, 2))])
        matches.append(MatchEdge(i=i, j=j, feat_i=fi, xy_i=xi, feat_j=fj, xy_j=xj))

    scene = SyntheticScene(
        cameras=cameras,
        poses=poses,
        points=points,
        visibility=vis_list,
        feature_points=feature_points,
        feature_xy=feature_xy,
        pixel_sigma=pixel_sigma,
        outlier_fraction=outlier_fraction,
        seed=seed,
    )
    return scene, matches
