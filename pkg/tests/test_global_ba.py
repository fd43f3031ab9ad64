import numpy as np
import pytest

from clustersfm import ba_core
from clustersfm.averaging import GlobalMotion
from clustersfm.clustering import ClusterConfig, cluster_cameras
from clustersfm.global_ba import (
    BAPartition,
    build_partitions,
    distributed_bundle_adjust,
    triangulate_global,
)
from clustersfm.scene import build_camera_graph, project_point
from clustersfm.synthetic import generate_synthetic_scene
from clustersfm.tracks import Track
from clustersfm.geometry import so3_exp


def gt_motion(scene):
    return GlobalMotion(
        rotations={c: scene.poses[c].R.copy() for c in range(scene.num_cameras)},
        centers={c: scene.poses[c].c.copy() for c in range(scene.num_cameras)},
        scales={0: 1.0},
        residual_norms=np.zeros(0),
        objective=0.0,
    )


def tracks_from_scene(scene, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    tracks = []
    for pid, vis in enumerate(scene.visibility):
        cams = np.array(sorted(int(c) for c in vis))
        xy = []
        for c in cams:
            f = int(np.flatnonzero(scene.feature_points[c] == pid)[0])
            xy.append(scene.feature_xy[c][f])
        xy = np.array(xy)
        if noise:
            xy = xy + rng.normal(0, noise, xy.shape)
        tracks.append(Track(id=pid, cameras=cams, features=np.arange(len(cams)), xy=xy))
    return tracks


@pytest.fixture(scope="module")
def loop24():
    scene, matches = generate_synthetic_scene("loop", 24, 400, pixel_sigma=0.0, seed=5)
    graph = build_camera_graph(matches, 24)
    cs = cluster_cameras(graph, ClusterConfig(max_cluster_size=9, completeness_ratio=0.0, seed=1))
    return scene, matches, graph, cs


def test_triangulate_global_noise_free(loop24):
    scene, matches, graph, cs = loop24
    points = triangulate_global(tracks_from_scene(scene), gt_motion(scene), cs, scene.cameras)
    active = [p for p in points if p.active]
    # noise-free: every track with >= 3 views triangulates exactly
    expected = sum(1 for v in scene.visibility if len(v) >= 3)
    assert len(active) == expected
    for p in active:
        assert np.abs(p.position - scene.points[p.track_id]).max() < 1e-9


def test_triangulate_global_too_few_views(loop24):
    scene, matches, graph, cs = loop24
    t = Track(id=0, cameras=np.array([0, 1]), features=np.array([0, 1]), xy=np.zeros((2, 2)))
    points = triangulate_global([t], gt_motion(scene), cs, scene.cameras)
    assert points[0].status == "too_few_views"
    assert not points[0].active


def test_triangulate_global_noisy_rms():
    scene, matches = generate_synthetic_scene("orbit", 10, 250, pixel_sigma=0.0, seed=6)
    graph = build_camera_graph(matches, 10)
    cs = cluster_cameras(graph, ClusterConfig(max_cluster_size=5, completeness_ratio=0.0, seed=1))
    tracks = [t for t in tracks_from_scene(scene, noise=0.5, seed=3) if len(t) >= 6]
    assert tracks
    points = triangulate_global(tracks, gt_motion(scene), cs, scene.cameras)
    sq = []
    for p in points:
        if not p.active:
            continue
        for c, xy in zip(p.cameras, p.xy):
            proj = project_point(scene.poses[int(c)], scene.cameras[int(c)], p.position)
            sq.append(((proj - xy) ** 2).sum())
    assert sq
    assert np.sqrt(np.mean(sq)) <= 1.5


def test_partition_structure(loop24):
    scene, matches, graph, cs = loop24
    points = triangulate_global(tracks_from_scene(scene), gt_motion(scene), cs, scene.cameras)
    partitions = build_partitions(points, cs, gt_motion(scene))
    seen = set()
    for part in partitions:
        assert not seen.intersection(part.cameras)
        seen.update(part.cameras)
    # ownership: each active point owned by exactly one partition
    owned = sorted(pi for part in partitions for pi in part.owned_points)
    assert owned == sorted(set(owned))
    assert len(owned) == sum(p.active for p in points)
    # every observation appears in exactly one sub-problem
    total_obs = sum(len(part.obs_indices) for part in partitions)
    assert total_obs == sum(len(p.cameras) for p in points if p.active)


def test_ground_truth_noise_free_terminates_immediately(loop24):
    scene, matches, graph, cs = loop24
    points = triangulate_global(tracks_from_scene(scene), gt_motion(scene), cs, scene.cameras)
    partitions = build_partitions(points, cs, gt_motion(scene))
    assert len(partitions) >= 3
    motion, out_points, log = distributed_bundle_adjust(
        partitions, gt_motion(scene), points, scene.cameras, rounds=5
    )
    assert log[0].cost < 1e-12
    assert len(log) <= 2  # terminates after the first round


def test_global_cost_non_increasing(loop24):
    scene, matches, graph, cs = loop24
    rng = np.random.default_rng(4)
    motion = gt_motion(scene)
    for c in list(motion.centers)[1:]:
        motion.rotations[c] = so3_exp(rng.normal(size=3) * 0.002) @ motion.rotations[c]
        motion.centers[c] = motion.centers[c] + rng.normal(size=3) * 0.02
    points = triangulate_global(tracks_from_scene(scene), motion, cs, scene.cameras)
    partitions = build_partitions(points, cs, motion)
    final, out_points, log = distributed_bundle_adjust(
        partitions, motion, points, scene.cameras, rounds=6
    )
    costs = [entry.cost for entry in log]
    assert all(b <= a + 1e-9 * max(a, 1.0) for a, b in zip(costs, costs[1:]))
    assert costs[-1] < costs[0]


def test_single_partition_matches_monolithic():
    scene, matches = generate_synthetic_scene("orbit", 8, 150, pixel_sigma=0.4, seed=9)
    graph = build_camera_graph(matches, 8)
    cs = cluster_cameras(graph, ClusterConfig(max_cluster_size=100, completeness_ratio=0.0, seed=1))
    assert len(cs.independent) == 1
    rng = np.random.default_rng(2)
    motion = gt_motion(scene)
    for c in list(motion.centers)[1:]:
        motion.centers[c] = motion.centers[c] + rng.normal(size=3) * 0.01
    tracks = tracks_from_scene(scene, noise=0.4, seed=1)
    points = triangulate_global(tracks, motion, cs, scene.cameras)
    partitions = build_partitions(points, cs, motion)
    assert len(partitions) == 1
    final, _, log = distributed_bundle_adjust(
        partitions, motion, points, scene.cameras, rounds=3, inner_max_iterations=80
    )

    # monolithic oracle: one LM over the identical problem
    active = [p for p in points if p.active]
    cam_ids = sorted(motion.centers)
    cam_pos = {c: k for k, c in enumerate(cam_ids)}
    obs_cam, obs_pt, obs_xy = [], [], []
    for pi, p in enumerate(active):
        for k, c in enumerate(p.cameras):
            obs_cam.append(cam_pos[int(c)])
            obs_pt.append(pi)
            obs_xy.append(p.xy[k])
    problem = ba_core.BAProblem(
        rotations=np.array([motion.rotations[c] for c in cam_ids]),
        centers=np.array([motion.centers[c] for c in cam_ids]),
        intrinsics=np.array([[scene.cameras[c].focal, scene.cameras[c].cx, scene.cameras[c].cy] for c in cam_ids]),
        points=np.array([p.position for p in active]),
        cam_idx=np.array(obs_cam),
        pt_idx=np.array(obs_pt),
        pixels=np.array(obs_xy),
        free_cams=np.ones(len(cam_ids), dtype=bool),
        free_pts=np.ones(len(active), dtype=bool),
    )
    reference = ba_core.lm_minimize(problem, max_iterations=240)
    assert abs(log[-1].cost - reference.cost) <= 1e-10 * max(reference.cost, 1e-12)
