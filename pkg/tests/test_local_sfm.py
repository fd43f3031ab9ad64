import numpy as np
import pytest

from clustersfm.clustering import Cluster, ClusterTree, ClusterTreeNode
from clustersfm.geometry import angle_between, random_rotation, rotation_angle
from clustersfm.local_sfm import (
    ClusterTracks,
    LocalReconstruction,
    LocalSfMConfig,
    RelativeMotion,
    SeedFailure,
    estimate_relative_pose,
    estimate_seed_pair,
    extract_relative_motions,
    register_next_view,
    run_local_sfm,
    triangulate_track_local,
)
from clustersfm.evaluation import align_similarity
from clustersfm.scene import Camera, Pose, build_camera_graph, project_point
from clustersfm.synthetic import generate_synthetic_scene
from clustersfm.tracks import Track, generate_tracks
from clustersfm.utils import seeded_rng

CONFIG = LocalSfMConfig(seed=11)


def make_camera(idx=0):
    return Camera(id=idx, focal=800.0, cx=640.0, cy=480.0, width=1280, height=960)


def test_relative_pose_noise_free_exact():
    rng = np.random.default_rng(0)
    cam = make_camera()
    # moderate rotation, unit baseline
    from clustersfm.geometry import so3_exp

    R_gt = so3_exp(np.array([0.1, -0.2, 0.05]))
    t_gt = np.array([1.0, 0.1, 0.2])
    t_gt /= np.linalg.norm(t_gt)
    X = rng.normal(size=(80, 3)) * 1.5 + np.array([0, 0, 6.0])
    x1 = X[:, :2] / X[:, 2:3] * 800 + np.array([640, 480])
    Xc = X @ R_gt.T + t_gt
    x2 = Xc[:, :2] / Xc[:, 2:3] * 800 + np.array([640, 480])
    result = estimate_relative_pose(cam.K, cam.K, x1, x2, CONFIG, seeded_rng(1))
    assert result is not None
    R, t, mask = result
    assert mask.all()
    assert rotation_angle(R @ R_gt.T) < 1e-6
    assert angle_between(t, t_gt) < 1e-6


def test_relative_pose_forty_percent_outliers():
    # well-conditioned wide-baseline pair; inlier recall >= 95%
    rng = np.random.default_rng(3)
    cam = make_camera()
    from clustersfm.geometry import so3_exp

    R_gt = so3_exp(np.array([0.0, -0.5, 0.1]))
    t_gt = np.array([1.0, 0.0, 0.3])
    t_gt /= np.linalg.norm(t_gt)
    n = 300
    X = rng.normal(size=(n, 3)) * 2.0 + np.array([0, 0, 7.0])
    x1 = X[:, :2] / X[:, 2:3] * 800 + np.array([640, 480])
    Xc = X @ R_gt.T + t_gt
    x2 = Xc[:, :2] / Xc[:, 2:3] * 800 + np.array([640, 480])
    x1 += rng.normal(0, 0.5, x1.shape)
    x2 += rng.normal(0, 0.5, x2.shape)
    n_out = int(0.4 * n)
    out_idx = rng.choice(n, n_out, replace=False)
    x2[out_idx] = rng.uniform([0, 0], [1279, 959], size=(n_out, 2))
    true_inliers = np.ones(n, dtype=bool)
    true_inliers[out_idx] = False
    result = estimate_relative_pose(cam.K, cam.K, x1, x2, CONFIG, seeded_rng(2))
    assert result is not None
    _, _, mask = result
    recall = (mask & true_inliers).sum() / true_inliers.sum()
    assert recall >= 0.95


def _tracks_for_pair(poses, cams, points):
    """Tracks with one observation per camera for the given GT geometry."""
    tracks = []
    for pid, X in enumerate(points):
        xys, cs = [], []
        for c, (pose, cam) in enumerate(zip(poses, cams)):
            try:
                xy = project_point(pose, cam, X)
            except Exception:
                continue
            if 0 <= xy[0] < cam.width and 0 <= xy[1] < cam.height:
                cs.append(c)
                xys.append(xy)
        if len(cs) >= 2:
            tracks.append(
                Track(id=pid, cameras=np.array(cs), features=np.full(len(cs), pid), xy=np.array(xys))
            )
    return tracks


def test_seed_pair_rejects_zero_baseline():
    rng = np.random.default_rng(4)
    cams = [make_camera(0), make_camera(1)]
    pose = Pose(R=np.eye(3), c=np.zeros(3))
    poses = [pose, Pose(R=np.eye(3), c=np.zeros(3))]  # identical poses
    points = rng.normal(size=(60, 3)) * 1.5 + np.array([0, 0, 6.0])
    tracks = _tracks_for_pair(poses, cams, points)
    from conftest import weighted_edge

    graph = build_camera_graph([weighted_edge(0, 1, len(tracks))], 2)
    ct = ClusterTracks((0, 1), tracks)
    with pytest.raises(SeedFailure):
        estimate_seed_pair(graph, Cluster(id=0, cameras=(0, 1)), ct, cams, CONFIG, seeded_rng(0))


def test_register_noise_free_exact():
    rng = np.random.default_rng(5)
    cam = make_camera()
    R_gt = random_rotation(rng)
    c_gt = rng.normal(size=3)
    X = (rng.normal(size=(50, 3)) * 2 + np.array([0, 0, 8.0])) @ R_gt + c_gt
    pix = []
    pose = Pose(R=R_gt, c=c_gt)
    for x in X:
        pix.append(project_point(pose, cam, x))
    result = register_next_view(cam, X, np.array(pix), CONFIG, seeded_rng(1))
    assert result is not None
    R, c, mask = result
    assert mask.all()
    diam = np.linalg.norm(X.max(0) - X.min(0))
    assert rotation_angle(R @ R_gt.T) < 1e-6
    assert np.linalg.norm(c - c_gt) < 1e-6 * diam


def test_register_too_few_points_deferred():
    cam = make_camera()
    result = register_next_view(cam, np.zeros((5, 3)), np.zeros((5, 2)), CONFIG, seeded_rng(0))
    assert result is None


def test_register_thirty_percent_mislabeled():
    rng = np.random.default_rng(6)
    cam = make_camera()
    R_gt = random_rotation(rng)
    c_gt = rng.normal(size=3)
    X = (rng.normal(size=(120, 3)) * 2 + np.array([0, 0, 8.0])) @ R_gt + c_gt
    pose = Pose(R=R_gt, c=c_gt)
    pix = np.array([project_point(pose, cam, x) for x in X])
    bad = rng.choice(len(X), int(0.3 * len(X)), replace=False)
    pix[bad] = rng.uniform([0, 0], [1279, 959], size=(len(bad), 2))
    result = register_next_view(cam, X, pix, CONFIG, seeded_rng(2))
    assert result is not None
    R, c, _ = result
    diam = np.linalg.norm(X.max(0) - X.min(0))
    assert np.degrees(rotation_angle(R @ R_gt.T)) < 0.5
    assert np.linalg.norm(c - c_gt) < 0.01 * diam


def test_triangulate_closed_form():
    cam = Camera(id=0, focal=1.0, cx=0.0, cy=0.0, width=2, height=2)
    poses = [(np.eye(3), np.array([0.5, 0.0, 0.0])), (np.eye(3), np.array([-0.5, 0.0, 0.0]))]
    X = np.array([0.0, 0.0, 2.0])
    xys = []
    for R, c in poses:
        Y = R @ (X - c)
        xys.append(Y[:2] / Y[2])
    rec = triangulate_track_local(poses, [cam, cam], np.array(xys))
    assert rec is not None
    assert np.abs(rec - X).max() < 1e-9


def test_triangulate_rejects_behind_camera():
    cam = Camera(id=0, focal=1.0, cx=0.0, cy=0.0, width=2, height=2)
    # second camera faces away from the point
    flip = np.diag([1.0, -1.0, -1.0])
    poses = [(np.eye(3), np.array([0.5, 0.0, 0.0])), (flip, np.array([-0.5, 0.0, 4.0]))]
    X = np.array([0.0, 0.0, 2.0])
    xys = np.array([[(X - c)[0] / (X - c)[2], (X - c)[1] / (X - c)[2]] for R, c in [poses[0]]] + [[0.0, 0.0]])
    assert triangulate_track_local(poses, [cam, cam], xys) is None


def test_triangulate_five_views_noisy_rms():
    rng = np.random.default_rng(7)
    cam = make_camera()
    centers = np.array([[2 * k - 4.0, 0.3 * k, 0.0] for k in range(5)])
    from clustersfm.synthetic import _look_at

    target = np.array([0.0, 0.0, 10.0])
    poses = [(_look_at(c, target).R, c) for c in centers]
    errors = []
    for _ in range(60):
        X = target + rng.normal(size=3)
        xys = []
        for R, c in poses:
            Y = R @ (X - c)
            xys.append([800 * Y[0] / Y[2] + 640, 800 * Y[1] / Y[2] + 480])
        xys = np.array(xys) + rng.normal(0, 0.5, (5, 2))
        rec = triangulate_track_local(poses, [cam] * 5, xys)
        if rec is None:
            continue
        for (R, c), z in zip(poses, xys):
            Y = R @ (rec - c)
            u = np.array([800 * Y[0] / Y[2] + 640, 800 * Y[1] / Y[2] + 480])
            errors.append(((u - z) ** 2).sum())
    assert errors
    assert np.sqrt(np.mean(errors)) <= 1.5


@pytest.fixture(scope="module")
def orbit_run(orbit_scene_small):
    scene, matches = orbit_scene_small
    graph = build_camera_graph(matches, scene.num_cameras)
    tree = ClusterTree(root=ClusterTreeNode(cameras=tuple(range(scene.num_cameras)), leaf_id=0))
    tracks = generate_tracks(tree, matches)
    cluster = Cluster(id=0, cameras=tuple(range(scene.num_cameras)))
    rec = run_local_sfm(graph, cluster, tracks, scene.cameras, CONFIG)
    return scene, matches, graph, tracks, rec


def test_run_local_sfm_noise_free_all_registered(orbit_run):
    scene, _, graph, _, rec = orbit_run
    assert not rec.failed
    assert len(rec.rotations) == scene.num_cameras
    est = np.array([rec.centers[c] for c in sorted(rec.rotations)])
    gt = np.array([scene.poses[c].c for c in sorted(rec.rotations)])
    s, R, t = align_similarity(est, gt)
    aligned = s * est @ R.T + t
    rmse = np.sqrt(((aligned - gt) ** 2).sum(axis=1).mean())
    assert rmse < 1e-6 * scene.diameter()


def test_run_local_sfm_deterministic(orbit_run):
    scene, matches, graph, tracks, rec = orbit_run
    cluster = Cluster(id=0, cameras=tuple(range(scene.num_cameras)))
    rec2 = run_local_sfm(graph, cluster, tracks, scene.cameras, CONFIG)
    assert sorted(rec.rotations) == sorted(rec2.rotations)
    for c in rec.rotations:
        assert np.array_equal(rec.rotations[c], rec2.rotations[c])
        assert np.array_equal(rec.centers[c], rec2.centers[c])


def test_two_camera_cluster_is_seed_only(orbit_scene_small):
    scene, matches = orbit_scene_small
    graph = build_camera_graph(matches, scene.num_cameras)
    tree = ClusterTree(root=ClusterTreeNode(cameras=(0, 1), leaf_id=0))
    sub = [m for m in matches if (m.i, m.j) == (0, 1)]
    tracks = generate_tracks(tree, sub)
    rec = run_local_sfm(graph, Cluster(id=0, cameras=(0, 1)), tracks, scene.cameras, CONFIG)
    assert sorted(rec.rotations) == [0, 1]
    assert rec.seed_pair == (0, 1)


def test_extract_relative_motions_identity_example():
    rec = LocalReconstruction(cluster_id=0)
    rec.rotations = {0: np.eye(3), 1: np.eye(3)}
    rec.centers = {0: np.zeros(3), 1: np.array([1.0, 0.0, 0.0])}
    rec.points = {0: np.zeros(3)}
    rec.observations = {0: [(0, 0.0, 0.0), (1, 0.0, 0.0)]}
    from conftest import weighted_edge

    graph = build_camera_graph([weighted_edge(0, 1, 5)], 2)
    motions = extract_relative_motions(rec, graph)
    assert len(motions) == 1
    m = motions[0]
    assert np.allclose(m.rotation, np.eye(3))
    assert np.allclose(m.translation, [-1.0, 0.0, 0.0])
    assert m.support == 1


def test_extract_relative_motions_similarity_gauge(orbit_run):
    # R_ij invariant and t scales uniformly under a similarity of the frame
    scene, _, graph, _, rec = orbit_run
    rng = np.random.default_rng(9)
    base = extract_relative_motions(rec, graph)
    s = rng.uniform(0.3, 3.0)
    Q = random_rotation(rng)
    d = rng.normal(size=3)
    moved = LocalReconstruction(cluster_id=0)
    moved.rotations = {c: rec.rotations[c] @ Q.T for c in rec.rotations}
    moved.centers = {c: s * (Q @ rec.centers[c]) + d for c in rec.centers}
    moved.points = rec.points
    moved.observations = rec.observations
    for m0, m1 in zip(base, extract_relative_motions(moved, graph)):
        # arccos cannot resolve equality below ~1.5e-8 rad
        assert rotation_angle(m0.rotation @ m1.rotation.T) < 1e-7
        assert np.abs(m1.translation - s * m0.translation).max() < 1e-6 * s


def test_cross_cluster_consistency_noise_free(orbit_scene_small):
    scene, matches = orbit_scene_small
    graph = build_camera_graph(matches, scene.num_cameras)
    tree = ClusterTree(root=ClusterTreeNode(cameras=tuple(range(scene.num_cameras)), leaf_id=0))
    tracks = generate_tracks(tree, matches)
    cams_a = tuple(range(0, 12))
    cams_b = tuple(range(8, 20))
    rec_a = run_local_sfm(graph, Cluster(id=0, cameras=cams_a), tracks, scene.cameras, CONFIG)
    rec_b = run_local_sfm(graph, Cluster(id=1, cameras=cams_b), tracks, scene.cameras, CONFIG)
    ma = {(m.i, m.j): m for m in extract_relative_motions(rec_a, graph)}
    mb = {(m.i, m.j): m for m in extract_relative_motions(rec_b, graph)}
    shared = sorted(set(ma) & set(mb))
    assert shared
    for pair in shared:
        assert rotation_angle(ma[pair].rotation @ mb[pair].rotation.T) < 1e-6
        assert angle_between(ma[pair].translation, mb[pair].translation) < 1e-6


def test_run_local_sfm_noisy_monte_carlo():
    # 50 cameras, 0.5 px noise, 10% outliers: >= 95% registered, < 1 px mean
    scene, matches = generate_synthetic_scene(
        "orbit", 50, 800, pixel_sigma=0.5, outlier_fraction=0.1, seed=9
    )
    graph = build_camera_graph(matches, 50)
    tree = ClusterTree(root=ClusterTreeNode(cameras=tuple(range(50)), leaf_id=0))
    tracks = generate_tracks(tree, matches)
    rec = run_local_sfm(graph, Cluster(id=0, cameras=tuple(range(50))), tracks, scene.cameras, CONFIG)
    assert len(rec.rotations) >= 48
    assert rec.mean_reprojection < 1.0
