import numpy as np
import pytest

from clustersfm.scene import MatchEdge, build_camera_graph


def weighted_edge(i, j, w):
    """Match edge with w synthetic correspondences (structure-only tests)."""
    f = np.arange(w)
    xy = np.column_stack([np.arange(w, dtype=float), np.zeros(w)])
    return MatchEdge(i=i, j=j, feat_i=f, xy_i=xy, feat_j=f, xy_j=xy)


def geometric_graph(n, radius, seed, weight_hi=100):
    """Random geometric camera graph with integer weights."""
    from scipy.spatial import cKDTree

    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 1, size=(n, 2))
    pairs = sorted(cKDTree(pts).query_pairs(radius))
    edges = [weighted_edge(i, j, int(rng.integers(1, weight_hi))) for i, j in pairs]
    return build_camera_graph(edges, n)


@pytest.fixture(scope="session")
def loop_scene_noisefree():
    from clustersfm.synthetic import generate_synthetic_scene

    scene, matches = generate_synthetic_scene("loop", 12, 200, pixel_sigma=0.0, seed=7)
    return scene, matches


@pytest.fixture(scope="session")
def orbit_scene_small():
    """Noise-free 20-camera orbit used by several local SfM tests."""
    from clustersfm.synthetic import generate_synthetic_scene

    scene, matches = generate_synthetic_scene("orbit", 20, 500, pixel_sigma=0.0, seed=3)
    return scene, matches
