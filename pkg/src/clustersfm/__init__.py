"""Cluster-parallel structure from motion pipeline."""

from .averaging import (
    GlobalMotion,
    RotationEstimate,
    TranslationSystem,
    build_translation_system,
    rotation_averaging,
    solve_translation_l1,
    solve_translation_l2,
)
from .clustering import (
    Cluster,
    ClusterConfig,
    ClusterSet,
    ClusterTree,
    bisect_normalized_cut,
    cluster_cameras,
    completeness_ratio,
    divide,
    expand,
)
from .evaluation import ErrorReport, align_similarity, epipolar_error, pose_error_report
from .global_ba import (
    BAPartition,
    GlobalPoint,
    build_partitions,
    distributed_bundle_adjust,
    triangulate_global,
)
from .local_sfm import (
    LocalReconstruction,
    LocalSfMConfig,
    RelativeMotion,
    extract_relative_motions,
    run_local_sfm,
)
from .pipeline import PipelineConfig, run_pipeline, stage_status
from .scene import Camera, CameraGraph, MatchEdge, Pose, build_camera_graph, project_point
from .synthetic import SyntheticScene, generate_synthetic_scene
from .tracks import Track, UnionFind, generate_tracks, generate_tracks_leaf, merge_tracks

__version__ = "0.1.0"
