"""sapmap: geo-localised sapling reconstruction and trait monitoring.

Turns per-sapling dense point clouds plus SLAM/GNSS/SfM trajectory exports
into metrically scaled, geo-referenced, longitudinally comparable trait
records: map-to-Earth alignment, scale-resolving SfM registration, Laplacian
contraction skeletonisation, leaf/wood segmentation, trait extraction and a
multi-session registry.
"""

from .core import (GeoFix, GeoTrack, PointCloud, Pose, SimilarityTransform,
                   SkeletonGraph, Trajectory, apply, compose)
from .errors import (AssociationError, ConfigError, DegenerateGeometryError,
                     FrameMismatchError, ParseError, RegistryError,
                     SapmapError, SolverError)
from .georef import (AssociationPairs, EarthTransform, associate,
                     fit_earth_transform, geodetic_to_enu, enu_to_geodetic,
                     to_earth)
from .io import (load_gnss, load_ply, load_trajectory, parse_gnss, parse_ply,
                 parse_trajectory, save_gnss, save_ply, save_trajectory,
                 write_ply)
from .leafwood import (LeafWoodParams, Segmentation, find_terminal_vertices,
                       leaf_wood_ratio, segment_leaf_wood)
from .registration import (RegistrationResult, Subtrajectory,
                           extract_subtrajectory, register_sfm, transform_cloud,
                           umeyama)
from .registry import ChangeReport, Registry, SaplingRecord
from .skeleton import (ContractionParams, TopologyParams, contract,
                       count_bifurcations, extract_skeleton, knn_graph, prune,
                       skeletonize, voxel_downsample)
from .synth import BranchSpec, SaplingSpec, generate, generate_plot
from .traits import (LeafProfile, TraitReport, compute_traits, leaf_profile,
                     stem_height)

__version__ = "0.1.0"

__all__ = [
    "AssociationError", "AssociationPairs", "BranchSpec", "ChangeReport",
    "ConfigError", "ContractionParams", "DegenerateGeometryError",
    "EarthTransform", "FrameMismatchError", "GeoFix", "GeoTrack",
    "LeafProfile", "LeafWoodParams", "ParseError", "PointCloud", "Pose",
    "Registry", "RegistrationResult", "RegistryError", "SaplingRecord",
    "SaplingSpec", "SapmapError", "Segmentation", "SimilarityTransform",
    "SkeletonGraph", "SolverError", "Subtrajectory", "TopologyParams",
    "TraitReport", "Trajectory", "apply", "associate", "compose",
    "compute_traits", "contract", "count_bifurcations", "enu_to_geodetic",
    "extract_skeleton", "extract_subtrajectory", "find_terminal_vertices",
    "fit_earth_transform", "generate", "generate_plot", "geodetic_to_enu",
    "knn_graph", "leaf_profile", "leaf_wood_ratio", "load_gnss", "load_ply",
    "load_trajectory", "parse_gnss", "parse_ply", "parse_trajectory",
    "prune", "register_sfm", "save_gnss", "save_ply", "save_trajectory",
    "segment_leaf_wood", "skeletonize", "stem_height", "to_earth",
    "transform_cloud", "umeyama", "voxel_downsample", "write_ply",
]
