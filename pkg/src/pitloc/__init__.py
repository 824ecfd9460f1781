"""Retrieval-based localization toolkit.

BEV voxelization of lidar sweeps, global descriptors (embedding network and
VLAD), metric learning with triplet and lazy quadruplet losses, exact
GPS-restricted retrieval, a synthetic multi-trip world simulator, the
evaluation protocol and metadata analysis.
"""

from .core import Descriptor, GpsFix, PointCloud, Pose, geo_distance
from .bev import BEVGrid, GridSpec, grid_preset, remove_ground, voxel_downsample, voxelize
from .descriptor import EmbeddingModel, Vocabulary, bev_feature_vector, embed, kmeans_fit, vlad_pool
from .index import Database, NoCandidatesError, build_database, query_gps, query_knn
from .learn import MiningRules, TrainConfig, lazy_quadruplet_loss, mine_triplets, train, triplet_loss
from .evaluate import RetrievalMethod, make_split, run_benchmark, within_distance_curve
from .synth import ConditionTags, GpsModel, WorldSpec, calibrate_gps_sigma, generate_world, simulate_sweep
from .analysis import binned_summary, failure_flags, gps_filter, oracle_fusion_error, pearson_matrix

__version__ = "0.1.0"
