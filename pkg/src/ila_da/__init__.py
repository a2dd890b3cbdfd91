"""Instance-level affinity domain adaptation for digit benchmarks."""
from .affinity import affinity_step, build_affinity, filter_by_ratio, knn_pseudo_labels, similarity_ratio
from .core import ConfigError, ExperimentConfig, load_config, validate_config
from .losses import msc_loss, triplet_from_affinity
from .similarity import pairwise_similarity, phi

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ExperimentConfig", "affinity_step", "build_affinity", "filter_by_ratio",
    "knn_pseudo_labels", "load_config", "msc_loss", "pairwise_similarity", "phi",
    "similarity_ratio", "triplet_from_affinity", "validate_config",
]
