"""Zone-specific CSI feedback simulation: channels, per-zone autoencoders, mobility overhead."""
from .autoenc import (
    LayerSpec,
    ModelParams,
    TrainConfig,
    count_multiplications,
    count_parameters,
    decode,
    encode,
    init_model,
    loss_and_gradients,
    reconstruct,
    train,
)
from .config import ExperimentConfig, load_config
from .errors import ConfigError, DataError, NumericFailure, ZoneCSIError
from .evaluation import build_cdf, comparison_report, evaluate, nmse
from .formats import ModelBundle, load_model, read_dataset, save_model, write_dataset
from .mobility import MobilityConfig, compute_overhead, count_zone_switches, simulate_trajectory
from .pipeline import run_experiment
from .scene import ArrayGeometry, SceneConfig, array_response, generate_scene, synthesize_channel
from .transform import compression_rate, fit_normalizer, to_angular_delay, truncate_and_vectorize, unitary_dft
from .zoning import ZonePartition, classify_position, kmeans_positions, partition_dataset

__version__ = "0.1.0"
