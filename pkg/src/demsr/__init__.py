"""16x super-resolution of digital elevation models with a small numpy autodiff stack."""

__version__ = "0.1.0"

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    DatasetStats,
    Grid,
    TilePair,
    dataset_stats,
    denormalize,
    downsample_avg,
    load_pairs,
    normalize,
    pair_and_filter,
    pair_stats,
    read_raster,
    synthesize_terrain,
    synthetic_pairs,
    tile_grid,
    write_raster,
)
from .estimator import DEMSuperResolver, InterpolationUpscaler
from .exceptions import (
    ConfigError,
    ContractError,
    DegenerateDataError,
    DemsrError,
    DimensionError,
    FormatError,
    NonFiniteError,
    PairingError,
    ParseError,
)
from .interp import baseline_mse, resize, upscale
from .model import ModelConfig, build_model, count_params, model_forward, production_config, tiny_config
from .tensor import Tensor, backward, grad_check, set_debug
from .train import EvalReport, TrainConfig, evaluate, export_report, fit

__all__ = [
    "__version__",
    "DatasetStats",
    "Grid",
    "TilePair",
    "dataset_stats",
    "denormalize",
    "downsample_avg",
    "load_pairs",
    "normalize",
    "pair_and_filter",
    "pair_stats",
    "read_raster",
    "synthesize_terrain",
    "synthetic_pairs",
    "tile_grid",
    "write_raster",
    "ConfigError",
    "ContractError",
    "DegenerateDataError",
    "DemsrError",
    "DimensionError",
    "FormatError",
    "NonFiniteError",
    "PairingError",
    "ParseError",
    "Checkpoint",
    "load_checkpoint",
    "save_checkpoint",
    "DEMSuperResolver",
    "InterpolationUpscaler",
    "baseline_mse",
    "resize",
    "upscale",
    "ModelConfig",
    "build_model",
    "count_params",
    "model_forward",
    "production_config",
    "tiny_config",
    "Tensor",
    "backward",
    "grad_check",
    "set_debug",
    "EvalReport",
    "TrainConfig",
    "evaluate",
    "export_report",
    "fit",
]
