"""Sea-ice segmentation of SAR scenes with a numpy autodiff, an ASPP segmentation network and a U-Net baseline."""

from .errors import SegError
from .inference import PredictionProduct, predict_scene
from .model import ModelConfig, SegModel, build_model, build_unet_baseline, count_parameters
from .raster import IGNORE, NormStats, RasterScene, compute_norm_stats, load_scene, write_scene
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "IGNORE", "ModelConfig", "NormStats", "PredictionProduct", "RasterScene", "SegError", "SegModel",
    "TrainConfig", "build_model", "build_unet_baseline", "compute_norm_stats", "count_parameters",
    "load_scene", "predict_scene", "train", "write_scene",
]
