"""Group activity detection with a prompted, frozen mini-ViT and a group/context decoder."""
from .config import RunConfig, load_config
from .data import ClipAnnotation, SyntheticConfig, generate_synthetic, load_dataset
from .model import GroupActivityDetector, build_model

__all__ = [
    "ClipAnnotation",
    "GroupActivityDetector",
    "RunConfig",
    "SyntheticConfig",
    "build_model",
    "generate_synthetic",
    "load_config",
    "load_dataset",
]
