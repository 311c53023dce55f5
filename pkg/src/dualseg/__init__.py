"""Parameter-efficient dual-stream RGB+DSM semantic segmentation."""

from .backbone import DualStreamEncoder, EncoderSpec, TokenGrid, partition_stages
from .config import ConfigError, default_config, load_config
from .model import MultimodalSegmenter, build_model

__all__ = [
    "ConfigError",
    "DualStreamEncoder",
    "EncoderSpec",
    "MultimodalSegmenter",
    "TokenGrid",
    "build_model",
    "default_config",
    "load_config",
    "partition_stages",
]

__version__ = "0.1.0"
