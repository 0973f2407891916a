"""Dense self-supervised pretraining by predicting the next frame's patch tokens."""

from .config import RunConfig, load_config
from .errors import FrameDistillError

__all__ = ["RunConfig", "load_config", "FrameDistillError"]
__version__ = "0.1.0"
