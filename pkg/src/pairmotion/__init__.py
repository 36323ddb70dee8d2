"""Two-person interaction generation with a dynamically routed mixture-of-experts denoiser."""

from .csvae import MotionVAE
from .denoiser import InteractionDiffusion
from .features import FeatureExtractor
from .moe import MoEBlock, MoEConfig

__version__ = "0.1.0"
__all__ = ["FeatureExtractor", "InteractionDiffusion", "MoEBlock", "MoEConfig", "MotionVAE"]
