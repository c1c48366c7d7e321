"""Multispectral Gaussian splatting: rendering, colour conversion and training."""
from .core import (Camera, ColorSpace, ContractError, ConversionStage, DensifyConfig, DomainError, GaussianCloud,
                   LearningRates, LossMode, RgbImage, SpecsplatError, SpectralBasis, SpectralImage, TrainConfig,
                   validate_cloud)
from .rasterizer import RenderSettings, rasterize, rasterize_backward

__version__ = "0.1.0"
