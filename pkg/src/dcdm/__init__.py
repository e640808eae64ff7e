"""Desk-scale masked diffusion language models with learned, content-defined chunks."""
from .config import ModelConfig, tiny_reference_config
from .kernels import BACKEND
from .model import Denoiser
from .noise import DiffusionBatch, corrupt
from .objective import total_loss
from .sampler import SampleJob, generate, generate_mdlm
from .trainer import train

__all__ = ["BACKEND", "Denoiser", "DiffusionBatch", "ModelConfig", "SampleJob", "corrupt",
           "generate", "generate_mdlm", "tiny_reference_config", "total_loss", "train"]
__version__ = "0.1.0"
