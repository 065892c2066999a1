"""afflow: conditional normalizing-flow toolkit for MRI motion artifact
simulation and removal at desk scale."""

from .autodiff import Tensor, no_grad
from .dataset import SimConfig, make_dataset
from .flow import FlowConfig, RafFlow
from .kspace import compose_artifact, corrupt_kspace, decompose_artifact, fft2, \
    ifft2, make_trajectory
from .metrics import psnr, ssim, uqi
from .model import ArtifactFlowModel, ModelConfig
from .optim import Adam
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "no_grad", "Adam",
    "fft2", "ifft2", "make_trajectory", "corrupt_kspace",
    "compose_artifact", "decompose_artifact",
    "SimConfig", "make_dataset",
    "FlowConfig", "RafFlow", "ModelConfig", "ArtifactFlowModel",
    "TrainConfig", "train",
    "psnr", "ssim", "uqi",
    "__version__",
]
