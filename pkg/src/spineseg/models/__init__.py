from .deeplab2d import DeepLab2D, Stage1Output
from .deeplab3d import DeepLab3D
from .attention import AttentionBlock, CrossAttentionFusion, PredictionHead
from .fine import FineNet, FineOutput

__all__ = [
    "DeepLab2D",
    "Stage1Output",
    "DeepLab3D",
    "AttentionBlock",
    "CrossAttentionFusion",
    "PredictionHead",
    "FineNet",
    "FineOutput",
]
