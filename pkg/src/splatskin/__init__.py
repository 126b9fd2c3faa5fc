"""Articulated 3D Gaussian avatars: dynamic skinning, physically based
shading under a learnable environment probe, and a differentiable
rasterizer, trained end to end from posed image sequences."""

from .avatar import GaussianAvatar
from .camera import Camera
from .shlight import EnvLightProbe
from .skinning import PoseSequence, Skeleton, SkinningField, encoder_flops
from .training import (AvatarModel, AvatarReconstructor, TrainConfig,
                       render_frame, train_stage1, train_stage2)

__version__ = "0.1.0"

__all__ = [
    "AvatarModel",
    "AvatarReconstructor",
    "Camera",
    "EnvLightProbe",
    "GaussianAvatar",
    "PoseSequence",
    "Skeleton",
    "SkinningField",
    "TrainConfig",
    "encoder_flops",
    "render_frame",
    "train_stage1",
    "train_stage2",
]
