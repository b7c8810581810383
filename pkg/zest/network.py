"""Все обучаемые наборы параметров одним nn.Module"""

from typing import Dict, Optional, Sequence

import torch
import torch.nn as nn

from zest.camera_geometry import Camera, DepthPlaneSet
from zest.encoding_volumes import (
    CostRegularizer,
    EncodingVolume,
    FeatureExtractor,
    View,
    build_geometry_volume,
    build_motion_volume,
)
from zest.models import TrainConfig
from zest.radiance_fields import DynamicField, StaticField


class ZestNetwork(nn.Module):
    """
    Шесть наборов параметров

    geometry_extractor + geometry_regularizer (w_Ψ, w_Ω) дают G,
    motion_extractor + motion_regularizer (w_Ψ, w_Ξ) дают M,
    static_field (w_Θ) и dynamic_field (w_Φ) декодируют точки.
    """

    def __init__(self, config: TrainConfig):
        super().__init__()
        bn = dict(bn_momentum=config.bn_momentum, bn_eps=config.bn_eps)
        volume_channels = config.feature_volume_channels
        self.keyframe_count = config.keyframe_count
        self.neighbor_count = config.neighbor_count
        self.volume_channels = volume_channels

        self.geometry_extractor = FeatureExtractor(**bn)
        self.motion_extractor = FeatureExtractor(**bn)
        self.geometry_regularizer = CostRegularizer(config.keyframe_count, volume_channels, **bn)
        self.motion_regularizer = CostRegularizer(config.neighbor_count, volume_channels, **bn)
        self.static_field = StaticField(config.keyframe_count, volume_channels)
        self.dynamic_field = DynamicField(config.neighbor_count, volume_channels, config.max_flow)
        # Растёт после каждого шага оптимизатора; ключ кэша объёмов
        self.version = 0

    def parameter_sets(self) -> Dict[str, nn.Module]:
        return {
            "geometry_extractor": self.geometry_extractor,
            "motion_extractor": self.motion_extractor,
            "geometry_regularizer": self.geometry_regularizer,
            "motion_regularizer": self.motion_regularizer,
            "static_field": self.static_field,
            "dynamic_field": self.dynamic_field,
        }

    def bump_version(self) -> None:
        self.version += 1

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def geometry_volume(
        self, keyframes: Sequence[Optional[View]], ref: Camera, planes: DepthPlaneSet
    ) -> EncodingVolume:
        return build_geometry_volume(
            keyframes, ref, planes, self.geometry_extractor, self.geometry_regularizer
        )

    def motion_volume(
        self, neighbors: Sequence[Optional[View]], ref: Camera, planes: DepthPlaneSet
    ) -> EncodingVolume:
        return build_motion_volume(
            neighbors, ref, planes, self.motion_extractor, self.motion_regularizer
        )
