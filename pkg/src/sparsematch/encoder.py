"""Keypoint position encoding and the dense initialization layers.

Initial per-keypoint features combine the visual descriptor with an MLP
embedding of the keypoint position.  Coordinates are mapped to [-1, 1]
per axis before encoding so the MLP is insensitive to image resolution.
A stack of dense layers then lets every keypoint attend to all
keypoints in its own image and in the other image (all-one weights), so
features perceive coarse bilateral context before any sampling happens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .attention import AttentionParams, aggregate, init_attention_params, ones_weights
from .errors import ShapeError
from .layers import LinearParams, init_linear, linear


@dataclass
class KeypointSet:
    """One image's keypoints: pixel positions, descriptors, frame size."""

    positions: np.ndarray  # M x 2, (x, y) pixels
    descriptors: np.ndarray  # M x D
    image_size: tuple[float, float]  # (width, height)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.descriptors = np.asarray(self.descriptors)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ShapeError(f"positions must be Mx2, got {self.positions.shape}")
        if len(self.descriptors) != len(self.positions):
            raise ShapeError(
                f"{len(self.positions)} positions vs {len(self.descriptors)} descriptors")
        if len(self.positions) < 1:
            raise ShapeError("a keypoint set needs at least one keypoint")
        w, h = self.image_size
        x, y = self.positions[:, 0], self.positions[:, 1]
        if x.min() < 0 or x.max() > w or y.min() < 0 or y.max() > h:
            raise ValueError(f"keypoint positions outside [0,{w}]x[0,{h}]")
        if not np.all(np.isfinite(self.descriptors)):
            raise ValueError("descriptors contain non-finite entries")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class LayerState:
    """Both images' feature matrices at one network depth."""

    features_a: Tensor  # M x D
    features_b: Tensor  # N x D
    layer: int = 0


@dataclass
class PositionEncoderParams:
    stages: list[LinearParams]  # 2 -> 32 -> 64 -> D, ReLU between


def init_position_encoder(dim: int, rng: np.random.Generator) -> PositionEncoderParams:
    widths = [2, 32, 64, dim]
    stages = [init_linear(widths[i], widths[i + 1], rng, f"pos_enc.{i}")
              for i in range(len(widths) - 1)]
    return PositionEncoderParams(stages)


def normalized_coordinates(positions: np.ndarray, image_size) -> np.ndarray:
    w, h = image_size
    out = np.empty_like(positions, dtype=np.float64)
    out[:, 0] = positions[:, 0] / w * 2.0 - 1.0
    out[:, 1] = positions[:, 1] / h * 2.0 - 1.0
    return out


def encode_positions(positions: np.ndarray, image_size,
                     params: PositionEncoderParams) -> Tensor:
    """MLP embedding of normalized keypoint coordinates, M x D."""
    x = Tensor(normalized_coordinates(positions, image_size))
    for i, stage in enumerate(params.stages):
        x = linear(x, stage)
        if i < len(params.stages) - 1:
            x = ad.relu(x)
    return x


def init_features(kps: KeypointSet, params: PositionEncoderParams) -> Tensor:
    """Initial features: descriptor plus position embedding, elementwise."""
    dim = params.stages[-1].weight.cols
    if kps.descriptors.shape[1] != dim:
        raise ShapeError(
            f"descriptor width {kps.descriptors.shape[1]} != network width {dim}")
    desc = Tensor(kps.descriptors)
    return ad.add(desc, encode_positions(kps.positions, kps.image_size, params))


@dataclass
class IcaLayerParams:
    """One dense layer: a self stage and a cross stage, weights shared
    between the two images (the pipeline is symmetric in the pair)."""

    self_att: AttentionParams
    cross_att: AttentionParams


def init_ica_layer(dim: int, num_heads: int, rng: np.random.Generator,
                   name: str = "ica") -> IcaLayerParams:
    return IcaLayerParams(
        self_att=init_attention_params(dim, num_heads, rng, f"{name}.self"),
        cross_att=init_attention_params(dim, num_heads, rng, f"{name}.cross"),
    )


def ica_layer(state: LayerState, params: IcaLayerParams) -> LayerState:
    """Dense update: intra-image attention, then inter-image attention."""
    fa, fb = state.features_a, state.features_b
    ones_a, ones_b = ones_weights(fa.rows), ones_weights(fb.rows)
    fa1 = aggregate(fa, fa, ones_a, params.self_att)
    fb1 = aggregate(fb, fb, ones_b, params.self_att)
    fa2 = aggregate(fa1, fb1, ones_b, params.cross_att)
    fb2 = aggregate(fb1, fa1, ones_a, params.cross_att)
    return LayerState(fa2, fb2, state.layer + 1)
