"""Bottleneck message passing: infuse, refine, broadcast back.

Instead of all-pairs attention, each layer routes messages through the
sampled matchable keypoints.  Three phases per image: (1) bottlenecks
gather context from every same-image keypoint, value-weighted by the
matchability scores; (2) bottlenecks refine each other with plain
self-attention; (3) every keypoint retrieves context back from its own
image's bottlenecks and then from the other image's, value-weighted by
the bottlenecks' gathered scores.  Score evaluations per layer total
(M+N)k for infusion, k_a^2 + k_b^2 for refinement and 2(M+N)k for the
two broadcast passes - linear in the keypoint count at fixed k.

Weights are shared between the two images within a layer (the
architecture is symmetric in the pair); the four phases have distinct
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .attention import AttentionParams, aggregate, init_attention_params, ones_weights
from .encoder import LayerState
from .sampling import BottleneckSelection


@dataclass
class MkacaLayerParams:
    infuse: AttentionParams
    refine: AttentionParams
    broadcast_intra: AttentionParams
    broadcast_inter: AttentionParams
    guided: bool = True  # False: ablation, all-one value weights everywhere


def init_mkaca_layer(dim: int, num_heads: int, rng: np.random.Generator,
                     name: str = "mkaca", guided: bool = True) -> MkacaLayerParams:
    return MkacaLayerParams(
        infuse=init_attention_params(dim, num_heads, rng, f"{name}.infuse"),
        refine=init_attention_params(dim, num_heads, rng, f"{name}.refine"),
        broadcast_intra=init_attention_params(dim, num_heads, rng, f"{name}.bc_intra"),
        broadcast_inter=init_attention_params(dim, num_heads, rng, f"{name}.bc_inter"),
        guided=guided,
    )


def gather_bottlenecks(features: Tensor, indices) -> Tensor:
    """Rows of the feature matrix at the sampled indices, in list order."""
    return ad.gather_rows(features, indices)


def infuse(f_bottleneck: Tensor, f_all: Tensor, gamma: Tensor,
           params: AttentionParams) -> Tensor:
    """Bottlenecks attend over all same-image keypoints, values weighted
    by the matchability scores."""
    return aggregate(f_bottleneck, f_all, gamma, params)


def refine(f_bottleneck: Tensor, params: AttentionParams) -> Tensor:
    """Self-attention among the bottlenecks, all-one weights."""
    return aggregate(f_bottleneck, f_bottleneck,
                     ones_weights(f_bottleneck.rows), params)


def broadcast_back(f_all: Tensor, f_bn_self: Tensor, f_bn_other: Tensor,
                   gamma_bn_self: Tensor, gamma_bn_other: Tensor,
                   intra: AttentionParams, inter: AttentionParams) -> Tensor:
    """Every keypoint attends to its own image's bottlenecks, then to the
    other image's, value-weighted by the gathered scores."""
    out = aggregate(f_all, f_bn_self, gamma_bn_self, intra)
    return aggregate(out, f_bn_other, gamma_bn_other, inter)


def mkaca_layer(state: LayerState, selection: BottleneckSelection,
                gamma_a: Tensor, gamma_b: Tensor,
                params: MkacaLayerParams) -> LayerState:
    """One full bottleneck-routing update for both images."""
    fa, fb = state.features_a, state.features_b

    if params.guided:
        wa, wb = gamma_a, gamma_b
        wma, wmb = selection.scores_a, selection.scores_b
    else:
        wa, wb = ones_weights(fa.rows), ones_weights(fb.rows)
        wma = ones_weights(len(selection.indices_a))
        wmb = ones_weights(len(selection.indices_b))

    bn_a = gather_bottlenecks(fa, selection.indices_a)
    bn_b = gather_bottlenecks(fb, selection.indices_b)

    bn_a = infuse(bn_a, fa, wa, params.infuse)
    bn_b = infuse(bn_b, fb, wb, params.infuse)

    bn_a = refine(bn_a, params.refine)
    bn_b = refine(bn_b, params.refine)

    out_a = broadcast_back(fa, bn_a, bn_b, wma, wmb,
                           params.broadcast_intra, params.broadcast_inter)
    out_b = broadcast_back(fb, bn_b, bn_a, wmb, wma,
                           params.broadcast_intra, params.broadcast_inter)
    return LayerState(out_a, out_b, state.layer + 1)
