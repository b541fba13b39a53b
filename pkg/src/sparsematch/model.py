"""Full matcher: configuration, parameter container, forward pass.

Pipeline: position-encoded features -> dense init layers -> repeated
(matchability prediction -> bottleneck sampling -> bottleneck message
passing) units -> similarity -> dustbin -> Sinkhorn.  The three
ablation switches (bilateral context, guided attention, random
sampling) reproduce the reduced variants used for comparison runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bottleneck import MkacaLayerParams, init_mkaca_layer, mkaca_layer
from .encoder import (IcaLayerParams, KeypointSet, LayerState, PositionEncoderParams,
                      ica_layer, init_features, init_ica_layer, init_position_encoder)
from .matching import (AssignmentResult, DustbinParam, assignment_result,
                       augment_dustbin, similarity, sinkhorn)
from .sampling import (BottleneckSelection, PredictorParams, init_predictor,
                       inference_sample_count, predict_matchability,
                       select_bottlenecks, weighted_global_pool)


@dataclass
class MatcherConfig:
    dim: int = 32
    heads: int = 4
    init_layers: int = 1  # dense layers before the sampling units
    unit_layers: int = 2  # prediction + bottleneck units
    k: int = 16  # bottlenecks per image during training
    sinkhorn_iters: int = 100
    match_threshold: float = 0.2
    # ablation switches (all True/False defaults give the full model)
    bilateral_context: bool = True
    guided_attention: bool = True
    random_sampling: bool = False
    # at inference k follows floor(128 * n / 2000), clamped to [16, n]
    adaptive_k: bool = False

    @staticmethod
    def paper_scale() -> "MatcherConfig":
        return MatcherConfig(dim=128, heads=4, init_layers=3, unit_layers=6, k=128)

    def with_variant(self, variant: str) -> "MatcherConfig":
        """Named variants used by comparison runs."""
        if variant == "full":
            return replace(self)
        if variant == "no_bilateral_context":
            return replace(self, bilateral_context=False)
        if variant == "vanilla_attention":
            return replace(self, guided_attention=False)
        if variant == "random_sampling":
            return replace(self, random_sampling=True)
        raise ValueError(f"unknown variant {variant!r}")


@dataclass
class UnitParams:
    predictor: PredictorParams
    mkaca: MkacaLayerParams


@dataclass
class MatcherParams:
    encoder: PositionEncoderParams
    ica_layers: list[IcaLayerParams]
    units: list[UnitParams]
    dustbin: DustbinParam


def init_matcher_params(cfg: MatcherConfig, rng: np.random.Generator) -> MatcherParams:
    return MatcherParams(
        encoder=init_position_encoder(cfg.dim, rng),
        ica_layers=[init_ica_layer(cfg.dim, cfg.heads, rng, f"ica{i}")
                    for i in range(cfg.init_layers)],
        units=[UnitParams(
            predictor=init_predictor(cfg.dim, rng, f"unit{i}.pred",
                                     bilateral=cfg.bilateral_context),
            mkaca=init_mkaca_layer(cfg.dim, cfg.heads, rng, f"unit{i}.mkaca",
                                   guided=cfg.guided_attention))
            for i in range(cfg.unit_layers)],
        dustbin=DustbinParam.init(1.0),
    )


@dataclass
class PairForward:
    """Everything the losses and metrics need from one forward pass."""

    features_a: Tensor
    features_b: Tensor
    gammas: list[tuple[Tensor, Tensor]]  # one (gamma_a, gamma_b) per unit
    selections: list[BottleneckSelection] = field(default_factory=list)
    p_hat: Tensor | None = None  # (M+1) x (N+1) assignment, probability domain


def forward_pair(params: MatcherParams, cfg: MatcherConfig,
                 kps_a: KeypointSet, kps_b: KeypointSet,
                 rng: np.random.Generator | None = None) -> PairForward:
    state = LayerState(init_features(kps_a, params.encoder),
                       init_features(kps_b, params.encoder))
    for layer in params.ica_layers:
        state = ica_layer(state, layer)

    m, n = len(kps_a), len(kps_b)
    if cfg.adaptive_k:
        k_a, k_b = inference_sample_count(m), inference_sample_count(n)
    else:
        k_a, k_b = min(cfg.k, m), min(cfg.k, n)

    gamma_a = Tensor.ones(m, 1)
    gamma_b = Tensor.ones(n, 1)
    gammas: list[tuple[Tensor, Tensor]] = []
    selections: list[BottleneckSelection] = []

    for unit in params.units:
        fa, fb = state.features_a, state.features_b
        if cfg.bilateral_context:
            pooled_a = weighted_global_pool(fa, gamma_a)
            pooled_b = weighted_global_pool(fb, gamma_b)
            gamma_a = predict_matchability(fa, pooled_a, pooled_b, unit.predictor)
            gamma_b = predict_matchability(fb, pooled_b, pooled_a, unit.predictor)
        else:
            gamma_a = predict_matchability(fa, None, None, unit.predictor)
            gamma_b = predict_matchability(fb, None, None, unit.predictor)
        sel = select_bottlenecks(gamma_a, gamma_b, kps_a.positions, kps_b.positions,
                                 k_a, k_b, rng=rng,
                                 random_sampling=cfg.random_sampling)
        state = mkaca_layer(state, sel, gamma_a, gamma_b, unit.mkaca)
        gammas.append((gamma_a, gamma_b))
        selections.append(sel)

    s = similarity(state.features_a, state.features_b)
    s_hat = augment_dustbin(s, params.dustbin)
    p_hat = sinkhorn(s_hat, cfg.sinkhorn_iters)
    return PairForward(state.features_a, state.features_b, gammas, selections, p_hat)


@dataclass
class Matcher:
    """Config + parameters bundled for inference use."""

    config: MatcherConfig
    params: MatcherParams

    @staticmethod
    def create(cfg: MatcherConfig, seed: int = 0) -> "Matcher":
        return Matcher(cfg, init_matcher_params(cfg, np.random.default_rng(seed)))

    def forward(self, kps_a: KeypointSet, kps_b: KeypointSet,
                rng: np.random.Generator | None = None) -> PairForward:
        return forward_pair(self.params, self.config, kps_a, kps_b, rng=rng)

    def match(self, kps_a: KeypointSet, kps_b: KeypointSet,
              threshold: float | None = None) -> AssignmentResult:
        with ad.no_grad():
            rng = np.random.default_rng(0) if self.config.random_sampling else None
            fwd = self.forward(kps_a, kps_b, rng=rng)
        thr = self.config.match_threshold if threshold is None else threshold
        return assignment_result(fwd.p_hat.data, thr)
