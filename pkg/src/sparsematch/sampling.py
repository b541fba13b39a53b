"""Matchability scoring and well-distributed keypoint sampling.

Each processing unit first predicts a per-keypoint matchability score
in (0, 1) from the keypoint's own feature concatenated with weighted
global summaries of both images, then samples up to k high-scoring
keypoints subject to a non-maximum suppression radius derived from the
image's mean pairwise keypoint distance.  The selected indices act as
message bottlenecks downstream; selection itself is a hard index
operation, so gradients reach the score predictor only through the
pooling softmax, the attention value weights, and the classification
loss - never through the index choice.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .layers import LinearParams, init_linear, linear

NMS_SIGMA = 5e-2  # radius = sigma * mean pairwise keypoint distance


@dataclass
class BottleneckSelection:
    """Sampled matchable-keypoint indices for both images.

    Indices are unique, ascending, pairwise separated by at least the
    NMS radius used at sampling time, and at most k per side.
    """

    indices_a: np.ndarray
    indices_b: np.ndarray
    scores_a: Tensor  # gathered matchability scores, len(indices_a) x 1
    scores_b: Tensor


@dataclass
class PredictorParams:
    """Score predictor: a normalized MLP trunk plus a linear shortcut.

    Channel plan (width D features, bilateral input 3D):
    trunk 3D->3D -> CN -> ReLU -> 3D->D -> CN -> ReLU -> D->D -> CN ->
    ReLU -> D->1, shortcut 3D->1, summed, then sigmoid.
    """

    trunk1: LinearParams  # 3D -> 3D
    trunk2: LinearParams  # 3D -> D
    trunk3: LinearParams  # D -> D
    trunk4: LinearParams  # D -> 1
    shortcut: LinearParams  # 3D -> 1
    bilateral: bool = True


def init_predictor(dim: int, rng: np.random.Generator, name: str = "pred",
                   bilateral: bool = True) -> PredictorParams:
    d_in = 3 * dim if bilateral else dim
    return PredictorParams(
        trunk1=init_linear(d_in, d_in, rng, f"{name}.trunk1"),
        trunk2=init_linear(d_in, dim, rng, f"{name}.trunk2"),
        trunk3=init_linear(dim, dim, rng, f"{name}.trunk3"),
        trunk4=init_linear(dim, 1, rng, f"{name}.trunk4"),
        shortcut=init_linear(d_in, 1, rng, f"{name}.shortcut"),
        bilateral=bilateral,
    )


def weighted_global_pool(features: Tensor, gamma: Tensor) -> Tensor:
    """Softmax-weighted mean of feature rows: sum_i softmax(gamma)_i F_i."""
    if gamma.rows != features.rows or gamma.cols != 1:
        raise ShapeError(f"scores {gamma.shape} do not match features {features.shape}")
    weights = ad.softmax_rows(ad.transpose(gamma))  # 1 x M
    return ad.matmul(weights, features)  # 1 x D


def predict_matchability(features: Tensor, pooled_self: Tensor | None,
                         pooled_other: Tensor | None,
                         params: PredictorParams) -> Tensor:
    """Per-keypoint matchability scores in (0, 1), M x 1.

    The two pooled summaries are broadcast-concatenated onto every
    feature row; in the no-bilateral-context variant they are omitted
    and the predictor sees only the keypoint's own feature.
    """
    if params.bilateral:
        if pooled_self is None or pooled_other is None:
            raise ShapeError("bilateral predictor needs both pooled summaries")
        tile = Tensor.ones(features.rows, 1, dtype=features.data.dtype)
        x = ad.concat_cols(features,
                           ad.matmul(tile, pooled_self),
                           ad.matmul(tile, pooled_other))
    else:
        x = features
    h = ad.relu(ad.context_normalize(linear(x, params.trunk1)))
    h = ad.relu(ad.context_normalize(linear(h, params.trunk2)))
    h = ad.relu(ad.context_normalize(linear(h, params.trunk3)))
    logits = ad.add(linear(h, params.trunk4), linear(x, params.shortcut))
    return ad.sigmoid(logits)


def mean_pairwise_distance(positions: np.ndarray, block: int = 1024) -> float:
    """Mean Euclidean distance over ordered index pairs (i != j).

    Blocked so large point sets never materialize the full MxM matrix.
    """
    pts = np.asarray(positions, dtype=np.float64)
    m = len(pts)
    total = 0.0
    for start in range(0, m, block):
        chunk = pts[start:start + block]
        d = np.sqrt(((chunk[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
        total += d.sum()
    return total / (m * (m - 1))


def nms_radius(positions: np.ndarray) -> float:
    """Suppression radius: NMS_SIGMA times the mean pairwise distance."""
    if len(positions) < 2:
        warnings.warn("nms_radius needs >= 2 keypoints; returning 0", stacklevel=2)
        return 0.0
    return NMS_SIGMA * mean_pairwise_distance(positions)


def sample_matchable(scores: np.ndarray, positions: np.ndarray, k: int,
                     radius: float) -> np.ndarray:
    """Greedy top-k selection with NMS.

    Scan candidates by descending score (ties by ascending index);
    accept one if it lies at least ``radius`` from everything already
    accepted; stop after k acceptances.  Returns indices in acceptance
    order.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    pts = np.asarray(positions, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    accepted: list[int] = []
    for idx in order:
        if accepted:
            d = np.sqrt(((pts[accepted] - pts[idx]) ** 2).sum(axis=1))
            if d.min() < radius:
                continue
        accepted.append(int(idx))
        if len(accepted) == k:
            break
    return np.array(accepted, dtype=np.int64)


def inference_sample_count(num_keypoints: int, base_k: int = 128,
                           reference: int = 2000, floor_k: int = 16) -> int:
    """Test-time k: floor(base_k * n / reference), clamped to [floor_k, n]."""
    k = (base_k * num_keypoints) // reference
    return max(min(max(k, floor_k), num_keypoints), 1)


def select_bottlenecks(gamma_a: Tensor, gamma_b: Tensor,
                       positions_a: np.ndarray, positions_b: np.ndarray,
                       k_a: int, k_b: int,
                       rng: np.random.Generator | None = None,
                       random_sampling: bool = False) -> BottleneckSelection:
    """Run sampling for both images and gather the selected scores.

    ``random_sampling`` replaces top-k+NMS with a uniform draw (ablation).
    Indices are sorted ascending for deterministic downstream gathers.
    """
    def pick(gamma: Tensor, positions: np.ndarray, k: int) -> np.ndarray:
        k = min(k, len(positions))
        if random_sampling:
            if rng is None:
                raise ValueError("random_sampling requires an rng")
            return np.sort(rng.choice(len(positions), size=k, replace=False))
        radius = nms_radius(positions) if len(positions) >= 2 else 0.0
        return np.sort(sample_matchable(gamma.data, positions, k, radius))

    idx_a = pick(gamma_a, positions_a, k_a)
    idx_b = pick(gamma_b, positions_b, k_b)
    return BottleneckSelection(
        indices_a=idx_a,
        indices_b=idx_b,
        scores_a=ad.gather_rows(gamma_a, idx_a),
        scores_b=ad.gather_rows(gamma_b, idx_b),
    )
