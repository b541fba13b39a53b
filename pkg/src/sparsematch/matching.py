"""Assignment head: similarity, dustbin augmentation, Sinkhorn, extraction.

The M x N similarity matrix is augmented with a dustbin row and column
(one learnable scalar) so unmatched keypoints have somewhere to send
their mass, then normalized by unrolled log-domain Sinkhorn iterations
toward row targets (1, ..., 1, N) and column targets (1, ..., 1, M).
Matches are mutual row/column argmaxes of the cropped matrix above a
confidence threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ShapeError

DEFAULT_SINKHORN_ITERS = 100
DEFAULT_MATCH_THRESHOLD = 0.2


@dataclass
class DustbinParam:
    z: Parameter  # 1x1 scalar filling the dustbin row and column

    @staticmethod
    def init(value: float = 1.0) -> "DustbinParam":
        return DustbinParam(Parameter([[value]], name="dustbin.z"))


@dataclass
class Match:
    index_a: int
    index_b: int
    confidence: float


@dataclass
class AssignmentResult:
    augmented: np.ndarray  # (M+1) x (N+1)
    cropped: np.ndarray  # M x N
    matches: list[Match] = field(default_factory=list)


def similarity(fa: Tensor, fb: Tensor) -> Tensor:
    """Inner-product similarity matrix FA FB^T, M x N."""
    if fa.cols != fb.cols:
        raise ShapeError(f"feature widths differ: {fa.shape} vs {fb.shape}")
    return ad.matmul(fa, ad.transpose(fb))


def augment_dustbin(s: Tensor, dustbin: DustbinParam) -> Tensor:
    """Append a dustbin row and column filled with the scalar z."""
    m, n = s.shape
    z = dustbin.z
    ones_col = Tensor.ones(m, 1, dtype=s.data.dtype)
    ones_row = Tensor.ones(1, n + 1, dtype=s.data.dtype)
    right = ad.matmul(ones_col, z)  # m x 1 of z
    top = ad.concat_cols(s, right)  # m x (n+1)
    bottom = ad.matmul(ad.transpose(ones_row), z)  # (n+1) x 1 of z
    return ad.transpose(ad.concat_cols(ad.transpose(top), bottom))


def sinkhorn_log(s_hat: Tensor, iterations: int = DEFAULT_SINKHORN_ITERS) -> Tensor:
    """Log-domain Sinkhorn on the augmented score matrix; returns log P-hat.

    Alternating row/column normalization of exp(s_hat) toward marginals
    (1, ..., 1, N) over rows and (1, ..., 1, M) over columns, computed
    entirely in log space so no finite input can overflow.  Iterations
    are unrolled, so the result is differentiable end to end.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    mp1, np1 = s_hat.shape
    m, n = mp1 - 1, np1 - 1
    dtype = s_hat.data.dtype
    log_a = np.zeros((mp1, 1), dtype=dtype)
    log_a[m, 0] = np.log(n) if n > 0 else 0.0
    log_b = np.zeros((1, np1), dtype=dtype)
    log_b[0, n] = np.log(m) if m > 0 else 0.0
    log_row_targets = Tensor(log_a)
    log_col_targets = Tensor(log_b)

    u = Tensor.zeros(mp1, 1, dtype=dtype)
    v = Tensor.zeros(1, np1, dtype=dtype)
    for _ in range(iterations):
        u = ad.sub(log_row_targets,
                   ad.logsumexp_rows(ad.add_rowvec(s_hat, v)))
        v = ad.sub(log_col_targets,
                   ad.logsumexp_cols(ad.add_colvec(s_hat, u)))
    return ad.add_rowvec(ad.add_colvec(s_hat, u), v)


def sinkhorn(s_hat: Tensor, iterations: int = DEFAULT_SINKHORN_ITERS) -> Tensor:
    """Probability-domain assignment matrix P-hat, (M+1) x (N+1)."""
    return ad.exp(sinkhorn_log(s_hat, iterations))


def extract_matches(p: np.ndarray, threshold: float = DEFAULT_MATCH_THRESHOLD) -> list[Match]:
    """Mutual-nearest-neighbor matches above the confidence threshold.

    (i, j) is kept iff j is the argmax of row i, i is the argmax of
    column j, and P[i, j] > threshold.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    p = np.asarray(p)
    if p.size == 0:
        return []
    row_best = p.argmax(axis=1)
    col_best = p.argmax(axis=0)
    matches = []
    for i, j in enumerate(row_best):
        if col_best[j] == i and p[i, j] > threshold:
            matches.append(Match(int(i), int(j), float(p[i, j])))
    return matches


def assignment_result(p_hat: np.ndarray,
                      threshold: float = DEFAULT_MATCH_THRESHOLD) -> AssignmentResult:
    """Crop the augmented matrix and run match extraction."""
    p = p_hat[:-1, :-1]
    return AssignmentResult(augmented=p_hat, cropped=p,
                            matches=extract_matches(p, threshold))
