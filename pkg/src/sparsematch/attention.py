"""Weighted multi-head attention and the residual aggregation block.

The aggregation operator updates a set of M feature rows by attending
over N candidate rows, with a per-candidate nonnegative weight vector
applied to the value mix *after* the softmax (right-multiplication of
the attention matrix by Diag(w)).  An all-one weight vector therefore
reproduces plain attention exactly, and a zero weight removes that
candidate's value contribution without changing the softmax itself.

A module-level counter records query-key score evaluations so the
benchmark can verify the dense-vs-bottleneck complexity claims.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ShapeError
from .layers import LinearParams, RowNormParams, init_linear, init_row_norm, linear, row_norm


class ScoreCounter:
    """Counts query-key pairs scored by attention since the last reset."""

    def __init__(self) -> None:
        self.count = 0

    def reset(self) -> None:
        self.count = 0


score_counter = ScoreCounter()


@dataclass
class HeadParams:
    wq: Parameter  # dim x head_dim, projects the query side
    wk: Parameter  # dim x head_dim, projects the attended side
    wv: Parameter  # dim x head_dim, projects the attended side


@dataclass
class AttentionParams:
    heads: list[HeadParams]
    merge: Parameter  # dim x dim, applied after head concatenation
    ffn_hidden: LinearParams  # 2*dim -> 2*dim
    ffn_norm: RowNormParams
    ffn_out: LinearParams  # 2*dim -> dim

    @property
    def dim(self) -> int:
        return self.merge.rows

    @property
    def num_heads(self) -> int:
        return len(self.heads)


def init_attention_params(dim: int, num_heads: int, rng: np.random.Generator,
                          name: str = "att") -> AttentionParams:
    if dim % num_heads != 0:
        raise ShapeError(f"dim {dim} not divisible by {num_heads} heads")
    head_dim = dim // num_heads
    limit = np.sqrt(6.0 / (dim + head_dim))

    def proj(tag, i):
        return Parameter(rng.uniform(-limit, limit, size=(dim, head_dim)),
                         name=f"{name}.h{i}.{tag}")

    heads = [HeadParams(proj("wq", i), proj("wk", i), proj("wv", i))
             for i in range(num_heads)]
    merge_limit = np.sqrt(6.0 / (2 * dim))
    merge = Parameter(rng.uniform(-merge_limit, merge_limit, size=(dim, dim)),
                      name=f"{name}.merge")
    return AttentionParams(
        heads=heads,
        merge=merge,
        ffn_hidden=init_linear(2 * dim, 2 * dim, rng, f"{name}.ffn_hidden"),
        ffn_norm=init_row_norm(2 * dim, f"{name}.ffn_norm"),
        ffn_out=init_linear(2 * dim, dim, rng, f"{name}.ffn_out"),
    )


def weighted_attention(x: Tensor, y: Tensor, w: Tensor, params: AttentionParams,
                       y_values: Tensor | None = None) -> Tensor:
    """Multi-head attention of x over y with post-softmax value weights w.

    w is an Ny-length column of nonnegative scores; it reweights value
    rows only, exactly as a diagonal matrix between the softmaxed score
    matrix and the value matrix.  ``y_values`` optionally supplies a
    separate input for the value projection (keys still come from y).
    """
    if y_values is None:
        y_values = y
    if w.rows != y.rows or w.cols != 1:
        raise ShapeError(f"weight vector {w.shape} does not match attended rows {y.shape}")
    if y_values.shape != y.shape:
        raise ShapeError(f"value input {y_values.shape} does not match key input {y.shape}")
    head_dim = params.dim // params.num_heads
    inv_sqrt_d = 1.0 / np.sqrt(head_dim)
    w_row = ad.transpose(w)

    score_counter.count += x.rows * y.rows

    outs = []
    for h in params.heads:
        q = ad.matmul(x, h.wq)
        k = ad.matmul(y, h.wk)
        v = ad.matmul(y_values, h.wv)
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt_d)
        attn = ad.scale_columns(ad.softmax_rows(scores), w_row)
        outs.append(ad.matmul(attn, v))
    return ad.matmul(ad.concat_cols(*outs), params.merge)


def aggregate(x: Tensor, y: Tensor, w: Tensor, params: AttentionParams,
              y_values: Tensor | None = None) -> Tensor:
    """Residual update: x plus an FFN over [x || attention(x, y, w)]."""
    att = weighted_attention(x, y, w, params, y_values=y_values)
    h = ad.concat_cols(x, att)
    h = ad.relu(row_norm(linear(h, params.ffn_hidden), params.ffn_norm))
    return ad.add(x, linear(h, params.ffn_out))


def ones_weights(n: int) -> Tensor:
    """The all-one weight column that turns aggregation into plain attention."""
    return Tensor.ones(n, 1)
