"""Small parameterized building blocks shared by the network modules."""

from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


@dataclass
class LinearParams:
    weight: Parameter  # in x out
    bias: Parameter | None  # 1 x out


def init_linear(n_in: int, n_out: int, rng: np.random.Generator,
                name: str = "", bias: bool = True, zero: bool = False) -> LinearParams:
    if zero:
        w = np.zeros((n_in, n_out))
    else:
        limit = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=(n_in, n_out))
    weight = Parameter(w, name=f"{name}.weight")
    b = Parameter(np.zeros((1, n_out)), name=f"{name}.bias") if bias else None
    return LinearParams(weight, b)


def linear(x: Tensor, p: LinearParams) -> Tensor:
    out = ad.matmul(x, p.weight)
    if p.bias is not None:
        out = ad.add_rowvec(out, p.bias)
    return out


@dataclass
class RowNormParams:
    gain: Parameter  # 1 x width
    shift: Parameter  # 1 x width


def init_row_norm(width: int, name: str = "") -> RowNormParams:
    return RowNormParams(Parameter(np.ones((1, width)), name=f"{name}.gain"),
                         Parameter(np.zeros((1, width)), name=f"{name}.shift"))


def row_norm(x: Tensor, p: RowNormParams) -> Tensor:
    """Normalize each row across channels, then apply the affine pair.

    Per-row statistics carry no cross-point context, in contrast to
    context_normalize which pools statistics over the whole point set.
    """
    normed = ad.transpose(ad.context_normalize(ad.transpose(x)))
    return ad.add_rowvec(ad.scale_columns(normed, p.gain), p.shift)


def iter_parameters(node, prefix: str = ""):
    """Yield (path, Parameter) pairs from nested dataclasses/lists/dicts.

    Order is deterministic: dataclass field order, list position,
    sorted dict keys.  Used by the optimizer, serialization, and the
    finite-difference checks, so it must stay stable.
    """
    if isinstance(node, Parameter):
        yield prefix or node.name or "param", node
    elif is_dataclass(node) and not isinstance(node, type):
        for f in fields(node):
            child = getattr(node, f.name)
            sub = f"{prefix}.{f.name}" if prefix else f.name
            yield from iter_parameters(child, sub)
    elif isinstance(node, (list, tuple)):
        for i, child in enumerate(node):
            yield from iter_parameters(child, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(node, dict):
        for key in sorted(node):
            yield from iter_parameters(node[key], f"{prefix}.{key}" if prefix else str(key))
    # scalars / arrays / None: not parameters, skip


def parameters_of(node) -> list[Parameter]:
    return [p for _, p in iter_parameters(node)]
