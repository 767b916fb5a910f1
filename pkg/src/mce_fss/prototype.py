"""Masked average pooling prototypes and the mean-cosine similarity map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeaturePyramid, downsample_mask
from .tensor import ContractError, Tensor

PROTOTYPE_LEVELS = (2, 3)


@dataclass
class Prototype:
    vector: Tensor  # (C2 + C3,)
    levels: tuple[int, ...] = PROTOTYPE_LEVELS


@dataclass
class SimilarityMatrix:
    scores: Tensor  # H_a x W_a, entries in [-1, 1]


def masked_average_pool(feat: Tensor, binmask: np.ndarray) -> Tensor:
    """Mean feature vector over foreground positions of ``binmask``."""
    binmask = np.asarray(binmask, dtype=feat.dtype)
    if binmask.shape != feat.shape[1:]:
        raise ContractError(f"mask {binmask.shape} does not match features {feat.shape}")
    count = binmask.sum()
    if count == 0:
        raise ContractError("masked average pooling over an empty mask")
    c, h, w = feat.shape
    weights = Tensor((binmask / count).reshape(h * w, 1))
    return T.reshape(T.matmul(T.reshape(feat, (c, h * w)), weights), (c,))


def build_prototype(supp: FeaturePyramid, supp_mask: np.ndarray) -> Prototype:
    """Concatenate level-2 and level-3 MAP vectors of one support image."""
    parts = []
    for lv in PROTOTYPE_LEVELS:
        m = downsample_mask(supp_mask, size=supp[lv].shape[1:])
        parts.append(masked_average_pool(supp[lv], m))
    return Prototype(T.concat(parts, axis=0))


def similarity_matrix(qry4: Tensor, supp4: Tensor, binmask: np.ndarray) -> SimilarityMatrix:
    """Mean cosine similarity of each query position to the support foreground.

    Background support features are zeroed first; the mean runs over
    foreground support positions only. A zero vector has cosine 0 with
    everything.
    """
    binmask = np.asarray(binmask, dtype=supp4.dtype)
    if qry4.shape != supp4.shape or binmask.shape != supp4.shape[1:]:
        raise ContractError(f"shapes differ: query {qry4.shape}, support {supp4.shape}, mask {binmask.shape}")
    n_fg = binmask.sum()
    if n_fg == 0:
        raise ContractError("similarity matrix over an empty support mask")
    c, h, w = supp4.shape
    s = T.mul(supp4, binmask[None])
    s_hat = T.l2_normalize(T.transpose(T.reshape(s, (c, h * w))))
    q_hat = T.l2_normalize(T.transpose(T.reshape(qry4, (c, h * w))))
    s_sum = T.mean(s_hat, axis=0)  # sum / (h*w)
    s_mean = T.scale(T.reshape(s_sum, (c, 1)), (h * w) / n_fg)
    return SimilarityMatrix(T.reshape(T.matmul(q_hat, s_mean), (h, w)))


def kshot_aggregate(parts):
    """Average ``(f_cross, Prototype, SimilarityMatrix)`` triples over shots.

    ``f_cross`` may be ``None`` (no cross encoding) and is then passed through.
    """
    parts = list(parts)
    if not parts:
        raise ContractError("K-shot aggregation needs at least one shot")
    fcs = [p[0] for p in parts]
    if any(f is None for f in fcs):
        f_cross = None
    else:
        f_cross = T.stack_mean(fcs)
    proto = Prototype(T.stack_mean([p[1].vector for p in parts]), parts[0][1].levels)
    sim = SimilarityMatrix(T.stack_mean([p[2].scores for p in parts]))
    return f_cross, proto, sim
