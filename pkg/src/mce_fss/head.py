"""Decoder: fused guidance features -> ASPP -> 3x3 conv -> 1x1 classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeaturePyramid
from .prototype import Prototype, SimilarityMatrix
from .tensor import ContractError, Tensor


@dataclass
class Prediction:
    logits: Tensor  # 2 x H x W, full resolution
    probs: Tensor   # 2 x H x W

    @property
    def mask(self) -> np.ndarray:
        """Hard foreground mask; ties go to background."""
        p = self.probs.data
        return (p[1] > p[0]).astype(np.uint8)


def assemble(qry: FeaturePyramid, proto: Prototype, f_cross: Tensor | None,
             a_sim: SimilarityMatrix | None) -> Tensor:
    """Channel layout: [query level-3 | prototype | f_cross | A_sim].

    ``f_cross`` / ``a_sim`` may be ``None`` for ablations; their channels
    are then absent.
    """
    f_q = qry[3]
    _, h, w = f_q.shape
    v = proto.vector
    blocks = [f_q, T.expand(T.reshape(v, (v.shape[0], 1, 1)), (v.shape[0], h, w))]
    if f_cross is not None:
        if f_cross.shape[1:] != (h, w):
            raise ContractError(f"f_cross {f_cross.shape} does not match query grid {h}x{w}")
        blocks.append(f_cross)
    if a_sim is not None:
        if a_sim.scores.shape != (h, w):
            raise ContractError(f"A_sim {a_sim.scores.shape} does not match query grid {h}x{w}")
        blocks.append(T.reshape(a_sim.scores, (1, h, w)))
    return T.concat(blocks, axis=0)


@dataclass(frozen=True)
class HeadConfig:
    in_channels: int = 225
    aspp_channels: int = 64
    aspp_dilations: tuple[int, ...] = (2, 4, 8)
    decoder_channels: int = 128


def _conv_param(rng, o, c, k, dtype, gain=2.0):
    std = np.sqrt(gain / (c * k * k))
    return T.parameter(rng.normal(0.0, std, size=(o, c, k, k)), dtype=dtype)


def init_head(cfg: HeadConfig, rng: np.random.Generator, dtype=T.DEFAULT_DTYPE) -> dict[str, Tensor]:
    p = {}
    cb, cd = cfg.aspp_channels, cfg.decoder_channels
    p["aspp.b0.weight"] = _conv_param(rng, cb, cfg.in_channels, 1, dtype)
    p["aspp.b0.bias"] = T.parameter(np.zeros(cb), dtype)
    for i, _ in enumerate(cfg.aspp_dilations, start=1):
        p[f"aspp.b{i}.weight"] = _conv_param(rng, cb, cfg.in_channels, 3, dtype)
        p[f"aspp.b{i}.bias"] = T.parameter(np.zeros(cb), dtype)
    n_cat = cb * (1 + len(cfg.aspp_dilations))
    p["aspp.reduce.weight"] = _conv_param(rng, cd, n_cat, 1, dtype)
    p["aspp.reduce.bias"] = T.parameter(np.zeros(cd), dtype)
    p["conv.weight"] = _conv_param(rng, cd, cd, 3, dtype)
    p["conv.bias"] = T.parameter(np.zeros(cd), dtype)
    p["cls.weight"] = _conv_param(rng, 2, cd, 1, dtype, gain=1.0)
    p["cls.bias"] = T.parameter(np.zeros(2), dtype)
    return p


def aspp(x: Tensor, p: dict[str, Tensor], dilations=(2, 4, 8)) -> Tensor:
    """1x1 branch plus one dilated 3x3 branch per rate, concatenated and reduced."""
    branches = [T.gelu(T.conv2d(x, p["aspp.b0.weight"], p["aspp.b0.bias"]))]
    for i, d in enumerate(dilations, start=1):
        branches.append(T.gelu(T.conv2d(x, p[f"aspp.b{i}.weight"], p[f"aspp.b{i}.bias"], dilation=d)))
    return T.gelu(T.conv2d(T.concat(branches, axis=0), p["aspp.reduce.weight"], p["aspp.reduce.bias"]))


def classify(x: Tensor, p: dict[str, Tensor], out_size: tuple[int, int]) -> Prediction:
    y = T.gelu(T.conv2d(x, p["conv.weight"], p["conv.bias"]))
    logits = T.conv2d(y, p["cls.weight"], p["cls.bias"])
    logits = T.bilinear_resize(logits, *out_size)
    return Prediction(logits, T.softmax_channels(logits))


def loss(pred: Prediction, gt: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy, computed from the logits."""
    gt = np.asarray(gt)
    if not np.all((gt == 0) | (gt == 1)):
        raise ContractError("ground-truth mask must be binary")
    return T.cross_entropy(pred.logits, gt)
