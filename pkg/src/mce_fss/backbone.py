"""Small convolutional feature extractor emitting level 2/3/4 feature maps.

Four 3x3 conv stages with GELU:

    stage 1: 3 -> c1, stride 1        (full resolution, not emitted)
    stage 2: c1 -> C2, stride 2       -> level 2  (H/2)
    stage 3: C2 -> C3, stride 2       -> level 3  (H/4)
    stage 4: C3 -> C4, dilation 2     -> level 4  (H/4)

Weights are random (He-normal) and frozen by default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

LEVELS = (2, 3, 4)
LEVEL_STRIDE = {2: 2, 3: 4, 4: 4}


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, int, int] = (32, 64, 64)
    stem_width: int = 16
    frozen: bool = True
    seed: int = 0

    def __post_init__(self):
        if min(self.widths) < 8 or self.stem_width < 8:
            raise ContractError(f"backbone widths must be >= 8, got {self.widths}")


class FeaturePyramid(dict):
    """Mapping level -> ``C_l x H_l x W_l`` tensor for levels 2, 3, 4."""

    def __init__(self, levels: dict[int, Tensor]):
        super().__init__(levels)
        for lv in LEVELS:
            if lv not in self:
                raise ContractError(f"pyramid is missing level {lv}")


def _he(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


class Backbone:
    def __init__(self, cfg: BackboneConfig = BackboneConfig(), dtype=T.DEFAULT_DTYPE):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xBACB]))
        c2, c3, c4 = cfg.widths
        shapes = {
            "stage1": (cfg.stem_width, 3, 3, 3),
            "stage2": (c2, cfg.stem_width, 3, 3),
            "stage3": (c3, c2, 3, 3),
            "stage4": (c4, c3, 3, 3),
        }
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            self.params[f"{name}.weight"] = Tensor(_he(rng, shape, dtype), requires_grad=not cfg.frozen)
            self.params[f"{name}.bias"] = Tensor(np.zeros(shape[0], dtype=dtype), requires_grad=not cfg.frozen)

    def trainable(self) -> dict[str, Tensor]:
        return {} if self.cfg.frozen else dict(self.params)

    def __call__(self, image: Tensor) -> FeaturePyramid:
        return extract_features(image, self)


def extract_features(image: Tensor, backbone: Backbone) -> FeaturePyramid:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"expected a 3 x H x W image, got {image.shape}")
    _, h, w = image.shape
    if h % 4 or w % 4:
        raise ContractError(f"image size {h}x{w} is not divisible by 4")
    p = backbone.params

    def stage(x, name, **kw):
        return T.gelu(T.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], **kw))

    x1 = stage(image, "stage1")
    f2 = stage(x1, "stage2", stride=2)
    f3 = stage(f2, "stage3", stride=2)
    f4 = stage(f3, "stage4", dilation=2)
    return FeaturePyramid({2: f2, 3: f3, 4: f4})


def downsample_mask(mask: np.ndarray, level: int | None = None, size: tuple[int, int] | None = None) -> np.ndarray:
    """Resize a binary ``H x W`` mask to a level's resolution and re-binarize.

    Bilinear resize, then ``>= 0.5``. If that erases a non-empty mask, the
    cell holding the foreground centroid is set to 1.
    """
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape
    if size is None:
        s = LEVEL_STRIDE[level]
        size = (h // s, w // s)
    oh, ow = size
    ry = T.interp_matrix(h, oh)
    rx = T.interp_matrix(w, ow)
    out = ((ry @ mask @ rx.T) >= 0.5).astype(np.float64)
    if out.sum() == 0 and mask.sum() > 0:
        ys, xs = np.nonzero(mask)
        cy = min(int((ys.mean() + 0.5) * oh / h), oh - 1)
        cx = min(int((xs.mean() + 0.5) * ow / w), ow - 1)
        out[cy, cx] = 1.0
    return out
