"""The few-shot segmenter: backbone features -> guidance -> decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, FeaturePyramid
from .head import HeadConfig, Prediction, aspp, assemble, classify, init_head, loss
from .mce import MCEConfig, MCEEncoder, attention_mask, mce_forward
from .prototype import build_prototype, kshot_aggregate, similarity_matrix
from .tensor import ContractError, Tensor

DTYPES = {"float64": np.float64, "float32": np.float32}

# name -> overrides relative to the full model
ABLATIONS = {
    "full": {},
    "query_only": {"output": "query"},
    "support_only": {"output": "support"},
    "no_cross": {"use_cross": False},
    "no_sim": {"use_sim": False},
    "single_level": {"levels": (3,)},
    "baseline": {"use_cross": False, "use_sim": False},
}


@dataclass(frozen=True)
class ModelConfig:
    backbone_widths: tuple[int, int, int] = (32, 64, 64)
    stem_width: int = 16
    backbone_frozen: bool = True
    token_dim: int = 64
    cross_channels: int = 64
    aspp_channels: int = 64
    aspp_dilations: tuple[int, ...] = (2, 4, 8)
    decoder_channels: int = 128
    heads: int = 1
    levels: tuple[int, ...] = (2, 3, 4)
    output: str = "fusion"
    use_cross: bool = True
    use_sim: bool = True
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        # tolerate lists coming from YAML/JSON
        for name in ("backbone_widths", "aspp_dilations", "levels"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.dtype not in DTYPES:
            raise ContractError(f"dtype must be one of {sorted(DTYPES)}")
        # validates output mode and levels
        MCEConfig(self.backbone_widths, self.token_dim, self.cross_channels, self.levels, self.output, self.heads)

    def ablation(self, name: str) -> "ModelConfig":
        return replace(self, **ABLATIONS[name])

    @property
    def fused_channels(self) -> int:
        c2, c3, _ = self.backbone_widths
        n = c3 + (c2 + c3)
        if self.use_cross:
            n += self.cross_channels
        if self.use_sim:
            n += 1
        return n


class FewShotSegmenter:
    """Holds all parameters; forward passes one episode at a time."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        dtype = DTYPES[cfg.dtype]
        self.dtype = dtype
        self.backbone = Backbone(BackboneConfig(cfg.backbone_widths, cfg.stem_width,
                                                cfg.backbone_frozen, cfg.seed), dtype)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x1A17]))
        self.encoder = None
        if cfg.use_cross:
            self.encoder = MCEEncoder(MCEConfig(cfg.backbone_widths, cfg.token_dim, cfg.cross_channels,
                                                cfg.levels, cfg.output, cfg.heads), rng, dtype)
        self.head_cfg = HeadConfig(cfg.fused_channels, cfg.aspp_channels,
                                   cfg.aspp_dilations, cfg.decoder_channels)
        self.head = init_head(self.head_cfg, rng, dtype)
        self._cache: dict = {}

    # -- parameters ---------------------------------------------------------

    def named_parameters(self, include_frozen: bool = False) -> dict[str, Tensor]:
        out = {}
        bb = self.backbone.params if include_frozen else self.backbone.trainable()
        out.update({f"backbone.{k}": v for k, v in bb.items()})
        if self.encoder is not None:
            out.update({f"mce.{k}": v for k, v in self.encoder.params.items()})
        out.update({f"head.{k}": v for k, v in self.head.items()})
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters(include_frozen=True).items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.named_parameters(include_frozen=True)
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ContractError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, t in own.items():
            if state[k].shape != t.shape:
                raise ContractError(f"{k}: shape {state[k].shape} != {t.shape}")
            t.data[...] = state[k]
        self._cache.clear()

    def config_dict(self) -> dict:
        return asdict(self.cfg)

    # -- forward ------------------------------------------------------------

    def pyramid(self, image: np.ndarray, key=None) -> FeaturePyramid:
        frozen = self.cfg.backbone_frozen
        if frozen and key is not None and key in self._cache:
            return self._cache[key]
        x = Tensor(np.asarray(image, dtype=self.dtype))
        if frozen:
            with T.no_grad():
                pyr = self.backbone(x)
            if key is not None:
                self._cache[key] = pyr
        else:
            pyr = self.backbone(x)
        return pyr

    def guidance(self, supp: FeaturePyramid, supp_mask: np.ndarray, qry: FeaturePyramid):
        """One shot's ``(f_cross, prototype, A_sim)``; missing parts are ``None``."""
        f_cross = mce_forward(self.encoder, supp, qry, supp_mask) if self.encoder is not None else None
        proto = build_prototype(supp, supp_mask)
        sim = similarity_matrix(qry[4], supp[4], attention_mask(supp, supp_mask))
        return f_cross, proto, sim

    def forward(self, support: Sequence, query_image: np.ndarray, query_key=None) -> Prediction:
        """``support`` is a list of ``(image, mask)`` or ``(image, mask, cache_key)``."""
        if not support:
            raise ContractError("episode needs at least one support pair")
        qry = self.pyramid(query_image, query_key)
        parts = []
        for item in support:
            img, m = item[0], item[1]
            key = item[2] if len(item) > 2 else None
            parts.append(self.guidance(self.pyramid(img, key), m, qry))
        f_cross, proto, sim = kshot_aggregate(parts)
        fused = assemble(qry, proto, f_cross, sim if self.cfg.use_sim else None)
        x = aspp(fused, self.head, self.cfg.aspp_dilations)
        return classify(x, self.head, tuple(query_image.shape[1:]))

    def episode_forward(self, episode) -> Prediction:
        support = [(s.image, s.mask, s.key or None) for s in episode.support]
        return self.forward(support, episode.query.image, episode.query.key or None)

    def episode_loss(self, episode) -> Tensor:
        return loss(self.episode_forward(episode), episode.query.mask)

    def predict(self, episode) -> np.ndarray:
        with T.no_grad():
            return self.episode_forward(episode).mask

    def clear_cache(self) -> None:
        self._cache.clear()
