"""Masked cross-image encoding between one support and one query image.

Per feature level the support and query maps are resized to a common
attention grid, flattened to tokens and projected to (q, k, v) with
separate weights for each image. Two attention branches then swap values:

* support branch: support self-attention scores, restricted to foreground
  support keys by a {0, -inf} logit bias, applied to query values;
* query branch: query self-attention scores applied to support values whose
  background rows are zeroed.

Each branch output goes through LayerNorm + a two-layer GELU MLP, is
reshaped back to a map, and all levels/branches are concatenated and mixed
by a 1x1 convolution into ``f_cross``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeaturePyramid, downsample_mask
from .tensor import ContractError, Tensor

OUTPUT_MODES = ("fusion", "query", "support")


@dataclass
class TokenSequence:
    tokens: Tensor  # (H*W) x C
    level: int
    role: str
    height: int
    width: int


@dataclass
class AdditiveMask:
    bias: np.ndarray  # (H*W,), entries 0 or -inf

    @property
    def keep(self) -> np.ndarray:
        """The {0, 1} foreground indicator the bias was built from."""
        return (self.bias == 0).astype(np.float64)

    def __len__(self) -> int:
        return self.bias.shape[0]


def tokenize(feat: Tensor, level: int = 0, role: str = "support") -> TokenSequence:
    c, h, w = feat.shape
    tokens = T.transpose(T.reshape(feat, (c, h * w)))
    return TokenSequence(tokens, level, role, h, w)


def untokenize(tokens: Tensor, height: int, width: int) -> Tensor:
    """Inverse of :func:`tokenize`: ``(H*W) x C`` tokens back to ``C x H x W``."""
    n, c = tokens.shape
    if n != height * width:
        raise ContractError(f"{n} tokens cannot fill a {height}x{width} map")
    return T.reshape(T.transpose(tokens), (c, height, width))


def build_additive_mask(binmask: np.ndarray) -> AdditiveMask:
    binmask = np.asarray(binmask).reshape(-1)
    if not np.any(binmask == 1):
        raise ContractError("additive mask needs at least one foreground position")
    return AdditiveMask(np.where(binmask == 1, 0.0, -np.inf))


def project(seq: TokenSequence | Tensor, heads: dict[str, Tensor]):
    """Linear (q, k, v) projections of a token sequence.

    ``heads`` maps ``"q"``, ``"k"``, ``"v"`` to ``C x d`` weights.
    """
    tokens = seq.tokens if isinstance(seq, TokenSequence) else seq
    if tokens.shape[1] != heads["q"].shape[0]:
        raise ContractError(f"tokens have {tokens.shape[1]} channels, heads expect {heads['q'].shape[0]}")
    return tuple(T.matmul(tokens, heads[name]) for name in ("q", "k", "v"))


def _split(x: Tensor, n_heads: int) -> list[Tensor]:
    if n_heads == 1:
        return [x]
    d = x.shape[1]
    if d % n_heads:
        raise ContractError(f"token dim {d} is not divisible by {n_heads} heads")
    step = d // n_heads
    return [T.take(x, slice(i * step, (i + 1) * step), axis=1) for i in range(n_heads)]


def support_logits(s_q: Tensor, s_k: Tensor) -> Tensor:
    """Unscaled, unmasked support self-attention scores ``S_q S_k^T``."""
    return T.matmul(s_q, T.transpose(s_k))


def support_branch_attention(s_q: Tensor, s_k: Tensor, q_v: Tensor, mask: AdditiveMask,
                             n_heads: int = 1) -> Tensor:
    n = s_q.shape[0]
    if s_k.shape[0] != n or q_v.shape[0] != n or len(mask) != n:
        raise ContractError(f"token counts differ: {s_q.shape}, {s_k.shape}, {q_v.shape}, mask {len(mask)}")
    outs = []
    for q, k, v in zip(_split(s_q, n_heads), _split(s_k, n_heads), _split(q_v, n_heads)):
        scores = T.scale(support_logits(q, k), 1.0 / np.sqrt(q.shape[1]))
        outs.append(T.matmul(T.masked_softmax(scores, mask.bias), v))
    return outs[0] if n_heads == 1 else T.concat(outs, axis=1)


def query_branch_attention(q_q: Tensor, q_k: Tensor, s_v: Tensor, mask: AdditiveMask,
                           n_heads: int = 1) -> Tensor:
    n = q_q.shape[0]
    if q_k.shape[0] != n or s_v.shape[0] != n or len(mask) != n:
        raise ContractError(f"token counts differ: {q_q.shape}, {q_k.shape}, {s_v.shape}, mask {len(mask)}")
    keep = mask.keep.astype(s_v.dtype)[:, None]
    masked_v = T.mul(s_v, keep)
    outs = []
    for q, k, v in zip(_split(q_q, n_heads), _split(q_k, n_heads), _split(masked_v, n_heads)):
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(q.shape[1]))
        outs.append(T.matmul(T.masked_softmax(scores), v))
    return outs[0] if n_heads == 1 else T.concat(outs, axis=1)


def mlp_block(r: Tensor, p: dict[str, Tensor]) -> Tensor:
    """LayerNorm -> linear(d, 2d) -> GELU -> linear(2d, d). No residual."""
    x = T.layer_norm(r, p["ln.gain"], p["ln.shift"])
    x = T.gelu(T.add_bias(T.matmul(x, p["fc1.weight"]), p["fc1.bias"]))
    return T.add_bias(T.matmul(x, p["fc2.weight"]), p["fc2.bias"])


@dataclass(frozen=True)
class MCEConfig:
    in_channels: tuple[int, int, int] = (32, 64, 64)  # levels 2, 3, 4
    token_dim: int = 64
    out_channels: int = 64
    levels: tuple[int, ...] = (2, 3, 4)
    output: str = "fusion"
    heads: int = 1

    def __post_init__(self):
        if self.output not in OUTPUT_MODES:
            raise ContractError(f"output must be one of {OUTPUT_MODES}, got {self.output!r}")
        if not self.levels or any(lv not in (2, 3, 4) for lv in self.levels):
            raise ContractError(f"levels must be a non-empty subset of (2, 3, 4), got {self.levels}")

    @property
    def branches(self) -> tuple[str, ...]:
        return {"fusion": ("support", "query"), "query": ("query",), "support": ("support",)}[self.output]


def _normal(rng, shape, std, dtype):
    return T.parameter(rng.normal(0.0, std, size=shape), dtype=dtype)


class MCEEncoder:
    """Parameters and forward pass of the multi-level masked cross-image encoder.

    Parameter names: ``L{level}.{S|Q}.{q|k|v}`` for projections,
    ``L{level}.mlp_{S|Q}.*`` for the per-branch MLP blocks, and
    ``fuse.weight`` / ``fuse.bias`` for the 1x1 aggregation.
    """

    def __init__(self, cfg: MCEConfig, rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        self.cfg = cfg
        d = cfg.token_dim
        p: dict[str, Tensor] = {}
        for lv in cfg.levels:
            c = cfg.in_channels[lv - 2]
            for img in ("S", "Q"):
                for name in ("q", "k", "v"):
                    p[f"L{lv}.{img}.{name}"] = _normal(rng, (c, d), 1.0 / np.sqrt(c), dtype)
            for img in ("S", "Q"):
                pre = f"L{lv}.mlp_{img}"
                p[f"{pre}.ln.gain"] = T.parameter(np.ones(d), dtype)
                p[f"{pre}.ln.shift"] = T.parameter(np.zeros(d), dtype)
                p[f"{pre}.fc1.weight"] = _normal(rng, (d, 2 * d), np.sqrt(2.0 / d), dtype)
                p[f"{pre}.fc1.bias"] = T.parameter(np.zeros(2 * d), dtype)
                p[f"{pre}.fc2.weight"] = _normal(rng, (2 * d, d), np.sqrt(1.0 / (2 * d)), dtype)
                p[f"{pre}.fc2.bias"] = T.parameter(np.zeros(d), dtype)
        n_in = d * len(cfg.levels) * len(cfg.branches)
        p["fuse.weight"] = _normal(rng, (cfg.out_channels, n_in, 1, 1), np.sqrt(2.0 / n_in), dtype)
        p["fuse.bias"] = T.parameter(np.zeros(cfg.out_channels), dtype)
        self.params = p

    def _heads(self, lv: int, img: str) -> dict[str, Tensor]:
        return {name: self.params[f"L{lv}.{img}.{name}"] for name in ("q", "k", "v")}

    def _mlp(self, lv: int, img: str) -> dict[str, Tensor]:
        pre = f"L{lv}.mlp_{img}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def branch_maps(self, supp: FeaturePyramid, qry: FeaturePyramid, binmask: np.ndarray) -> dict:
        """Per-level ``f'^S`` / ``f'^Q`` maps keyed by ``(level, "support"|"query")``.

        ``binmask`` is the support mask already at the attention resolution.
        """
        ha, wa = supp[3].shape[1:]
        if qry[3].shape[1:] != (ha, wa):
            raise ContractError("support and query pyramids have different resolutions")
        mask = build_additive_mask(binmask)
        maps = {}
        for lv in self.cfg.levels:
            fs = tokenize(T.bilinear_resize(supp[lv], ha, wa), lv, "support")
            fq = tokenize(T.bilinear_resize(qry[lv], ha, wa), lv, "query")
            s_q, s_k, s_v = project(fs, self._heads(lv, "S"))
            q_q, q_k, q_v = project(fq, self._heads(lv, "Q"))
            if "support" in self.cfg.branches:
                r_s = support_branch_attention(s_q, s_k, q_v, mask, self.cfg.heads)
                maps[lv, "support"] = untokenize(mlp_block(r_s, self._mlp(lv, "S")), ha, wa)
            if "query" in self.cfg.branches:
                r_q = query_branch_attention(q_q, q_k, s_v, mask, self.cfg.heads)
                maps[lv, "query"] = untokenize(mlp_block(r_q, self._mlp(lv, "Q")), ha, wa)
        return maps

    def fuse(self, maps: dict) -> Tensor:
        order = [maps[lv, br] for lv in self.cfg.levels for br in self.cfg.branches]
        return T.conv2d(T.concat(order, axis=0), self.params["fuse.weight"], self.params["fuse.bias"])

    def __call__(self, supp: FeaturePyramid, qry: FeaturePyramid, supp_mask: np.ndarray) -> Tensor:
        return mce_forward(self, supp, qry, supp_mask)


def attention_mask(supp: FeaturePyramid, supp_mask: np.ndarray) -> np.ndarray:
    """Support mask downsampled to the attention (level-3) grid."""
    ha, wa = supp[3].shape[1:]
    return downsample_mask(supp_mask, size=(ha, wa))


def mce_forward(encoder: MCEEncoder, supp: FeaturePyramid, qry: FeaturePyramid,
                supp_mask: np.ndarray) -> Tensor:
    """``f_cross`` (``C_f x H_a x W_a``) for one support/query pair.

    ``supp_mask`` is the full-resolution binary support mask.
    """
    return encoder.fuse(encoder.branch_maps(supp, qry, attention_mask(supp, supp_mask)))
