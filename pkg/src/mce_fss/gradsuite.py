"""Central-difference gradient checks for every differentiable op and the episode loss.

Each check builds one random float64 instance, reduces the op output to a
scalar with a random weighting and returns :func:`tensor.grad_check`'s max
relative error.
"""

from __future__ import annotations

import time
from dataclasses import replace
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import FeaturePyramid
from .head import HeadConfig, aspp, assemble, classify, init_head
from .head import loss as seg_loss
from .mce import (MCEConfig, MCEEncoder, build_additive_mask, mce_forward, mlp_block,
                  query_branch_attention, support_branch_attention)
from .model import FewShotSegmenter, ModelConfig
from .prototype import Prototype, SimilarityMatrix, masked_average_pool, similarity_matrix

TOLERANCE = 1e-4


def _p(rng, *shape, lo=-1.0, hi=1.0):
    return T.parameter(rng.uniform(lo, hi, size=shape))


def _weighted(out: T.Tensor, w: np.ndarray) -> T.Tensor:
    return T.sum_all(T.mul(out, w))


def _check(rng, make: Callable[[], T.Tensor], params, max_entries=None) -> float:
    w = rng.normal(size=make().shape)
    return T.grad_check(lambda: _weighted(make(), w), params, max_entries=max_entries, rng=rng)


def _random_mask(rng, n) -> np.ndarray:
    m = (rng.random(n) < 0.5).astype(float)
    m[rng.integers(n)] = 1.0
    return m


def _pyramid(rng, h, widths, requires_grad=False) -> FeaturePyramid:
    mk = (lambda *s: _p(rng, *s)) if requires_grad else (lambda *s: T.Tensor(rng.uniform(-1, 1, size=s)))
    return FeaturePyramid({2: mk(widths[0], h // 2, h // 2), 3: mk(widths[1], h // 4, h // 4),
                           4: mk(widths[2], h // 4, h // 4)})


def _episode_mask(rng, h):
    m = np.zeros((h, h), dtype=np.uint8)
    y, x = rng.integers(0, h // 2, size=2)
    m[y:y + h // 2, x:x + h // 2] = 1
    return m


# ---------------------------------------------------------------------------
# primitive checks
# ---------------------------------------------------------------------------

def check_add(rng):
    a, b = _p(rng, 3, 4), _p(rng, 1, 4)
    return _check(rng, lambda: T.add(a, b), [a, b])


def check_mul(rng):
    a, b = _p(rng, 3, 4), _p(rng, 3, 1)
    return _check(rng, lambda: T.mul(a, b), [a, b])


def check_scale(rng):
    a = _p(rng, 2, 5)
    c = float(rng.normal())
    return _check(rng, lambda: T.scale(a, c), [a])


def check_add_bias(rng):
    x, b = _p(rng, 4, 3, 3), _p(rng, 4)
    return _check(rng, lambda: T.add_bias(x, b, axis=0), [x, b])


def check_concat(rng):
    a, b = _p(rng, 2, 3, 3), _p(rng, 4, 3, 3)
    return _check(rng, lambda: T.concat([a, b], axis=0), [a, b])


def check_mean(rng):
    a = _p(rng, 3, 4, 5)
    axis = int(rng.integers(3))
    return _check(rng, lambda: T.mean(a, axis=axis), [a])


def check_transpose(rng):
    a = _p(rng, 3, 5)
    return _check(rng, lambda: T.transpose(a), [a])


def check_expand(rng):
    a = _p(rng, 4, 1, 1)
    return _check(rng, lambda: T.expand(a, (4, 3, 2)), [a])


def check_take(rng):
    a = _p(rng, 5, 6)
    return _check(rng, lambda: T.take(a, slice(1, 4), axis=1), [a])


def check_stack_mean(rng):
    xs = [_p(rng, 3, 3) for _ in range(3)]
    return _check(rng, lambda: T.stack_mean(xs), xs)


def check_matmul(rng):
    a, b = _p(rng, 5, 4), _p(rng, 4, 3)
    return _check(rng, lambda: T.matmul(a, b), [a, b])


def check_masked_softmax(rng):
    x = _p(rng, 4, 6, lo=-3, hi=3)
    bias = np.where(_random_mask(rng, 6) == 1, 0.0, -np.inf)
    return _check(rng, lambda: T.masked_softmax(x, bias), [x])


def check_masked_softmax_first_column(rng):
    x = _p(rng, 4, 5, lo=-3, hi=3)
    return T.grad_check(lambda: T.sum_all(T.take(T.masked_softmax(x), slice(0, 1), axis=1)), [x])


def check_layer_norm(rng):
    x, g, s = _p(rng, 5, 6), _p(rng, 6), _p(rng, 6)
    return _check(rng, lambda: T.layer_norm(x, g, s), [x, g, s])


def check_gelu(rng):
    x = _p(rng, 4, 5, lo=-4, hi=4)
    return _check(rng, lambda: T.gelu(x), [x])


def check_conv2d(rng):
    x, k, b = _p(rng, 2, 6, 6), _p(rng, 3, 2, 3, 3), _p(rng, 3)
    d = int(rng.integers(1, 4))
    return _check(rng, lambda: T.conv2d(x, k, b, dilation=d), [x, k, b])


def check_conv2d_strided(rng):
    x, k = _p(rng, 2, 8, 8), _p(rng, 3, 2, 3, 3)
    return _check(rng, lambda: T.conv2d(x, k, stride=2), [x, k])


def check_conv2d_1x1(rng):
    x, k = _p(rng, 3, 4, 5), _p(rng, 2, 3, 1, 1)
    return _check(rng, lambda: T.conv2d(x, k), [x, k])


def check_bilinear_resize(rng):
    x = _p(rng, 2, 5, 4)
    oh, ow = (int(v) for v in rng.integers(2, 9, size=2))
    return _check(rng, lambda: T.bilinear_resize(x, oh, ow), [x])


def check_l2_normalize(rng):
    x = _p(rng, 5, 4)
    return _check(rng, lambda: T.l2_normalize(x), [x])


def check_softmax_channels(rng):
    x = _p(rng, 2, 3, 4, lo=-3, hi=3)
    return _check(rng, lambda: T.softmax_channels(x), [x])


def check_cross_entropy(rng):
    x = _p(rng, 2, 4, 4, lo=-3, hi=3)
    gt = rng.integers(0, 2, size=(4, 4))
    return T.grad_check(lambda: T.cross_entropy(x, gt), [x])


# ---------------------------------------------------------------------------
# composite checks
# ---------------------------------------------------------------------------

def check_support_branch(rng):
    n, d = 6, 4
    q, k, v = _p(rng, n, d), _p(rng, n, d), _p(rng, n, d)
    mask = build_additive_mask(_random_mask(rng, n))
    return _check(rng, lambda: support_branch_attention(q, k, v, mask), [q, k, v])


def check_query_branch(rng):
    n, d = 6, 4
    q, k, v = _p(rng, n, d), _p(rng, n, d), _p(rng, n, d)
    mask = build_additive_mask(_random_mask(rng, n))
    return _check(rng, lambda: query_branch_attention(q, k, v, mask), [q, k, v])


def check_mlp_block(rng):
    d = 4
    r = _p(rng, 5, d)
    p = {"ln.gain": _p(rng, d), "ln.shift": _p(rng, d), "fc1.weight": _p(rng, d, 2 * d),
         "fc1.bias": _p(rng, 2 * d), "fc2.weight": _p(rng, 2 * d, d), "fc2.bias": _p(rng, d)}
    return _check(rng, lambda: mlp_block(r, p), [r, *p.values()])


def check_masked_average_pool(rng):
    f = _p(rng, 3, 4, 4)
    m = _random_mask(rng, 16).reshape(4, 4)
    return _check(rng, lambda: masked_average_pool(f, m), [f])


def check_similarity_matrix(rng):
    q, s = _p(rng, 4, 4, 4), _p(rng, 4, 4, 4)
    m = _random_mask(rng, 16).reshape(4, 4)
    return _check(rng, lambda: similarity_matrix(q, s, m).scores, [q, s])


def check_mce_forward(rng):
    h, widths = 8, (4, 6, 6)
    enc = MCEEncoder(MCEConfig(widths, token_dim=4, out_channels=3), rng)
    supp = _pyramid(rng, h, widths, requires_grad=True)
    qry = _pyramid(rng, h, widths, requires_grad=True)
    mask = _episode_mask(rng, h)
    params = list(enc.params.values()) + list(supp.values()) + list(qry.values())
    return _check(rng, lambda: mce_forward(enc, supp, qry, mask), params, max_entries=6)


def check_decoder(rng):
    h, c3, cp, cf = 4, 3, 5, 2
    qry = FeaturePyramid({2: T.Tensor(np.zeros((2, 8, 8))), 3: _p(rng, c3, h, h), 4: T.Tensor(np.zeros((2, h, h)))})
    proto = Prototype(_p(rng, cp))
    f_cross = _p(rng, cf, h, h)
    sim = SimilarityMatrix(_p(rng, h, h))
    cfg = HeadConfig(c3 + cp + cf + 1, aspp_channels=3, decoder_channels=4)
    head = init_head(cfg, rng)

    def make():
        x = aspp(assemble(qry, proto, f_cross, sim), head, cfg.aspp_dilations)
        return classify(x, head, (2 * h, 2 * h)).probs

    params = [qry[3], proto.vector, f_cross, sim.scores, *head.values()]
    return _check(rng, make, params, max_entries=6)


_TOY = ModelConfig(backbone_widths=(8, 8, 8), stem_width=8, token_dim=4, cross_channels=4,
                   aspp_channels=4, decoder_channels=4, backbone_frozen=False)


def check_episode_loss(rng, shots: int = 1):
    """End-to-end: image pixels -> trainable backbone -> MCE -> decoder -> loss."""
    h = 16  # 4x4 attention grid
    model = FewShotSegmenter(replace(_TOY, seed=int(rng.integers(1 << 30))))
    support = [(rng.random((3, h, h)), _episode_mask(rng, h)) for _ in range(shots)]
    q_img, q_mask = rng.random((3, h, h)), _episode_mask(rng, h)
    params = model.parameters()
    return T.grad_check(lambda: seg_loss(model.forward(support, q_img), q_mask), params,
                        max_entries=2, rng=rng)


def check_episode_loss_kshot(rng):
    """Two shots exercise the K-shot averaging of guidance."""
    return check_episode_loss(rng, shots=2)


CHECKS: dict[str, Callable[[np.random.Generator], float]] = {
    name[len("check_"):]: fn for name, fn in sorted(globals().items())
    if name.startswith("check_") and callable(fn)
}


def run_suite(instances: int = 10, seed: int = 0, only=None, report: Callable[[str, float, float], None] | None = None):
    """Max relative error per check over ``instances`` random instances."""
    results = {}
    for name, fn in CHECKS.items():
        if only and name not in only:
            continue
        rng = np.random.default_rng([seed, len(name)])
        t0 = time.perf_counter()
        worst = max(fn(rng) for _ in range(instances))
        results[name] = worst
        if report is not None:
            report(name, worst, time.perf_counter() - t0)
    return results
