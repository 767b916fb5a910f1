"""Procedural shape x texture segmentation data and the episodic fold protocol.

Eight classes: shape in {disk, square, triangle, ring} x texture in
{solid, striped}; ``class_id = 2 * shape + texture``. Every sample is a
cluttered background, zero to two distractor objects of other classes and
one target object drawn on top; the mask covers the target only. Object
colours are near-gray with random intensity, so shape and texture are the
only class cues.

Each distractor is, with probability ``sibling_rate``, the target's sibling
class (same shape, other texture); otherwise a uniformly random other class.
Siblings share a fold, so a held-out query usually contains a second novel
object and only the support guidance tells the two apart.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import ContractError

SHAPES = ("disk", "square", "triangle", "ring")
TEXTURES = ("solid", "striped")
CLASS_NAMES = tuple(f"{s}_{t}" for s in SHAPES for t in TEXTURES)
MIN_FG_PIXELS = 16


def seed_stream(seed: int, purpose: str) -> np.random.Generator:
    """Independent RNG per (seed, purpose), e.g. "dataset", "sampler", "eval"."""
    tag = int.from_bytes(hashlib.sha256(purpose.encode()).digest()[:4], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


@dataclass(frozen=True)
class SyntheticTaskConfig:
    image_size: int = 64
    samples_per_class: int = 60
    n_classes: int = 8
    distractors: tuple[int, int] = (0, 2)
    radius: tuple[float, float] = (0.16, 0.26)  # fraction of image size
    stripe_period: float = 0.1                  # fraction of image size
    noise: float = 0.03
    tint: float = 0.05
    sibling_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "distractors", tuple(self.distractors))
        object.__setattr__(self, "radius", tuple(self.radius))
        if self.image_size % 4:
            raise ContractError("image_size must be divisible by 4")
        if not 2 <= self.n_classes <= len(CLASS_NAMES):
            raise ContractError(f"n_classes must be in [2, {len(CLASS_NAMES)}]")
        lo, hi = self.radius
        if not 0 < lo <= hi:
            raise ContractError(f"invalid radius range {self.radius}")
        if 2 * hi >= 1.0:
            raise ContractError("objects would be larger than the image")
        if np.pi * (0.45 * lo * self.image_size) ** 2 < MIN_FG_PIXELS:
            raise ContractError("objects are too small to guarantee a usable mask")
        if not 0.0 <= self.sibling_rate <= 1.0:
            raise ContractError("sibling_rate must be in [0, 1]")
        if self.distractors[0] < 0 or self.distractors[1] < self.distractors[0]:
            raise ContractError(f"invalid distractor range {self.distractors}")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Sample:
    image: np.ndarray          # 3 x H x W in [0, 1]
    mask: np.ndarray           # H x W, uint8 {0, 1}
    class_id: int
    present: frozenset         # every class drawn in the image (target + distractors)
    index: int
    key: tuple = field(default=(), repr=False)


@dataclass
class Episode:
    support: list[Sample]
    query: Sample
    class_id: int

    @property
    def shots(self) -> int:
        return len(self.support)


@dataclass
class Dataset:
    cfg: SyntheticTaskConfig
    samples: list[Sample]

    def by_class(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {c: [] for c in range(self.cfg.n_classes)}
        for s in self.samples:
            out[s.class_id].append(s.index)
        return out

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _shape_mask(shape: str, yy, xx, cy, cx, r, theta) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    if shape == "disk":
        return u ** 2 + v ** 2 <= r ** 2
    if shape == "ring":
        d2 = u ** 2 + v ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if shape == "square":
        s = 0.8 * r
        return (np.abs(u) <= s) & (np.abs(v) <= s)
    if shape == "triangle":
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = theta + np.pi / 2 + 2 * np.pi * k / 3
            # each edge sits at the inradius r/2 from the centre
            inside &= (dx * np.cos(a) + dy * np.sin(a)) <= 0.5 * r
        return inside
    raise ValueError(shape)


def _paint(img, yy, xx, cls, cfg, rng, cy, cx, r) -> np.ndarray:
    shape = SHAPES[cls // 2]
    striped = TEXTURES[cls % 2] == "striped"
    theta = rng.uniform(0, 2 * np.pi)
    m = _shape_mask(shape, yy, xx, cy, cx, r, theta)
    # near-gray colours: intensity varies, hue barely does
    color = rng.uniform(0.55, 1.0) + rng.uniform(-cfg.tint, cfg.tint, size=3)
    if striped:
        phi = rng.uniform(0, np.pi)
        period = max(4.0, cfg.stripe_period * cfg.image_size)
        band = np.floor((xx * np.cos(phi) + yy * np.sin(phi)) / (period / 2)) % 2
        shade = np.where(band == 0, 1.0, 0.3)
    else:
        shade = np.ones_like(yy)
    for ch in range(3):
        img[ch][m] = (color[ch] * shade)[m]
    return m


def _render(cls: int, cfg: SyntheticTaskConfig, rng: np.random.Generator):
    n = cfg.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    # smooth clutter: random linear gradient plus blocky low-frequency noise
    gy, gx = rng.uniform(-0.15, 0.15, size=2)
    base = rng.uniform(0.1, 0.3, size=3)
    coarse = rng.uniform(-0.08, 0.08, size=(3, 4, 4))
    blocks = np.kron(coarse, np.ones((n // 4, n // 4)))
    img = base[:, None, None] + gy * (yy / n - 0.5) + gx * (xx / n - 0.5) + blocks
    lo, hi = cfg.radius
    r_t = rng.uniform(lo, hi) * n
    cy_t, cx_t = rng.uniform(r_t, n - r_t, size=2)
    n_dis = int(rng.integers(cfg.distractors[0], cfg.distractors[1] + 1))
    others = [c for c in range(cfg.n_classes) if c != cls]
    present = {cls}
    placed = [(cy_t, cx_t, r_t)]
    for _ in range(n_dis):
        sibling = cls ^ 1
        if sibling < cfg.n_classes and rng.random() < cfg.sibling_rate:
            c = sibling
        else:
            c = int(rng.choice(others))
        for _attempt in range(30):
            r = rng.uniform(lo, hi) * n
            cy, cx = rng.uniform(r, n - r, size=2)
            if all(np.hypot(cy - py, cx - px) > r + pr for py, px, pr in placed):
                break
        else:
            continue
        _paint(img, yy, xx, c, cfg, rng, cy, cx, r)
        placed.append((cy, cx, r))
        present.add(c)
    target = _paint(img, yy, xx, cls, cfg, rng, cy_t, cx_t, r_t)
    img = img + rng.normal(0.0, cfg.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0), target.astype(np.uint8), frozenset(present)


def generate_dataset(cfg: SyntheticTaskConfig = SyntheticTaskConfig()) -> Dataset:
    """Deterministic dataset: ``samples_per_class`` samples for every class."""
    rng = seed_stream(cfg.seed, "dataset")
    token = cfg.fingerprint()
    samples = []
    for cls in range(cfg.n_classes):
        for _ in range(cfg.samples_per_class):
            while True:
                img, mask, present = _render(cls, cfg, rng)
                if mask.sum() >= MIN_FG_PIXELS:
                    break
            idx = len(samples)
            samples.append(Sample(img, mask, cls, present, idx, (token, idx)))
    return Dataset(cfg, samples)


# ---------------------------------------------------------------------------
# folds and episodes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldSplit:
    index: int
    train_classes: tuple[int, ...]
    test_classes: tuple[int, ...]


def split_folds(n_classes: int = 8, n_folds: int = 4) -> list[FoldSplit]:
    if n_folds < 1 or n_classes % n_folds:
        raise ContractError(f"{n_classes} classes cannot be split evenly into {n_folds} folds")
    per = n_classes // n_folds
    folds = []
    for i in range(n_folds):
        test = tuple(range(i * per, (i + 1) * per))
        train = tuple(c for c in range(n_classes) if c not in test)
        folds.append(FoldSplit(i, train, test))
    return folds


def train_pool(dataset: Dataset, fold: FoldSplit) -> dict[int, list[int]]:
    """Training samples per class, excluding any image showing a test class."""
    test = set(fold.test_classes)
    pool = {c: [] for c in fold.train_classes}
    for s in dataset.samples:
        if s.class_id in pool and not (s.present & test):
            pool[s.class_id].append(s.index)
    return pool


def heldout_pool(dataset: Dataset, fold: FoldSplit) -> dict[int, list[int]]:
    pool = {c: [] for c in fold.test_classes}
    for s in dataset.samples:
        if s.class_id in pool:
            pool[s.class_id].append(s.index)
    return pool


def sample_episode(dataset: Dataset, class_pool: dict[int, list[int]], shots: int,
                   rng: np.random.Generator) -> Episode:
    """Uniform class, then ``shots + 1`` distinct samples of it."""
    if shots < 1:
        raise ContractError("shots must be >= 1")
    classes = sorted(c for c, idx in class_pool.items() if idx)
    if not classes:
        raise ContractError("class pool is empty")
    cls = classes[int(rng.integers(len(classes)))]
    idx = class_pool[cls]
    if len(idx) < shots + 1:
        raise ContractError(f"class {cls} has {len(idx)} samples, need {shots + 1}")
    pick = rng.choice(len(idx), size=shots + 1, replace=False)
    chosen = [dataset[idx[i]] for i in pick]
    return Episode(chosen[:-1], chosen[-1], cls)


def leaked_samples(dataset: Dataset, fold: FoldSplit) -> list[int]:
    """Indices reachable from the training sampler that show a test class."""
    test = set(fold.test_classes)
    return [i for idx in train_pool(dataset, fold).values() for i in idx
            if dataset[i].present & test or dataset[i].class_id in test]
