"""Episodic SGD training, evaluation and ablation sweeps."""

from __future__ import annotations

import csv
import logging
import math
import multiprocessing as mp
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import checkpoint as ckpt
from .data import Dataset, FoldSplit, heldout_pool, sample_episode, seed_stream, train_pool
from .metrics import IoUAccumulator, MetricsReport
from .model import ABLATIONS, FewShotSegmenter, ModelConfig

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.0025
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch: int = 4
    iterations: int = 2000
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 1000
    shots: int = 1
    seed: int = 0


class SGD:
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: Sequence, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v


@dataclass
class TrainResult:
    checkpoint: ckpt.Checkpoint
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def write_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def train(model: FewShotSegmenter, dataset: Dataset, fold: FoldSplit, opt: TrainConfig = TrainConfig(),
          shots: int = 1, loss_csv=None, fingerprint: int = 0,
          on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Meta-train on ``fold.train_classes`` and return the final checkpoint."""
    pool = train_pool(dataset, fold)
    rng = seed_stream(opt.seed, "sampler")
    sgd = SGD(model.parameters(), opt.lr, opt.momentum, opt.weight_decay)
    losses: list[float] = []
    t0 = time.perf_counter()
    for it in range(opt.iterations):
        sgd.zero_grad()
        total = 0.0
        for _ in range(opt.batch):
            episode = sample_episode(dataset, pool, shots, rng)
            loss = model.episode_loss(episode)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"loss is {value} at iteration {it} (previous {losses[-3:]})")
            total += value
            # backprop the batch mean
            loss.backward(np.asarray(1.0 / opt.batch, dtype=loss.data.dtype))
        sgd.step()
        losses.append(total / opt.batch)
        if on_step is not None:
            on_step(it, losses[-1])
    elapsed = time.perf_counter() - t0
    if loss_csv is not None:
        write_csv(loss_csv, [{"iteration": i, "loss": v} for i, v in enumerate(losses)])
    return TrainResult(ckpt.from_model(model, fingerprint), losses, elapsed)


def evaluate(model: FewShotSegmenter | None, dataset: Dataset, fold: FoldSplit, shots: int = 1,
             n_episodes: int = 1000, seed: int = 0,
             predictor: Callable | None = None, episodes: Iterable | None = None,
             jobs: int = 1) -> MetricsReport:
    """Accumulated per-class IoU, mIoU and FB-IoU over test-class episodes.

    ``predictor(episode) -> mask`` overrides the model (e.g. a ground-truth
    oracle). ``episodes`` overrides sampling. With ``jobs > 1`` predictions
    run in forked worker processes; counts are integers, so the report is
    identical to the serial one.
    """
    if predictor is None:
        predictor = model.predict
    if episodes is None:
        pool = heldout_pool(dataset, fold)
        rng = seed_stream(seed, "eval")
        episodes = (sample_episode(dataset, pool, shots, rng) for _ in range(n_episodes))
    acc = IoUAccumulator()
    if jobs > 1 and "fork" in mp.get_all_start_methods():
        episodes = list(episodes)
        global _PREDICTOR
        _PREDICTOR = predictor
        try:
            with mp.get_context("fork").Pool(jobs) as workers:
                masks = workers.map(_predict_one, episodes, chunksize=max(1, len(episodes) // (4 * jobs)))
        finally:
            _PREDICTOR = None
        for ep, mask in zip(episodes, masks):
            acc.add(ep.class_id, mask, ep.query.mask)
    else:
        for ep in episodes:
            acc.add(ep.class_id, predictor(ep), ep.query.mask)
    return acc.report(seed)


_PREDICTOR: Callable | None = None


def _predict_one(episode):
    return _PREDICTOR(episode)


def oracle_predictor(episode) -> np.ndarray:
    return episode.query.mask


def run_ablations(dataset: Dataset, fold: FoldSplit, seeds: Sequence[int], model_cfg: ModelConfig = ModelConfig(),
                  opt: TrainConfig = TrainConfig(), eval_cfg: EvalConfig = EvalConfig(),
                  variants: Sequence[str] = tuple(ABLATIONS), eval_shots: Sequence[int] = (1,),
                  csv_path=None, on_run: Callable[[dict], None] | None = None) -> list[dict]:
    """Train and evaluate each ablation variant for each seed (1-shot training).

    One row per (variant, seed, eval shots). The model seed, sampler seed
    and evaluation seed all follow the run seed.
    """
    rows = []
    for name in variants:
        for seed in seeds:
            cfg = replace(model_cfg.ablation(name), seed=seed)
            model = FewShotSegmenter(cfg)
            result = train(model, dataset, fold, replace(opt, seed=seed))
            for k in eval_shots:
                rep = evaluate(model, dataset, fold, k, eval_cfg.episodes, seed)
                row = {"variant": name, "fold": fold.index, "seed": seed, "shots": k,
                       "miou": rep.miou, "fb_iou": rep.fb_iou, "episodes": rep.episodes,
                       "final_loss": float(np.mean(result.losses[-20:])) if result.losses else float("nan"),
                       "train_seconds": round(result.seconds, 1)}
                rows.append(row)
                log.info("%s", row)
                if on_run is not None:
                    on_run(row)
            model.clear_cache()
    if csv_path is not None:
        write_csv(csv_path, rows)
    return rows


def summarize(rows: list[dict], by=("variant", "shots")) -> list[dict]:
    """Mean and standard deviation of mIoU grouped by ``by``."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in by), []).append(r["miou"])
    out = []
    for key, vals in groups.items():
        row = dict(zip(by, key))
        row.update({"miou_mean": float(np.mean(vals)), "miou_std": float(np.std(vals)), "runs": len(vals)})
        out.append(row)
    return out
