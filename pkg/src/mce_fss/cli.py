"""Command-line entry point: ``mce-fss <command> [options] [--section.key=value ...]``.

Exit codes: 0 success, 1 usage or config error, 2 IO error (missing or
corrupted files), 3 numeric failure (divergence, failed gradient check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as config_mod
from . import gradsuite, imageio
from . import tensor as T
from .data import (CLASS_NAMES, Episode, Sample, generate_dataset, heldout_pool, sample_episode,
                   seed_stream, split_folds)
from .model import FewShotSegmenter
from .train import DivergenceError, evaluate, oracle_predictor, run_ablations, summarize, train, write_csv

log = logging.getLogger("mce_fss")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for IO errors here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration (defaults apply when omitted)")
    common.add_argument("--jobs", type=int, default=1, help="parallel evaluation workers")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="mce-fss", description="Masked cross-image encoding few-shot segmentation.",
                epilog="Any config key can be overridden with --section.key=value, e.g. --train.lr=0.01.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset as PPM/PGM files")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--episodes", type=int, default=0, help="also export this many held-out episodes")

    t = sub.add_parser("train", parents=[common], help="meta-train on one fold")
    t.add_argument("--out", type=Path, required=True, help="directory for model.mcec and loss.csv")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the held-out classes")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--oracle", action="store_true", help="predict the ground truth (protocol sanity check)")
    e.add_argument("--out", type=Path, help="CSV file for the metrics row")

    a = sub.add_parser("ablate", parents=[common], help="train and evaluate the ablation grid")
    a.add_argument("--out", type=Path, required=True, help="CSV with one row per run")

    c = sub.add_parser("gradcheck", parents=[common], help="central-difference gradient suite")
    c.add_argument("--instances", type=int, default=10)
    c.add_argument("--only", nargs="*", help="restrict to these checks")

    r = sub.add_parser("predict", parents=[common], help="segment one exported episode")
    r.add_argument("--checkpoint", type=Path, required=True)
    r.add_argument("--episode", type=Path, required=True, help="directory written by gen-data --episodes")
    r.add_argument("--out", type=Path, required=True)
    return p


def _split_overrides(argv: list[str]) -> tuple[list[str], list[str]]:
    """Separate ``--section.key=value`` / ``--top_level_key=value`` config overrides."""
    top = {f.name for f in dataclasses.fields(config_mod.RunConfig)}
    args, overrides = [], []
    for item in argv:
        key = item[2:].partition("=")[0]
        if item.startswith("--") and "=" in item and ("." in key or key in top):
            overrides.append(item[2:])
        else:
            args.append(item)
    return args, overrides


def _load_config(ns, overrides) -> config_mod.RunConfig:
    cfg = config_mod.load(ns.config) if ns.config else config_mod.RunConfig()
    return config_mod.apply_overrides(cfg, overrides)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _write_sample(folder: Path, stem: str, sample: Sample) -> tuple[str, str]:
    img, mask = f"{stem}.ppm", f"{stem}_mask.pgm"
    imageio.write_ppm(folder / img, sample.image)
    imageio.write_pgm(folder / mask, sample.mask)
    return img, mask


def cmd_gen_data(cfg, ns) -> int:
    ds = generate_dataset(cfg.dataset)
    out: Path = ns.out
    rows = []
    for cls in range(cfg.dataset.n_classes):
        (out / CLASS_NAMES[cls]).mkdir(parents=True, exist_ok=True)
    for s in ds.samples:
        folder = out / CLASS_NAMES[s.class_id]
        img, mask = _write_sample(folder, f"{s.index:05d}", s)
        rows.append({"index": s.index, "class_id": s.class_id, "class_name": CLASS_NAMES[s.class_id],
                     "image": f"{folder.name}/{img}", "mask": f"{folder.name}/{mask}",
                     "present": " ".join(str(c) for c in sorted(s.present))})
    write_csv(out / "index.csv", rows)
    if ns.episodes:
        fold = split_folds(cfg.dataset.n_classes, cfg.n_folds)[cfg.fold]
        rng = seed_stream(cfg.eval.seed, "export")
        pool = heldout_pool(ds, fold)
        for i in range(ns.episodes):
            ep = sample_episode(ds, pool, cfg.shots, rng)
            folder = out / "episodes" / f"ep{i:04d}"
            folder.mkdir(parents=True, exist_ok=True)
            for k, s in enumerate(ep.support):
                _write_sample(folder, f"support{k}", s)
            _write_sample(folder, "query", ep.query)
            meta = {"class_id": ep.class_id, "shots": ep.shots, "support": [s.index for s in ep.support],
                    "query": ep.query.index}
            (folder / "episode.json").write_text(json.dumps(meta, indent=1) + "\n")
    print(f"wrote {len(ds)} samples to {out}")
    return EXIT_OK


def cmd_train(cfg, ns) -> int:
    ds = generate_dataset(cfg.dataset)
    fold = split_folds(cfg.dataset.n_classes, cfg.n_folds)[cfg.fold]
    model = FewShotSegmenter(cfg.model)
    ns.out.mkdir(parents=True, exist_ok=True)

    def progress(it, loss):
        if it % 50 == 0 or it == cfg.train.iterations - 1:
            log.info("iteration %d loss %.4f", it, loss)

    result = train(model, ds, fold, cfg.train, cfg.shots, loss_csv=ns.out / "loss.csv",
                   fingerprint=cfg.fingerprint(), on_step=progress)
    ckpt.save(result.checkpoint, ns.out / "model.mcec")
    (ns.out / "config.yaml").write_text(config_mod.dump(cfg))
    last = result.losses[-1] if result.losses else float("nan")
    print(f"trained {cfg.train.iterations} iterations, final loss {last:.4f}; checkpoint {ns.out / 'model.mcec'}")
    return EXIT_OK


def cmd_eval(cfg, ns) -> int:
    ds = generate_dataset(cfg.dataset)
    fold = split_folds(cfg.dataset.n_classes, cfg.n_folds)[cfg.fold]
    if ns.oracle:
        model, predictor = None, oracle_predictor
    else:
        if ns.checkpoint is None:
            raise UsageError("eval needs --checkpoint unless --oracle is given")
        model, predictor = ckpt.load_checkpoint(ns.checkpoint), None
    rep = evaluate(model, ds, fold, cfg.eval.shots, cfg.eval.episodes, cfg.eval.seed,
                   predictor=predictor, jobs=ns.jobs)
    row = {"fold": fold.index, "shots": cfg.eval.shots, **rep.row()}
    if ns.out:
        write_csv(ns.out, [row])
    print(",".join(row))
    print(",".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in row.values()))
    return EXIT_OK


def cmd_ablate(cfg, ns) -> int:
    ds = generate_dataset(cfg.dataset)
    folds = split_folds(cfg.dataset.n_classes, cfg.n_folds)
    rows = []
    for f in cfg.ablation.folds:
        rows += run_ablations(ds, folds[f], cfg.seeds, cfg.model, cfg.train, cfg.eval,
                              cfg.ablation.variants, cfg.ablation.eval_shots,
                              on_run=lambda r: log.info("%s", r))
        write_csv(ns.out, rows)  # keep partial results
    summary = summarize(rows)
    write_csv(ns.out.with_name(ns.out.stem + "_summary.csv"), summary)
    for r in summary:
        print(f"{r['variant']:>13s} {r['shots']}-shot  mIoU {r['miou_mean']:.4f} +- {r['miou_std']:.4f}  ({r['runs']} runs)")
    return EXIT_OK


def cmd_gradcheck(cfg, ns) -> int:
    unknown = set(ns.only or ()) - set(gradsuite.CHECKS)
    if unknown:
        raise UsageError(f"unknown checks: {', '.join(sorted(unknown))}")

    def report(name, err, secs):
        flag = "ok" if err <= gradsuite.TOLERANCE else "FAIL"
        print(f"{name:32s} {err:.3e}  {flag}  ({secs:.1f}s)", flush=True)

    results = gradsuite.run_suite(ns.instances, only=ns.only, report=report)
    worst = max(results.values())
    print(f"worst relative error {worst:.3e} (tolerance {gradsuite.TOLERANCE:g})")
    return EXIT_OK if worst <= gradsuite.TOLERANCE else EXIT_NUMERIC


def _read_episode(folder: Path) -> Episode:
    meta = json.loads((folder / "episode.json").read_text())

    def sample(stem, index):
        img = imageio.read_pnm(folder / f"{stem}.ppm")
        mask = imageio.read_mask(folder / f"{stem}_mask.pgm")
        return Sample(img, mask, meta["class_id"], frozenset([meta["class_id"]]), index)

    support = [sample(f"support{k}", i) for k, i in enumerate(meta["support"])]
    return Episode(support, sample("query", meta["query"]), meta["class_id"])


def cmd_predict(cfg, ns) -> int:
    model = ckpt.load_checkpoint(ns.checkpoint)
    ep = _read_episode(ns.episode)
    pred = model.predict(ep)
    ns.out.mkdir(parents=True, exist_ok=True)
    imageio.write_ppm(ns.out / "query.ppm", ep.query.image)
    imageio.write_pgm(ns.out / "ground_truth.pgm", ep.query.mask)
    imageio.write_pgm(ns.out / "prediction.pgm", pred)
    inter = int(np.sum(pred & ep.query.mask))
    union = int(np.sum(pred | ep.query.mask))
    print(f"foreground IoU {inter / union if union else 1.0:.4f}; wrote 3 images to {ns.out}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck, "predict": cmd_predict}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args, overrides = _split_overrides(argv)
    try:
        ns = build_parser().parse_args(args)
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if ns.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = _load_config(ns, overrides)
        return COMMANDS[ns.command](cfg, ns)
    except (UsageError, config_mod.ConfigError, T.ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ckpt.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, T.GradCheckError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
