"""Command-line entry point.

Subcommands: ``gen`` (synthesize a dataset), ``train``, ``eval`` (including
cross-dataset), ``gradcheck`` (finite-difference suites), and ``ablate``
(switch grids with shared seeds and data order). Every command is
deterministic given its config and seed; ``--seed`` overrides the config
seed. ``ASARE_THREADS`` caps how many ablation cells run in parallel
processes.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as C
from . import evaluate as E
from . import gradcheck as G
from .data import gen_dataset, load_dataset, make_batch, save_dataset
from .errors import ConfigError
from .model import AsaNet, export_masks
from .train import Trainer, build_model_from_checkpoint


def _load_cfg(args, overrides=None, config_preset: bool = True):
    preset = getattr(args, "preset", None) if config_preset else None
    cfg = C.load_config(getattr(args, "config", None), preset=preset)
    if overrides:
        cfg = C._merge(cfg, overrides)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _apply_ablations(cfg: dict, ablations, fusion) -> dict:
    over = {"model": {}, "loss": {}}
    for name in ablations or ():
        if name == "no-pmi":
            over["loss"]["use_pmi"] = False
        elif name == "no-asre":
            over["model"]["use_asre"] = False
        elif name == "no-bce":
            over["loss"]["use_bce"] = False
        else:
            raise ConfigError(f"unknown ablation switch {name!r}")
    if fusion is not None:
        over["model"]["fusion"] = fusion
    return C._merge(cfg, over)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    overrides = {"data": {}}
    for flag, key in (("identities", "identities"),
                      ("tracklets", "tracklets_per_identity"),
                      ("cameras", "cameras"), ("palette", "palette"),
                      ("unmatched", "unmatched_queries"),
                      ("distractors", "distractors")):
        value = getattr(args, flag)
        if value is not None:
            overrides["data"][key] = value
    cfg = _load_cfg(args, overrides)
    dataset = gen_dataset(cfg["seed"], **C.dataset_kwargs(cfg))
    save_dataset(dataset, args.out)
    print(f"wrote {dataset.num_tracklets} tracklets "
          f"({len(dataset.identities)} identities, "
          f"{cfg['data']['cameras']} cameras) to {args.out}")
    return 0


def _train_one(dataset, cfg: dict, out_dir, resume=None):
    model = AsaNet(C.model_config(cfg, dataset.num_train_identities),
                   seed=cfg["seed"])
    trainer = Trainer(dataset, model, C.loss_weights(cfg), C.optim_config(cfg),
                      C.schedule(cfg), C.train_settings(cfg), out_dir)
    result = trainer.run(resume_from=resume)
    return model, result


def cmd_train(args) -> int:
    cfg = _apply_ablations(_load_cfg(args), args.ablation, args.fusion)
    if args.epochs is not None:
        cfg["schedule"]["epochs"] = args.epochs
        cfg["schedule"]["decay_epochs"] = [
            e for e in cfg["schedule"]["decay_epochs"] if e < args.epochs
        ]
    dataset = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)
    _, result = _train_one(dataset, cfg, out, resume=args.resume)
    print(f"trained {result.epochs} epochs ({result.steps} steps); "
          f"checkpoint at {result.checkpoint_dir}")
    print(f"final losses: total={result.final_losses.get('total', float('nan')):.4f} "
          f"bce={result.final_losses.get('bce', float('nan')):.4f}")
    return 0


def cmd_eval(args) -> int:
    model, _, _ = build_model_from_checkpoint(args.checkpoint)
    dataset = load_dataset(args.cross_dataset if args.cross_dataset else args.data)
    kwargs = dict(setup=args.setup, same_camera_rule=not args.no_camera_rule,
                  metric=args.metric, seed=args.seed if args.seed is not None else 99)
    if args.cross_dataset:
        result = E.cross_dataset_eval(model, dataset, **kwargs)
    else:
        result = E.evaluate_dataset(model, dataset, **kwargs)
    metrics = E.export_results(result, args.out)
    if args.export_features:
        for split in ("query", "gallery"):
            fs = E.extract_features(model, dataset, split, seed=kwargs["seed"])
            E.save_features(fs, Path(args.out) / f"features_{split}")
    if args.export_masks:
        indices = dataset.split("query")[: args.export_masks]
        if indices and model.config.use_asre:
            batch = make_batch(dataset, indices, model.config.frames_per_clip,
                               np.random.default_rng(kwargs["seed"]))
            model.eval_mode()
            out = model.forward_batch(batch.frames)
            export_masks(out.masks, batch.tracklet_ids.tolist(), args.out)
    print(f"evaluated {result.num_queries_evaluated}/{result.num_queries_total} "
          f"queries ({args.setup} setup): mAP={metrics['mAP']:.4f} "
          f"rank1={metrics['cmc']['1']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for name, err in G.run_scope(args.scope):
        status = "PASS" if err <= G.TOLERANCE else "FAIL"
        print(f"{args.scope}/{name}: max rel err {err:.3e} [{status}]")
        worst = max(worst, err)
    return 0 if worst <= G.TOLERANCE else 1


ABLATE_PRESETS = {
    # Table-4 style: branch subsets, enhanced features only (no attribute
    # features in the fusion), enhancement and PMI both active.
    "branches": [
        {"key": "+".join(subset) or "none",
         "model": {"branches": list(subset), "fuse_attributes": False}}
        for size in (1, 2, 3)
        for subset in itertools.combinations(("identity", "re", "ir"), size)
    ],
    # Table-5 style: fusion strategy x enhancement x PMI grid.
    "asre-pmi": [
        {"key": f"fusion-{f}{'+asre' if a else ''}{'+pmi' if p else ''}",
         "model": {"fusion": f, "use_asre": a},
         "loss": {"use_pmi": p}}
        for f in ("a", "b") for a in (False, True) for p in (False, True)
    ],
    # Table-6 style: attribute supervision on/off.
    "bce": [
        {"key": "no-bce", "loss": {"use_bce": False}},
        {"key": "with-bce", "loss": {"use_bce": True}},
    ],
}


def _run_ablate_cell(payload: tuple) -> dict:
    data_dir, cfg, cell, seed, out_dir = payload
    cfg = C._merge(cfg, {k: v for k, v in cell.items() if k != "key"})
    cfg["seed"] = seed
    dataset = load_dataset(data_dir)
    model, _ = _train_one(dataset, cfg, Path(out_dir) / f"{cell['key']}_s{seed}")
    result = E.evaluate_dataset(
        model, dataset, setup=cfg["eval"]["setup"],
        same_camera_rule=cfg["eval"]["same_camera_rule"],
        metric=cfg["eval"]["metric"], seed=cfg["eval"]["seed"])
    cmc = result.cmc

    def at(rank):
        return float(cmc[min(rank - 1, len(cmc) - 1)])

    return {"config": cell["key"], "seed": seed, "mAP": result.mean_ap,
            "rank1": at(1), "rank5": at(5), "rank20": at(20)}


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args, config_preset=False)  # --preset names the grid here
    if args.epochs is not None:
        cfg["schedule"]["epochs"] = args.epochs
        cfg["schedule"]["decay_epochs"] = [
            e for e in cfg["schedule"]["decay_epochs"] if e < args.epochs
        ]
    cells = ABLATE_PRESETS[args.preset]
    seeds = args.seeds or [cfg["seed"]]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payloads = [(args.data, cfg, cell, seed, str(out / "runs"))
                for cell in cells for seed in seeds]
    threads = int(os.environ.get("ASARE_THREADS", "1"))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_run_ablate_cell, payloads))
    else:
        rows = [_run_ablate_cell(p) for p in payloads]
    rows.sort(key=lambda r: (r["config"], r["seed"]))
    table = out / f"ablation_{args.preset}.csv"
    with open(table, "w") as fh:
        fh.write("config,seed,mAP,rank1,rank5,rank20\n")
        for r in rows:
            fh.write(f"{r['config']},{r['seed']},{r['mAP']:.6f},"
                     f"{r['rank1']:.6f},{r['rank5']:.6f},{r['rank20']:.6f}\n")
    print(f"wrote {len(rows)} rows to {table}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asanet",
        description="Attribute-assisted video re-identification on synthetic sequences",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--preset", choices=("smoke",))
    p.add_argument("--seed", type=int)
    p.add_argument("--identities", type=int)
    p.add_argument("--tracklets", type=int)
    p.add_argument("--cameras", type=int)
    p.add_argument("--palette", choices=("a", "b"))
    p.add_argument("--unmatched", type=int)
    p.add_argument("--distractors", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--preset", choices=("smoke",))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--ablation", action="append",
                   choices=("no-pmi", "no-asre", "no-bce"))
    p.add_argument("--fusion", choices=("a", "b"))
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--setup", choices=("usual", "mixing"), default="usual")
    p.add_argument("--metric", choices=("cosine", "euclidean"), default="cosine")
    p.add_argument("--no-camera-rule", action="store_true")
    p.add_argument("--cross-dataset", help="evaluate against this other dataset")
    p.add_argument("--export-masks", type=int, default=0,
                   help="export saliency masks for the first N query tracklets")
    p.add_argument("--export-features", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--scope", choices=sorted(G.SUITES), default="ops")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score a switch grid")
    p.add_argument("--preset", choices=sorted(ABLATE_PRESETS), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
