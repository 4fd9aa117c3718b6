"""Command-line entry point: generate-data, train, evaluate, visualize, ablate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import PUBLISHED_DEFAULTS, ConfigError, ExperimentConfig, dump_config, load_config
from .synth import SPLITS, DatasetError, SplitData, make_split, read_split, write_dataset
from .training import DataError, NumericError, evaluate_split, fit, load_checkpoint, load_data

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

log = logging.getLogger("cadet")


def _defaults_help() -> str:
    cfg = ExperimentConfig().to_dict()
    lines = ["configuration keys and defaults ([published] = reported setting, others desk defaults):"]
    for section, values in cfg.items():
        for key, value in values.items():
            tag = "[published]" if f"{section}.{key}" in PUBLISHED_DEFAULTS else ""
            lines.append(f"  {section}.{key} = {value!r} {tag}".rstrip())
    return "\n".join(lines)


def _config(args, extra=()) -> ExperimentConfig:
    overrides = list(args.set or []) + list(extra)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    return load_config(args.config, overrides)


def cmd_generate(args) -> int:
    extra = [f"data.seed={args.seed}"] if args.seed is not None else []
    args.seed = None
    cfg = _config(args, extra)
    d = cfg.data
    params = d.gen_params()
    counts = d.split_counts()
    splits = []
    for name in SPLITS:
        images, anns = make_split(name, counts[name], d.seed, params, args.workers)
        splits.append(SplitData(name, images, anns))
    meta = {"data_hash": cfg.data_hash(), "config_hash": cfg.hash(), "seed": d.seed}
    write_dataset(args.out, splits, meta)
    dump_config(cfg, Path(args.out) / "config.yaml")
    print(json.dumps({"out": str(args.out), "splits": counts, **meta}))
    return 0


def cmd_train(args) -> int:
    extra = [f"data.root={args.data}"] if args.data else []
    cfg = _config(args, extra)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    final = fit(cfg, out, resume=args.resume)
    print(json.dumps({"out": str(out), "config_hash": cfg.hash(), "seed": cfg.train.seed,
                      "metrics": final.get("metrics")}))
    return 0


def cmd_evaluate(args) -> int:
    state, cfg = load_checkpoint(args.checkpoint)
    if args.data:
        cfg.data.root = args.data
    split = args.split or cfg.eval.split
    if cfg.data.root:
        data = read_split(cfg.data.root, split)
    else:
        data = load_data(cfg, [split])[split]
    report = evaluate_split(state.model, data, cfg)
    record = {"kind": "evaluate", "checkpoint": str(args.checkpoint), "step": state.step, "split": split,
              "metrics": report.to_record(), "config_hash": cfg.hash(), "seed": cfg.train.seed}
    text = json.dumps(record)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "a") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_visualize(args) -> int:
    from PIL import Image

    from .evaluation import export_response_maps

    state, cfg = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    written = []
    if args.images:
        sources = [(Path(p).stem, np.asarray(Image.open(p).convert("RGB"))) for p in args.images]
    else:
        if args.data:
            cfg.data.root = args.data
        split = args.split or cfg.eval.split
        sp = read_split(cfg.data.root, split) if cfg.data.root else load_data(cfg, [split])[split]
        sources = [(a.image_id, img) for a, img in zip(sp.annotations[:args.count], sp.images[:args.count])]
    for stem, img in sources:
        written += export_response_maps(state.model, img, out, stem, cfg.loss.delta)
        Image.fromarray(np.asarray(img, dtype=np.uint8)).save(out / f"{stem}_input.png")
    with open(out / "manifest.json", "w") as fh:
        json.dump({"checkpoint": str(args.checkpoint), "config_hash": cfg.hash(), "seed": cfg.train.seed,
                   "maps": [p.name for p in written]}, fh, indent=1)
    print(json.dumps({"out": str(out), "maps": len(written)}))
    return 0


def cmd_ablate(args) -> int:
    from .ablation import ablate, format_table

    extra = [f"data.root={args.data}"] if args.data else []
    cfg = _config(args, extra)
    table = ablate(cfg, args.out, seeds=args.seeds, methods=args.methods,
                   level_subsets=args.levels or (), oracle=args.oracle)
    print(format_table(table))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cadet", description="Center-aware domain-adaptive anchor-free detection on synthetic shapes.",
        formatter_class=argparse.RawDescriptionHelpFormatter, epilog=_defaults_help(),
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_help="training seed (train.seed)"):
        sp.add_argument("--config", help="YAML config file (defaults < file < --set)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted override, e.g. --set train.total_steps=500 (repeatable)")
        sp.add_argument("--seed", type=int, help=seed_help)

    g = sub.add_parser("generate-data", help="write the four synthetic splits to disk")
    common(g, "dataset seed (data.seed)")
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--workers", type=int, default=1, help="generator processes (default 1)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one model; writes checkpoints and metrics.jsonl")
    common(t)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--data", help="dataset directory (otherwise generated in memory)")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="mAP suite of a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=SPLITS, help="default: eval.split of the checkpoint config")
    e.add_argument("--data", help="dataset directory (otherwise regenerated from the stored config)")
    e.add_argument("--out", help="append the record to this JSON-lines file")
    e.set_defaults(func=cmd_evaluate)

    v = sub.add_parser("visualize", help="export center-aware response maps per pyramid level")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--images", nargs="*", help="image files; otherwise the first --count images of --split")
    v.add_argument("--split", choices=SPLITS)
    v.add_argument("--data", help="dataset directory")
    v.add_argument("--count", type=int, default=4)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_visualize)

    a = sub.add_parser("ablate", help="method rows (w/o adapt., GA, CA, GA+CA) and level subsets over seeds")
    common(a)
    a.add_argument("--out", required=True)
    a.add_argument("--data", help="dataset directory")
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.add_argument("--methods", nargs="+", default=["no_adapt", "ga", "ca", "ga_ca"],
                   choices=["no_adapt", "ga", "ca", "ga_ca"])
    a.add_argument("--levels", nargs="*", choices=["F3-F7", "F5-F7", "F3-F5", "F5"],
                   help="GA+CA level subsets to add")
    a.add_argument("--oracle", action="store_true", help="add the labelled-target reference row")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
