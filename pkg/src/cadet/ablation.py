"""Method and pyramid-level ablations over several training seeds, with per-run result caching."""

from __future__ import annotations

import copy
import json
import logging
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import ExperimentConfig
from .training import fit, load_data, training_data

log = logging.getLogger(__name__)

# method rows, in table order
METHODS = {
    "no_adapt": {"loss.use_ga": False, "loss.use_ca": False},
    "ga": {"loss.use_ga": True, "loss.use_ca": False},
    "ca": {"loss.use_ga": False, "loss.use_ca": True},
    "ga_ca": {"loss.use_ga": True, "loss.use_ca": True},
}
METHOD_LABELS = {"no_adapt": "w/o adapt.", "ga": "GA", "ca": "CA", "ga_ca": "GA+CA", "oracle": "target oracle"}
ORACLE = {"loss.use_ga": False, "loss.use_ca": False, "train.source_split": "target-train"}
LEVEL_SUBSETS = {"F3-F7": [3, 4, 5, 6, 7], "F5-F7": [5, 6, 7], "F3-F5": [3, 4, 5], "F5": [5]}
METRIC_KEYS = ("map", "map50", "map75", "map_s", "map_m", "map_l")


def apply(cfg: ExperimentConfig, settings: dict) -> ExperimentConfig:
    out = copy.deepcopy(cfg)
    for key, value in settings.items():
        section, name = key.split(".")
        setattr(getattr(out, section), name, value)
    return out.validate()


def run_one(cfg: ExperimentConfig, run_dir: Path, data=None) -> dict:
    """Train and evaluate one configuration; reuses ``result.json`` when its config hash matches."""
    run_dir = Path(run_dir)
    result_path = run_dir / "result.json"
    if result_path.exists():
        with open(result_path) as fh:
            cached = json.load(fh)
        if cached.get("config_hash") == cfg.hash():
            return cached
    if run_dir.exists():
        for stale in run_dir.glob("*"):
            if stale.is_file():
                stale.unlink()
    final = fit(cfg, run_dir, data=data, log_every=0)
    result = {"config_hash": cfg.hash(), "seed": cfg.train.seed, "split": cfg.eval.split, **final["metrics"]}
    with open(result_path, "w") as fh:
        json.dump(result, fh, indent=1)
    return result


def _summarize(results: Sequence[dict]) -> dict:
    out = {"seeds": [r["seed"] for r in results]}
    for k in METRIC_KEYS:
        vals = [r[k] for r in results if r.get(k) is not None]
        out[k] = float(np.mean(vals)) if vals else None
        out[f"{k}_std"] = float(np.std(vals)) if vals else None
        out[f"{k}_per_seed"] = [r.get(k) for r in results]
    return out


def ablate(cfg: ExperimentConfig, out_dir, seeds: Iterable[int] = (0, 1, 2),
           methods: Sequence[str] = tuple(METHODS), level_subsets: Sequence[str] = (),
           oracle: bool = False) -> dict:
    """Run every requested variant for every seed and return the merged comparison table.

    Method rows follow ``METHODS``; the labelled-target reference and the
    level-subset rows (all GA+CA) are reported separately.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = list(seeds)
    data = None

    def get_data():
        nonlocal data
        if data is None:
            data = load_data(cfg, ["source-train", "target-train", cfg.eval.split])
        return data

    def run_variant(name, settings):
        results = []
        for seed in seeds:
            vcfg = apply(cfg, {**settings, "train.seed": seed})
            log.info("running %s seed %d", name, seed)
            results.append(run_one(vcfg, out_dir / f"{name}_seed{seed}", training_data(vcfg, get_data())))
        return _summarize(results)

    table = {"config_hash": cfg.hash(), "split": cfg.eval.split, "seeds": seeds,
             "methods": {}, "reference": {}, "levels": {}}
    for m in methods:
        table["methods"][m] = run_variant(m, METHODS[m])
    if oracle:
        table["reference"]["oracle"] = run_variant("oracle", ORACLE)
    for subset in level_subsets:
        levels = LEVEL_SUBSETS[subset]
        if subset == "F3-F7" and "ga_ca" in table["methods"] and cfg.loss.align_levels == levels:
            table["levels"][subset] = table["methods"]["ga_ca"]
            continue
        table["levels"][subset] = run_variant(f"ga_ca_{subset}", {**METHODS["ga_ca"], "loss.align_levels": levels})

    with open(out_dir / "ablation.json", "w") as fh:
        json.dump(table, fh, indent=1)
    with open(out_dir / "ablation.md", "w") as fh:
        fh.write(format_table(table))
    return table


def _fmt(v) -> str:
    return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{100 * v:.1f}"


def format_table(table: dict) -> str:
    cols = ("map50", "map", "map75", "map_s", "map_m", "map_l")
    header = "| variant | " + " | ".join(cols) + " |\n|---|" + "---|" * len(cols) + "\n"
    lines = [f"split: {table['split']}  seeds: {table['seeds']}  config: {table['config_hash']}\n\n", header]
    for group, labels in (("methods", METHOD_LABELS), ("reference", METHOD_LABELS), ("levels", {})):
        for name, row in table[group].items():
            label = labels.get(name, f"GA+CA {name}")
            cells = [f"{_fmt(row[c])} ± {_fmt(row[c + '_std'])}" if row[c] is not None else "-" for c in cols]
            lines.append(f"| {label} | " + " | ".join(cells) + " |\n")
    return "".join(lines)
