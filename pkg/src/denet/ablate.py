"""Ablation suites: train each variant on the same data with shared seeds and tabulate."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from denet.data import Example, SceneSpec, dataset_hash, gen_dataset, load_dataset
from denet.metrics import evaluate_masks
from denet.network import NetworkConfig
from denet.train import OptimConfig, RunConfig, binarize, predict_probs, split_indices, train

# Reference desk experiment: 20 scenes, the last 4 held out, 50 epochs.
REFERENCE_COUNT = 20
REFERENCE_VAL_FRACTION = 0.2
REFERENCE_DATA_SEED = 0


def reference_run(seed: int = 0, data_dir: Optional[str] = None) -> RunConfig:
    return RunConfig(network=NetworkConfig(), optim=OptimConfig(val_fraction=REFERENCE_VAL_FRACTION),
                     data_dir=data_dir, seed=seed)


def reference_dataset(directory) -> str:
    gen_dataset(directory, REFERENCE_COUNT, SceneSpec(), REFERENCE_DATA_SEED)
    return dataset_hash(directory)


SUITES: dict[str, tuple[tuple[str, dict], ...]] = {
    "core": (
        ("baseline", {"er_stages": 0, "bim_enabled": False}),
        ("w/o Multi-ER", {"er_stages": 0}),
        ("w/o BIM", {"bim_enabled": False}),
        ("full", {}),
    ),
    "bim": (
        ("w/o global", {"bim_global": False}),
        ("w/o local", {"bim_local": False}),
        ("w/o Gaussian bias", {"gaussian_bias": False}),
        ("full", {}),
    ),
    "fusion": (
        ("co_attention", {"fusion_mode": "co_attention"}),
        ("merged_attention", {"fusion_mode": "merged_attention"}),
        ("bim", {"fusion_mode": "bim"}),
    ),
    "stages": tuple((f"{k} ER", {"er_stages": k}) for k in range(4)),
}

DEFAULT_SEEDS = (0, 1, 2)
TABLE_HEADER = ("suite", "config", "seed", "miou", "niou", "pd", "fa_e6", "best_val_miou", "dataset_hash")


@dataclass
class TrialResult:
    suite: str
    config: str
    seed: int
    miou: float
    niou: float
    pd: float
    fa_e6: float
    best_val_miou: float
    dataset_hash: str


def variant(run: RunConfig, overrides: dict, seed: int) -> RunConfig:
    return replace(run, network=replace(run.network, **overrides), seed=seed, out_dir=None)


def trial_key(run: RunConfig, data_hash: str) -> str:
    return json.dumps({"run": run.to_dict(), "data": data_hash}, sort_keys=True)


def run_trial(run: RunConfig, examples: Sequence[Example], data_hash: str,
              cache: Optional[dict] = None) -> dict:
    """Train once and score the final model on the validation split.

    ``cache`` lets suites that share a configuration (e.g. "full") reuse
    a finished run instead of repeating it.
    """
    key = trial_key(run, data_hash)
    if cache is not None and key in cache:
        return cache[key]
    result = train(run, examples)
    _, val_idx = split_indices(len(examples), run.optim.val_fraction)
    val = [examples[i] for i in val_idx]
    images = np.stack([e.image for e in val]).astype(result.model.config.np_dtype)
    probs = list(predict_probs(result.model, images))
    preds = [binarize(p, 0.5) for p in probs]
    report = evaluate_masks(preds, [e.mask for e in val], probs)
    out = {"miou": report.miou, "niou": report.niou, "pd": report.pd, "fa_e6": report.fa_e6,
           "best_val_miou": result.best_miou, "history": result.history, "seconds": result.seconds}
    if cache is not None:
        cache[key] = out
    return out


def ablate(run: RunConfig, suite: str, examples: Optional[Sequence[Example]] = None,
           seeds: Sequence[int] = DEFAULT_SEEDS, cache: Optional[dict] = None,
           log: Optional[Callable[[str], None]] = None) -> list[TrialResult]:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    if run.data_dir is None:
        raise ValueError("ablation needs run.data_dir")
    data_hash = dataset_hash(run.data_dir)
    if examples is None:
        examples = load_dataset(run.data_dir)
    rows = []
    for name, overrides in SUITES[suite]:
        for seed in seeds:
            res = run_trial(variant(run, overrides, seed), examples, data_hash, cache)
            row = TrialResult(suite, name, seed, res["miou"], res["niou"], res["pd"], res["fa_e6"],
                              res["best_val_miou"], data_hash)
            if log is not None:
                log(f"{suite:7s} {name:18s} seed {seed} miou {row.miou:.4f} niou {row.niou:.4f} "
                    f"pd {row.pd:.3f} fa_e6 {row.fa_e6:.1f}")
            rows.append(row)
    return rows


def table_csv(rows: Sequence[TrialResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    for r in rows:
        w.writerow([r.suite, r.config, r.seed, f"{r.miou:.6f}", f"{r.niou:.6f}", f"{r.pd:.6f}",
                    f"{r.fa_e6:.3f}", f"{r.best_val_miou:.6f}", r.dataset_hash])
    return buf.getvalue()


def summary_csv(rows: Sequence[TrialResult]) -> str:
    """One line per configuration (the table's row structure) with medians over seeds."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("config", "seeds", "median_miou", "median_niou", "median_pd", "median_fa_e6"))
    for name in dict.fromkeys(r.config for r in rows):
        sel = [r for r in rows if r.config == name]
        w.writerow([name, len(sel)] + [f"{np.median([getattr(r, k) for r in sel]):.6f}"
                                       for k in ("miou", "niou", "pd", "fa_e6")])
    return buf.getvalue()


def write_table(path, rows: Sequence[TrialResult]) -> None:
    Path(path).write_text(table_csv(rows))
