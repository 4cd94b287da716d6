"""Ablation harness: train each variant per seed and tabulate the metrics.

Variants: "full" keeps everything; "no_G" swaps graph-biased attention for
vanilla self-attention; "no_R" strips retrieved summaries from the teacher
prompts; "no_L" replaces the language-model teacher with query/neighbor
embedding averaging; "no_D" stops after warm-up. Variants sharing the same
backbone and seed reuse one warm-up run.
"""
from __future__ import annotations

import csv
import json
import logging
import statistics
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .losses import LossWeights
from .llm import MockLLMClient
from .model import ModelConfig, build_model
from .pipeline import build_evidence_index, collect_teacher_records
from .index import build_index
from .synth import PatchTruth
from .train import (
    ABLATION_MODES,
    PreparedData,
    TrainConfig,
    TrainResult,
    distill_train,
    evaluate,
    warmup_train,
)

logger = logging.getLogger(__name__)

METRIC_KEYS = ("pr_auc", "f1", "recall_at_0.1fpr", "fpr_at_0.9recall")


@dataclass
class AblationSetup:
    """Everything one variant run needs besides (mode, seed)."""

    train_data: PreparedData
    val_data: PreparedData
    test_data: PreparedData
    truth: PatchTruth
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    weights: LossWeights
    select_threshold: float = 0.5
    slot_seconds: float = 100.0


@dataclass
class ModeOutcome:
    mode: str
    seed: int
    metrics: dict[str, float]
    model: object  # the evaluated checkpoint's model


def run_mode(
    setup: AblationSetup,
    mode: str,
    seed: int,
    warm_cache: dict[tuple[int, bool], TrainResult] | None = None,
) -> ModeOutcome:
    """Train one variant end to end; returns its test metrics and model."""
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}")
    graph_bias = mode != "no_G"
    model_cfg = replace(setup.model_cfg, graph_bias=graph_bias)
    train_cfg = replace(setup.train_cfg, seed=seed, ablation=mode)

    cache_key = (seed, graph_bias)
    if warm_cache is not None and cache_key in warm_cache:
        warm = warm_cache[cache_key]
    else:
        model = build_model(model_cfg, seed)
        warm = warmup_train(model, setup.train_data, setup.val_data,
                            train_cfg)
        if warm_cache is not None:
            warm_cache[cache_key] = warm

    if mode == "no_D":
        return ModeOutcome(mode, seed, evaluate(warm.model, setup.test_data),
                           warm.model)

    client = None if mode == "no_L" else MockLLMClient(setup.truth, seed)
    if mode == "no_R":
        index = build_index([])
    else:
        index = build_evidence_index(
            warm.model, setup.train_data, client,
            threshold=setup.select_threshold,
            slot_seconds=setup.slot_seconds,
        )
    teachers = collect_teacher_records(
        warm.model, setup.train_data, index, client,
        mode=mode, slot_seconds=setup.slot_seconds,
    )
    # Distillation resumes from the warm-up weights on a fresh optimizer;
    # deep-copy via state dict so cached warm-ups stay reusable.
    student = build_model(model_cfg, seed)
    student.load_state_dict(warm.model.state_dict())
    distilled = distill_train(
        student, setup.train_data, setup.val_data, teachers, train_cfg,
        setup.weights,
    )
    return ModeOutcome(mode, seed, evaluate(distilled.model,
                                            setup.test_data),
                       distilled.model)


def run_ablation(
    setup: AblationSetup,
    modes: Sequence[str] = ABLATION_MODES,
    seeds: Sequence[int] = (0, 1, 2),
) -> dict:
    """Run the requested variants over the seeds; report rows + medians."""
    rows = []
    warm_cache: dict[tuple[int, bool], TrainResult] = {}
    for seed in seeds:
        for mode in modes:
            outcome = run_mode(setup, mode, seed, warm_cache)
            logger.info("ablation %s seed=%d: %s", mode, seed,
                        outcome.metrics)
            rows.append({"mode": mode, "seed": seed, **outcome.metrics})
    medians = {
        mode: {
            key: statistics.median(
                r[key] for r in rows if r["mode"] == mode
            )
            for key in METRIC_KEYS
        }
        for mode in modes
    }
    return {"rows": rows, "medians": medians}


def write_ablation_table(table: dict, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.json").write_text(
        json.dumps(table, indent=2), "utf-8"
    )
    with (out_dir / "ablation.csv").open("w", newline="",
                                         encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["mode", "seed",
                                                *METRIC_KEYS])
        writer.writeheader()
        for row in table["rows"]:
            writer.writerow(row)
        for mode, metrics in table["medians"].items():
            writer.writerow({"mode": mode, "seed": "median", **metrics})
