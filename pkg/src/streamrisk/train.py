"""Warm-up and distillation training loops.

Both stages share one loop: AdamW over per-session forward passes grouped
into shuffled mini-batches, validation PR-AUC after every epoch, and
early stopping that keeps the best-validation checkpoint. The warm-up
stage is simply the loop with no teacher records. Batch losses are
averaged for step-size stability; the summed objective has the same
optimum, only the effective learning rate differs.
"""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import ConfigurationError
from .losses import LossWeights, TeacherRecord, distillation_loss
from .metrics import ScoredSet, compute_all
from .model import STAGE_DISTILLED, STAGE_WARMUP, PatchGridModel
from .sessions import PatchGrid, Session

logger = logging.getLogger(__name__)

ABLATION_MODES = ("full", "no_G", "no_R", "no_L", "no_D")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 20
    seed: int = 0
    ablation: str = "full"

    def __post_init__(self) -> None:
        if min(self.learning_rate, self.weight_decay) < 0:
            raise ConfigurationError("rates must be non-negative")
        if min(self.batch_size, self.max_epochs, self.patience) < 1:
            raise ConfigurationError("counts must be positive")
        if self.patience > self.max_epochs:
            raise ConfigurationError("patience cannot exceed max_epochs")
        if self.ablation not in ABLATION_MODES:
            raise ConfigurationError(f"unknown ablation {self.ablation!r}")


PreparedData = Sequence[tuple[Session, PatchGrid]]


@dataclass
class TrainResult:
    model: PatchGridModel
    stage: str
    best_epoch: int
    best_val_pr_auc: float
    history: list[dict]


def score_sessions(model: PatchGridModel, data: PreparedData) -> ScoredSet:
    """Session scores with frozen parameters (labels must be present)."""
    model.eval()
    triples = []
    with torch.no_grad():
        for session, grid in data:
            fwd = model(session, grid)
            triples.append((session.session_id, fwd.session_score,
                            session.label))
    return ScoredSet.from_triples(triples)


def evaluate(model: PatchGridModel, data: PreparedData) -> dict[str, float]:
    return compute_all(score_sessions(model, data))


class MetricsLog:
    """JSON-lines training log: one record per (epoch, split)."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        if self.path:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")


def _train_loop(
    model: PatchGridModel,
    train_data: PreparedData,
    val_data: PreparedData,
    cfg: TrainConfig,
    weights: LossWeights,
    teachers: Mapping[str, TeacherRecord] | None,
    stage: str,
    log: MetricsLog,
) -> TrainResult:
    if not train_data or not val_data:
        raise ConfigurationError("training and validation data required")
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.learning_rate,
        weight_decay=cfg.weight_decay,
    )
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)

    best_state = copy.deepcopy(model.state_dict())
    best_metric = -float("inf")
    best_epoch = 0
    epochs_since_best = 0
    history = []

    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = rng.permutation(len(train_data))
        epoch_parts = {"session": 0.0, "patch": 0.0, "p2s": 0.0}
        t0 = time.perf_counter()
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            optimizer.zero_grad()
            batch_total = None
            for i in batch:
                session, grid = train_data[i]
                teacher = teachers.get(session.session_id) if teachers else None
                loss, parts = distillation_loss(
                    model(session, grid), session.label, teacher, weights
                )
                batch_total = loss if batch_total is None else batch_total + loss
                for key in epoch_parts:
                    epoch_parts[key] += parts[key]
            (batch_total / len(batch)).backward()
            optimizer.step()

        val = evaluate(model, val_data)
        record = {
            "stage": stage,
            "epoch": epoch,
            "split": "val",
            "seconds": round(time.perf_counter() - t0, 3),
            "loss_session": epoch_parts["session"] / len(train_data),
            "loss_patch": epoch_parts["patch"] / len(train_data),
            "loss_p2s": epoch_parts["p2s"] / len(train_data),
            **val,
        }
        history.append(record)
        log.write(record)

        if val["pr_auc"] > best_metric:
            best_metric = val["pr_auc"]
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                logger.info("early stop at epoch %d (best %d)", epoch,
                            best_epoch)
                break

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model=model, stage=stage, best_epoch=best_epoch,
                       best_val_pr_auc=best_metric, history=history)


def warmup_train(
    model: PatchGridModel,
    train_data: PreparedData,
    val_data: PreparedData,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Stage-1 training on session labels alone."""
    return _train_loop(
        model, train_data, val_data, cfg,
        weights=LossWeights(beta=0.0, gamma=0.0), teachers=None,
        stage=STAGE_WARMUP, log=MetricsLog(log_path),
    )


def distill_train(
    model: PatchGridModel,
    train_data: PreparedData,
    val_data: PreparedData,
    teachers: Mapping[str, TeacherRecord],
    cfg: TrainConfig,
    weights: LossWeights,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Stage-4 training from the warm-up checkpoint with teacher signals.

    The optimizer starts fresh (no state carryover). Sessions without a
    usable teacher record contribute only the session term.
    """
    return _train_loop(
        model, train_data, val_data, cfg,
        weights=weights, teachers=teachers,
        stage=STAGE_DISTILLED, log=MetricsLog(log_path),
    )
