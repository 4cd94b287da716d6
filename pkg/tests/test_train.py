"""Training loops: early stopping, determinism, and reduction identities."""
import copy
import json

import numpy as np
import pytest
import torch

import streamrisk.train as train_mod
from streamrisk.errors import ConfigurationError
from streamrisk.losses import LossWeights, TeacherRecord
from streamrisk.model import build_model
from streamrisk.train import (
    TrainConfig,
    distill_train,
    evaluate,
    score_sessions,
    warmup_train,
)

from .conftest import tiny_model_config


@pytest.fixture
def tiny_split(small_prepared):
    data = list(small_prepared)
    return data[:40], data[40:]


def small_train_cfg(**overrides):
    base = dict(learning_rate=1e-3, batch_size=8, max_epochs=3, patience=3,
                seed=0)
    base.update(overrides)
    base["patience"] = min(base["patience"], base["max_epochs"])
    return TrainConfig(**base)


class TestLoopMechanics:
    def test_empty_data_rejected(self, tiny_split):
        train, val = tiny_split
        model = build_model(tiny_model_config(), 0)
        with pytest.raises(ConfigurationError):
            warmup_train(model, [], val, small_train_cfg())

    def test_early_stop_keeps_best_epoch(self, tiny_split, monkeypatch):
        train, val = tiny_split
        scripted = iter([0.9, 0.8, 0.7, 0.6, 0.5])

        def fake_evaluate(model, data):
            return {"pr_auc": next(scripted), "f1": 0.0,
                    "recall_at_0.1fpr": 0.0, "fpr_at_0.9recall": 1.0}

        monkeypatch.setattr(train_mod, "evaluate", fake_evaluate)
        model = build_model(tiny_model_config(), 0)
        result = warmup_train(model, train, val,
                              small_train_cfg(max_epochs=5, patience=1))
        assert result.best_epoch == 1
        assert len(result.history) == 2  # stopped right after epoch 2
        assert result.best_val_pr_auc == 0.9

    def test_runs_to_max_epochs_when_improving(self, tiny_split,
                                               monkeypatch):
        train, val = tiny_split
        scripted = iter([0.1, 0.2, 0.3])

        def fake_evaluate(model, data):
            return {"pr_auc": next(scripted), "f1": 0.0,
                    "recall_at_0.1fpr": 0.0, "fpr_at_0.9recall": 1.0}

        monkeypatch.setattr(train_mod, "evaluate", fake_evaluate)
        model = build_model(tiny_model_config(), 0)
        result = warmup_train(model, train, val,
                              small_train_cfg(max_epochs=3, patience=2))
        assert result.best_epoch == 3 and len(result.history) == 3

    def test_metrics_log_written(self, tiny_split, tmp_path):
        train, val = tiny_split
        model = build_model(tiny_model_config(), 0)
        log = tmp_path / "metrics.jsonl"
        warmup_train(model, train, val, small_train_cfg(max_epochs=2),
                     log_path=log)
        records = [json.loads(line) for line in log.read_text().splitlines()]
        assert len(records) == 2
        assert {"stage", "epoch", "split", "loss_session", "pr_auc", "f1",
                "recall_at_0.1fpr", "fpr_at_0.9recall"} <= set(records[0])
        assert records[0]["stage"] == "warmup"

    def test_checkpoint_stage_tags(self, tiny_split):
        train, val = tiny_split
        model = build_model(tiny_model_config(), 0)
        warm = warmup_train(model, train, val, small_train_cfg(max_epochs=1))
        assert warm.stage == "warmup"
        dist = distill_train(warm.model, train, val, {},
                             small_train_cfg(max_epochs=1), LossWeights())
        assert dist.stage == "distilled"


class TestDeterminism:
    def test_same_seed_same_metrics_and_weights(self, tiny_split):
        train, val = tiny_split

        def run():
            model = build_model(tiny_model_config(), 7)
            return warmup_train(model, train, val,
                                small_train_cfg(max_epochs=2, seed=7))

        a, b = run(), run()
        assert a.best_val_pr_auc == b.best_val_pr_auc
        for key, tensor in a.model.state_dict().items():
            assert torch.equal(tensor, b.model.state_dict()[key]), key

    def test_different_seed_changes_trajectory(self, tiny_split):
        train, val = tiny_split
        a = warmup_train(build_model(tiny_model_config(), 1), train, val,
                         small_train_cfg(max_epochs=2, seed=1))
        b = warmup_train(build_model(tiny_model_config(), 2), train, val,
                         small_train_cfg(max_epochs=2, seed=2))
        b_state = b.model.state_dict()
        assert any(
            not torch.equal(tensor, b_state[key])
            for key, tensor in a.model.state_dict().items()
        )


class TestToySanity:
    def test_loss_decreases_monotonically_on_separable_data(self, small_prepared):
        # 4 clearly separable sessions, generous learning rate
        positives = [p for p in small_prepared if p[0].label == 1][:2]
        negatives = [p for p in small_prepared if p[0].label == 0][:2]
        data = positives + negatives
        model = build_model(tiny_model_config(dropout=0.0), 0)
        result = warmup_train(
            model, data, data,
            small_train_cfg(learning_rate=1e-2, batch_size=4,
                            max_epochs=10, patience=10),
        )
        losses = [h["loss_session"] for h in result.history]
        assert len(losses) == 10
        assert all(b < a for a, b in zip(losses, losses[1:]))


def _all_missing_teachers(data):
    return {
        s.session_id: TeacherRecord(
            session_id=s.session_id, patch_targets=(), session_score=0.5,
            teacher_missing=True,
        )
        for s, _ in data
    }


class TestDistillReduction:
    def _warm(self, train, val):
        model = build_model(tiny_model_config(), 3)
        return warmup_train(model, train, val,
                            small_train_cfg(max_epochs=2, seed=3))

    def _clone(self, result):
        model = build_model(tiny_model_config(), 3)
        model.load_state_dict(copy.deepcopy(result.model.state_dict()))
        return model

    def test_zero_weights_match_continued_warmup(self, tiny_split,
                                                 small_dataset):
        train, val = tiny_split
        warm = self._warm(train, val)
        cfg = small_train_cfg(max_epochs=2, seed=11)

        continued = warmup_train(self._clone(warm), train, val, cfg)

        sessions, truth = small_dataset
        teachers = {
            s.session_id: TeacherRecord(
                session_id=s.session_id, patch_targets=(),
                session_score=0.9, teacher_missing=False,
            )
            for s, _ in train
        }
        distilled = distill_train(self._clone(warm), train, val, teachers,
                                  cfg, LossWeights(0.0, 0.0))
        for key, tensor in continued.model.state_dict().items():
            assert torch.equal(tensor, distilled.model.state_dict()[key]), key

    def test_all_missing_teachers_match_continued_warmup(self, tiny_split):
        train, val = tiny_split
        warm = self._warm(train, val)
        cfg = small_train_cfg(max_epochs=2, seed=13)

        continued = warmup_train(self._clone(warm), train, val, cfg)
        distilled = distill_train(self._clone(warm), train, val,
                                  _all_missing_teachers(train), cfg,
                                  LossWeights(1.0, 1.0))
        for key, tensor in continued.model.state_dict().items():
            assert torch.equal(tensor, distilled.model.state_dict()[key]), key


class TestScoring:
    def test_score_sessions_aligns_ids(self, tiny_split):
        train, _ = tiny_split
        model = build_model(tiny_model_config(), 0)
        ss = score_sessions(model, train)
        assert list(ss.session_ids) == [s.session_id for s, _ in train]
        assert np.all((ss.scores >= 0) & (ss.scores <= 1))

    def test_evaluate_returns_all_metrics(self, tiny_split):
        train, _ = tiny_split
        model = build_model(tiny_model_config(), 0)
        metrics = evaluate(model, train)
        assert set(metrics) == {"pr_auc", "f1", "recall_at_0.1fpr",
                                "fpr_at_0.9recall"}
