"""Ablation harness on a tiny dataset."""
import pytest

from streamrisk.ablation import (
    AblationSetup,
    run_ablation,
    run_mode,
    write_ablation_table,
)
from streamrisk.losses import LossWeights
from streamrisk.model import build_model
from streamrisk.train import TrainConfig, evaluate, warmup_train

from .conftest import tiny_model_config


@pytest.fixture(scope="module")
def tiny_setup(small_dataset, small_prepared):
    sessions, truth = small_dataset
    data = list(small_prepared)
    return AblationSetup(
        train_data=data[:36],
        val_data=data[36:48],
        test_data=data[48:],
        truth=truth,
        model_cfg=tiny_model_config(),
        train_cfg=TrainConfig(learning_rate=1e-3, batch_size=8,
                              max_epochs=2, patience=2),
        weights=LossWeights(1.0, 1.0),
        select_threshold=0.0,
    )


class TestRunMode:
    def test_no_d_equals_warmup_checkpoint_metrics(self, tiny_setup):
        outcome = run_mode(tiny_setup, "no_D", seed=0)
        model = build_model(tiny_setup.model_cfg, 0)
        warm = warmup_train(
            model, tiny_setup.train_data, tiny_setup.val_data,
            TrainConfig(learning_rate=1e-3, batch_size=8, max_epochs=2,
                        patience=2, seed=0, ablation="no_D"),
        )
        assert outcome.metrics == evaluate(warm.model, tiny_setup.test_data)

    def test_warm_cache_shared_across_modes(self, tiny_setup, monkeypatch):
        import streamrisk.ablation as ablation_mod

        calls = []
        original = ablation_mod.warmup_train

        def counting(*args, **kwargs):
            calls.append(1)
            return original(*args, **kwargs)

        monkeypatch.setattr(ablation_mod, "warmup_train", counting)
        cache = {}
        run_mode(tiny_setup, "no_D", seed=0, warm_cache=cache)
        run_mode(tiny_setup, "no_L", seed=0, warm_cache=cache)
        run_mode(tiny_setup, "full", seed=0, warm_cache=cache)
        assert sum(calls) == 1  # no_G would add a second warm-up

    def test_no_g_trains_without_graph_bias(self, tiny_setup):
        outcome = run_mode(tiny_setup, "no_G", seed=0)
        assert outcome.model.cfg.graph_bias is False
        assert set(outcome.metrics) == {"pr_auc", "f1", "recall_at_0.1fpr",
                                        "fpr_at_0.9recall"}

    def test_unknown_mode_rejected(self, tiny_setup):
        with pytest.raises(ValueError):
            run_mode(tiny_setup, "no_X", seed=0)


class TestRunAblation:
    def test_table_rows_and_medians(self, tiny_setup, tmp_path):
        table = run_ablation(tiny_setup, modes=("no_D",), seeds=(0, 1))
        assert len(table["rows"]) == 2
        assert set(table["medians"]) == {"no_D"}
        write_ablation_table(table, tmp_path)
        assert (tmp_path / "ablation.json").exists()
        csv_lines = (tmp_path / "ablation.csv").read_text().splitlines()
        assert len(csv_lines) == 1 + 2 + 1  # header, rows, median row
