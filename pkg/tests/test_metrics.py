"""Ranking metrics against exhaustive threshold-enumeration oracles."""
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamrisk.errors import UndefinedMetricError
from streamrisk.heatmap import emit_heatmap, heatmap_payload
from streamrisk.metrics import (
    ScoredSet,
    compute_all,
    f1_best,
    fpr_at_recall,
    pr_auc,
    recall_at_fpr,
)
from streamrisk.sessions import build_patch_grid

from .conftest import make_action, make_session


def scored(scores, labels):
    return ScoredSet(tuple(f"s{i}" for i in range(len(scores))),
                     np.array(scores, dtype=float),
                     np.array(labels, dtype=int))


# --- enumeration oracles (loop-style, one confusion matrix per threshold) --


def oracle_sweep(s: ScoredSet):
    """Confusion counts at every distinct threshold plus reject-all."""
    thresholds = sorted(set(s.scores), reverse=True)
    points = [(0, 0)]
    for tau in thresholds:
        predicted = s.scores >= tau
        tp = int(np.sum(predicted & (s.labels == 1)))
        fp = int(np.sum(predicted & (s.labels == 0)))
        points.append((tp, fp))
    return points


def oracle_pr_auc(s: ScoredSet) -> float:
    points = oracle_sweep(s)
    n_pos = s.n_pos
    area, prev_recall = 0.0, 0.0
    for tp, fp in points[1:]:
        recall = tp / n_pos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def oracle_f1(s: ScoredSet) -> float:
    best = 0.0
    for tp, fp in oracle_sweep(s)[1:]:
        precision = tp / (tp + fp)
        recall = tp / s.n_pos
        if precision + recall:
            best = max(best, 2 * precision * recall / (precision + recall))
    return best


def oracle_recall_at_fpr(s: ScoredSet, cap: float) -> float:
    return max(tp / s.n_pos for tp, fp in oracle_sweep(s)
               if fp / s.n_neg <= cap)


def oracle_fpr_at_recall(s: ScoredSet, floor: float) -> float:
    return min(fp / s.n_neg for tp, fp in oracle_sweep(s)
               if tp / s.n_pos >= floor)


def random_scored(rng, n):
    labels = rng.integers(0, 2, size=n)
    if labels.sum() == 0:
        labels[0] = 1
    if labels.sum() == n:
        labels[-1] = 0
    # quantized scores force plenty of ties
    scores = np.round(rng.uniform(size=n), 1)
    return scored(scores, labels)


class TestPrAuc:
    def test_perfect_separation(self):
        assert pr_auc(scored([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])) == 1.0

    def test_four_point_example(self):
        s = scored([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0])
        # thresholds 0.9/0.8/0.3/0.1 -> (1,0) (1,1) (2,1) (2,2)
        expected = 0.5 * 1.0 + 0.0 + 0.5 * (2 / 3) + 0.0
        assert pr_auc(s) == pytest.approx(expected, abs=1e-12)
        assert oracle_pr_auc(s) == pytest.approx(expected, abs=1e-12)

    def test_all_equal_scores_give_prevalence(self):
        s = scored([0.4] * 10, [1, 0, 0, 0, 1, 0, 0, 0, 0, 0])
        assert pr_auc(s) == pytest.approx(0.2, abs=1e-12)

    def test_no_positives_is_undefined(self):
        with pytest.raises(UndefinedMetricError):
            pr_auc(scored([0.5, 0.4], [0, 0]))

    def test_adding_top_ranked_positive_never_decreases(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            s = random_scored(rng, 30)
            grown = scored(np.append(s.scores, 1.0),
                           np.append(s.labels, 1))
            assert pr_auc(grown) >= pr_auc(s) - 1e-12


class TestF1Best:
    def test_perfect_separation(self):
        assert f1_best(scored([0.9, 0.1], [1, 0])) == 1.0

    def test_single_positive_ranked_last(self):
        scores = [0.9, 0.85, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.05]
        labels = [0] * 9 + [1]
        # only the lowest threshold captures it: P=0.1, R=1
        assert f1_best(scored(scores, labels)) == pytest.approx(2 * 0.1 / 1.1)

    def test_all_positive_labels(self):
        assert f1_best(scored([0.3, 0.9, 0.5], [1, 1, 1])) == 1.0


class TestRecallAtFpr:
    def test_perfect_separation(self):
        assert recall_at_fpr(scored([0.9, 0.8, 0.2], [1, 1, 0])) == 1.0

    def test_zero_cap_with_separable_scores(self):
        s = scored([0.9, 0.6, 0.4, 0.2], [1, 1, 0, 0])
        assert recall_at_fpr(s, fpr_cap=0.0) == 1.0

    def test_missing_class_is_undefined(self):
        with pytest.raises(UndefinedMetricError):
            recall_at_fpr(scored([0.5], [1]))


class TestFprAtRecall:
    def test_perfect_separation(self):
        assert fpr_at_recall(scored([0.9, 0.8, 0.2], [1, 1, 0])) == 0.0

    def test_full_recall_floor_forces_min_positive_threshold(self):
        s = scored([0.9, 0.3, 0.5, 0.2], [1, 1, 0, 0])
        # threshold 0.3 catches both positives and one negative
        assert fpr_at_recall(s, recall_floor=1.0) == pytest.approx(0.5)


class TestOracleEquivalence:
    def test_random_sets_match_enumeration(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            s = random_scored(rng, int(rng.integers(2, 100)))
            assert pr_auc(s) == pytest.approx(oracle_pr_auc(s), abs=1e-12)
            assert f1_best(s) == pytest.approx(oracle_f1(s), abs=1e-12)
            assert recall_at_fpr(s, 0.1) == pytest.approx(
                oracle_recall_at_fpr(s, 0.1), abs=1e-12
            )
            assert fpr_at_recall(s, 0.9) == pytest.approx(
                oracle_fpr_at_recall(s, 0.9), abs=1e-12
            )

    @given(st.lists(st.tuples(st.integers(0, 1),
                              st.integers(0, 10)),
                    min_size=2, max_size=60))
    @settings(max_examples=60, deadline=None)
    def test_property_equivalence(self, raw):
        labels = [lab for lab, _ in raw]
        if sum(labels) == 0:
            labels[0] = 1
        if sum(labels) == len(labels):
            labels[-1] = 0
        scores = [sc / 10.0 for _, sc in raw]
        s = scored(scores, labels)
        assert pr_auc(s) == pytest.approx(oracle_pr_auc(s), abs=1e-12)
        assert f1_best(s) == pytest.approx(oracle_f1(s), abs=1e-12)
        assert recall_at_fpr(s, 0.1) == pytest.approx(
            oracle_recall_at_fpr(s, 0.1), abs=1e-12
        )
        assert fpr_at_recall(s, 0.9) == pytest.approx(
            oracle_fpr_at_recall(s, 0.9), abs=1e-12
        )


class TestScoredSetValidation:
    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ScoredSet(("a",), np.array([0.1, 0.2]), np.array([0, 1]))

    def test_score_range(self):
        with pytest.raises(ValueError):
            scored([1.2], [1])

    def test_labels_binary(self):
        with pytest.raises(ValueError):
            scored([0.5], [2])


class TestHeatmap:
    def _grid(self, disc_cfg):
        actions = [
            make_action("h", 10.0, "speech-transcript", "a"),    # slot 1
            make_action("h", 120.0, "speech-transcript", "b"),   # slot 2
            make_action("v1", 250.0, "comment", "c"),            # slot 3
        ]
        return build_patch_grid(make_session("hm", "h", actions), disc_cfg)

    def test_payload_has_only_non_empty_cells(self, disc_cfg):
        grid = self._grid(disc_cfg)
        scores = {("h", 1): 0.25, ("h", 2): 0.5, ("v1", 3): 0.75}
        payload = heatmap_payload(grid, scores)
        assert payload["rows"][0] == {"user_id": "h", "role": "host"}
        assert len(payload["cells"]) == 3
        assert payload["slot_count"] == 18

    def test_all_zero_scores_render_uniformly(self, disc_cfg):
        grid = self._grid(disc_cfg)
        payload = heatmap_payload(grid, {k: 0.0 for k in grid.patches})
        assert {c["score"] for c in payload["cells"]} == {0.0}

    def test_json_round_trip_is_bit_exact(self, tmp_path, disc_cfg):
        grid = self._grid(disc_cfg)
        rng = np.random.default_rng(0)
        scores = {k: float(rng.uniform()) for k in grid.patches}
        sidecar = emit_heatmap(grid, scores, tmp_path / "hm.png")
        assert (tmp_path / "hm.png").exists()
        loaded = json.loads(sidecar.read_text())
        reread = {(c["user_id"], c["slot"]): c["score"]
                  for c in loaded["cells"]}
        assert reread == scores  # exact float equality


def test_compute_all_keys():
    s = scored([0.9, 0.1], [1, 0])
    assert set(compute_all(s)) == {"pr_auc", "f1", "recall_at_0.1fpr",
                                   "fpr_at_0.9recall"}
