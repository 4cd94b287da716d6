"""Scikit-learn style facade over the full training pipeline.

``SessionRiskClassifier.fit`` takes a list of Session objects (with text
embeddings attached) and runs warm-up, evidence indexing, teacher
reasoning, and distillation under one roof; ``predict_proba`` then scores
sessions with the backbone alone. The estimator composes with sklearn
tooling (cloning, grid search, cross-validation) through get_params.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .errors import ConfigurationError
from .index import build_index
from .losses import LossWeights
from .model import ModelConfig, build_model
from .pipeline import (
    build_evidence_index,
    collect_teacher_records,
    infer_sessions,
    stratified_split,
)
from .sessions import (
    DiscretizationConfig,
    PreprocessConfig,
    Session,
    prepare_sessions,
)
from .train import (
    ABLATION_MODES,
    TrainConfig,
    distill_train,
    warmup_train,
)


def check_sessions(X) -> list[Session]:
    """Validate estimator input: a non-empty sequence of Session objects
    with consistent text-embedding width."""
    if not isinstance(X, Sequence) or isinstance(X, (str, bytes)):
        raise ValueError("X must be a sequence of Session objects")
    sessions = list(X)
    if not sessions:
        raise ValueError("X is empty")
    dims = set()
    for s in sessions:
        if not isinstance(s, Session):
            raise ValueError(f"expected Session, got {type(s).__name__}")
        if s.actions:
            dims.add(s.actions[0].text_embedding.shape[0])
    if len(dims) > 1:
        raise ValueError(f"inconsistent text-embedding widths: {sorted(dims)}")
    return sessions


def resolve_labels(sessions: list[Session], y) -> list[Session]:
    """Attach labels from ``y`` (or require them on the sessions)."""
    if y is not None:
        y = np.asarray(y)
        if len(y) != len(sessions):
            raise ValueError("y length does not match X")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("y must be binary 0/1")
        sessions = [
            Session(s.session_id, s.host_id, s.viewer_ids, s.actions,
                    int(label))
            for s, label in zip(sessions, y)
        ]
    missing = [s.session_id for s in sessions if s.label is None]
    if missing:
        raise ValueError(f"sessions lack labels: {missing[:3]}...")
    return sessions


class SessionRiskClassifier(BaseEstimator, ClassifierMixin):
    """Binary session risk classifier trained by teacher distillation.

    Parameters mirror the pipeline knobs. ``llm_client`` is any object
    with ``complete(prompt) -> str`` (for offline work, ``MockLLMClient``
    over the synthetic truth); without one, only the ``no_D`` and ``no_L``
    ablations can train.
    """

    def __init__(
        self,
        d_k=128,
        n_heads=8,
        n_seq_layers=2,
        n_graph_layers=1,
        dropout=0.1,
        session_prior=0.5,
        learning_rate=1e-4,
        weight_decay=1e-4,
        batch_size=128,
        max_epochs=100,
        patience=20,
        beta=1.0,
        gamma=1.0,
        ablation="full",
        select_threshold=0.5,
        val_fraction=0.2,
        horizon_seconds=1800.0,
        slot_seconds=100.0,
        max_viewers=50,
        max_actions=2096,
        llm_client=None,
        seed=0,
    ):
        self.d_k = d_k
        self.n_heads = n_heads
        self.n_seq_layers = n_seq_layers
        self.n_graph_layers = n_graph_layers
        self.dropout = dropout
        self.session_prior = session_prior
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.beta = beta
        self.gamma = gamma
        self.ablation = ablation
        self.select_threshold = select_threshold
        self.val_fraction = val_fraction
        self.horizon_seconds = horizon_seconds
        self.slot_seconds = slot_seconds
        self.max_viewers = max_viewers
        self.max_actions = max_actions
        self.llm_client = llm_client
        self.seed = seed

    def _configs(self, d_text: int):
        model_cfg = ModelConfig(
            d_k=self.d_k,
            n_heads=self.n_heads,
            n_seq_layers=self.n_seq_layers,
            n_graph_layers=self.n_graph_layers,
            dropout=self.dropout,
            d_text=d_text,
            max_actions=self.max_actions,
            graph_bias=self.ablation != "no_G",
            session_prior=self.session_prior,
        )
        train_cfg = TrainConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.seed,
            ablation=self.ablation,
        )
        return model_cfg, train_cfg

    def _prepare(self, sessions, strict=False):
        pre = PreprocessConfig(self.horizon_seconds, self.max_viewers,
                               self.max_actions)
        disc = DiscretizationConfig(self.horizon_seconds, self.slot_seconds)
        data = prepare_sessions(sessions, pre, disc)
        if strict and len(data) != len(sessions):
            kept = {s.session_id for s, _ in data}
            dropped = [s.session_id for s in sessions
                       if s.session_id not in kept]
            raise ValueError(
                f"sessions degenerate after preprocessing: {dropped[:3]}"
            )
        return data

    def fit(self, X, y=None):
        if self.ablation not in ABLATION_MODES:
            raise ConfigurationError(f"unknown ablation {self.ablation!r}")
        sessions = resolve_labels(check_sessions(X), y)
        d_text = sessions[0].actions[0].text_embedding.shape[0]
        model_cfg, train_cfg = self._configs(d_text)

        train_sessions, val_sessions, _ = stratified_split(
            sessions, (1.0 - self.val_fraction, self.val_fraction, 0.0),
            self.seed,
        )
        train_data = self._prepare(train_sessions)
        val_data = self._prepare(val_sessions)

        model = build_model(model_cfg, self.seed)
        warm = warmup_train(model, train_data, val_data, train_cfg)
        self.warmup_val_pr_auc_ = warm.best_val_pr_auc

        if self.ablation == "no_D":
            self.model_ = warm.model
        else:
            if self.ablation != "no_L" and self.llm_client is None:
                raise ConfigurationError(
                    f"ablation {self.ablation!r} needs an llm_client"
                )
            if self.ablation == "no_R":
                index = build_index([])
            else:
                index = build_evidence_index(
                    warm.model, train_data, self.llm_client,
                    threshold=self.select_threshold,
                    slot_seconds=self.slot_seconds,
                )
            teachers = collect_teacher_records(
                warm.model, train_data, index,
                client=None if self.ablation == "no_L" else self.llm_client,
                mode=self.ablation, slot_seconds=self.slot_seconds,
            )
            distilled = distill_train(
                warm.model, train_data, val_data, teachers, train_cfg,
                LossWeights(self.beta, self.gamma),
            )
            self.model_ = distilled.model

        self.classes_ = np.array([0, 1])
        self.d_text_ = d_text
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise ConfigurationError("classifier is not fitted")

    def predict_proba(self, X):
        self._check_fitted()
        data = self._prepare(check_sessions(X), strict=True)
        scores = np.array([r.score for r in infer_sessions(self.model_, data)])
        return np.column_stack([1.0 - scores, scores])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def decision_function(self, X):
        return self.predict_proba(X)[:, 1]
