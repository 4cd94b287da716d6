"""Shared fixtures: tiny sessions, small synthetic datasets, tiny models."""
from __future__ import annotations

import numpy as np
import pytest
import torch

from streamrisk.model import ModelConfig, build_model
from streamrisk.sessions import (
    Action,
    DiscretizationConfig,
    PreprocessConfig,
    Session,
    build_patch_grid,
    prepare_sessions,
)
from streamrisk.synth import SynthConfig, generate_dataset
from streamrisk.text import HashingTextEncoder

D_TEXT = 16
ENCODER = HashingTextEncoder(D_TEXT)


def make_action(user: str, t: float, atype: str = "comment",
                text: str = "") -> Action:
    return Action(user, t, atype, ENCODER(text), text)


def make_session(
    session_id: str = "s0",
    host: str = "h",
    actions=None,
    label: int | None = 0,
) -> Session:
    actions = actions if actions is not None else [
        make_action(host, 0.0, "stream-start"),
        make_action(host, 5.0, "speech-transcript", "hello welcome"),
        make_action("v1", 12.0, "entry"),
        make_action("v1", 130.0, "comment", "nice song"),
    ]
    actions = sorted(actions, key=lambda a: a.timestamp)
    viewers = frozenset(a.user_id for a in actions) - {host}
    return Session(session_id, host, viewers, actions, label)


@pytest.fixture
def disc_cfg() -> DiscretizationConfig:
    return DiscretizationConfig(horizon_seconds=1800.0, slot_seconds=100.0)


@pytest.fixture
def tiny_session() -> Session:
    return make_session()


@pytest.fixture(scope="session")
def small_dataset():
    """60 tiny synthetic sessions plus hidden truth (shared, read-only)."""
    cfg = SynthConfig(
        n_sessions=60,
        positive_rate=0.2,
        n_templates=3,
        viewers_range=(3, 6),
        actions_range=(25, 45),
        seed=11,
        d_text=D_TEXT,
    )
    return generate_dataset(cfg)


@pytest.fixture(scope="session")
def small_prepared(small_dataset):
    sessions, _ = small_dataset
    return prepare_sessions(sessions, PreprocessConfig(),
                            DiscretizationConfig())


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(d_k=16, n_heads=2, n_seq_layers=1, n_graph_layers=1,
                dropout=0.1, d_text=D_TEXT)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    model = build_model(tiny_model_config(), seed=0)
    model.eval()
    return model


@pytest.fixture
def graded_session(disc_cfg):
    """Deterministic 3-user session spanning several slots."""
    rng = np.random.default_rng(7)
    actions = []
    for user, n in (("h", 9), ("v1", 6), ("v2", 4)):
        for t in rng.uniform(0, 1700, size=n):
            atype = "speech-transcript" if user == "h" else "comment"
            actions.append(make_action(user, float(t), atype, f"word{n}"))
    session = make_session("graded", "h", actions, label=1)
    return session, build_patch_grid(session, disc_cfg)


def forward_deterministic(model, session, grid):
    """Eval-mode forward with no grad, for comparisons."""
    model.eval()
    with torch.no_grad():
        return model(session, grid)
