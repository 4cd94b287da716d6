"""Session-level live-streaming risk assessment.

A lightweight patch-grid backbone scores sessions in real time; during
training it is guided by cross-session evidence retrieval and structured
judgments distilled from a language-model teacher (real or mock).
"""

__version__ = "0.1.0"

from .errors import (
    ConfigurationError,
    DegenerateSessionError,
    OracleError,
    OutOfRangeError,
    PromptValidationError,
    ResponseParseError,
    StreamRiskError,
    UndefinedMetricError,
)
from .estimator import SessionRiskClassifier
from .index import (
    IndexEntry,
    KeyPatch,
    KeyPatchSet,
    PatchIndex,
    build_index,
    retrieve,
    select_key_patches,
)
from .llm import (
    HTTPLLMClient,
    LLMJudgment,
    MockLLMClient,
    ReasoningRequest,
    SummaryRequest,
    mock_oracle,
)
from .losses import LossWeights, TeacherRecord
from .metrics import ScoredSet, f1_best, fpr_at_recall, pr_auc, recall_at_fpr
from .model import (
    ForwardOutput,
    ModelConfig,
    PatchGridModel,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .sessions import (
    Action,
    DiscretizationConfig,
    PatchGrid,
    PreprocessConfig,
    Session,
    build_patch_grid,
    flatten_grid,
    preprocess,
    slot_of,
)
from .synth import PatchTruth, ScamTemplate, SynthConfig, generate_dataset
from .text import HashingTextEncoder
from .train import TrainConfig, distill_train, warmup_train

__all__ = [
    "Action",
    "ConfigurationError",
    "DegenerateSessionError",
    "DiscretizationConfig",
    "ForwardOutput",
    "HTTPLLMClient",
    "HashingTextEncoder",
    "IndexEntry",
    "KeyPatch",
    "KeyPatchSet",
    "LLMJudgment",
    "LossWeights",
    "MockLLMClient",
    "ModelConfig",
    "OracleError",
    "OutOfRangeError",
    "PatchGrid",
    "PatchGridModel",
    "PatchIndex",
    "PatchTruth",
    "PreprocessConfig",
    "PromptValidationError",
    "ReasoningRequest",
    "ResponseParseError",
    "ScamTemplate",
    "ScoredSet",
    "Session",
    "SessionRiskClassifier",
    "StreamRiskError",
    "SummaryRequest",
    "SynthConfig",
    "TeacherRecord",
    "TrainConfig",
    "UndefinedMetricError",
    "build_index",
    "build_model",
    "build_patch_grid",
    "distill_train",
    "f1_best",
    "flatten_grid",
    "fpr_at_recall",
    "generate_dataset",
    "load_checkpoint",
    "mock_oracle",
    "pr_auc",
    "preprocess",
    "recall_at_fpr",
    "retrieve",
    "save_checkpoint",
    "select_key_patches",
    "slot_of",
    "warmup_train",
]
