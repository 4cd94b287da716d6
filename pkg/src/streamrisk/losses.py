"""Training objectives: session label loss plus the two teacher terms.

The combined objective is
    total = session + beta * patch + gamma * patch_to_session
where the session term is a sum-form binary cross-entropy on ground-truth
labels, the patch term pulls key-patch scores toward the teacher's, and the
patch-to-session term makes saliency-weighted patch scores reproduce the
teacher's session score. Teacher-missing sessions contribute the session
term only.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigurationError
from .index import KeyPatchSet
from .llm import LLMJudgment
from .model import ForwardOutput

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    """Auxiliary-term weights; the usual search grid is
    {0.5, 1.0, 1.5, 2.0} for each."""

    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self) -> None:
        if self.beta < 0 or self.gamma < 0:
            raise ConfigurationError("loss weights must be non-negative")


@dataclass(frozen=True)
class TeacherPatchTarget:
    patch_id: int
    user_id: str
    slot: int
    risk: float
    saliency: float
    neighbor_session_id: str | None = None


@dataclass
class TeacherRecord:
    """Parsed teacher outputs for one session's key patches."""

    session_id: str
    patch_targets: tuple[TeacherPatchTarget, ...]
    session_score: float
    teacher_missing: bool = False

    def __post_init__(self) -> None:
        if any(t.saliency < 0 for t in self.patch_targets):
            raise ConfigurationError("saliency values must be non-negative")

    @classmethod
    def from_judgment(cls, key_patches: KeyPatchSet, judgment: LLMJudgment,
                      teacher_missing: bool = False,
                      neighbors: Mapping[int, str] | None = None,
                      ) -> "TeacherRecord":
        targets = []
        for patch in key_patches.patches:
            j = judgment.patches[patch.patch_id]
            targets.append(
                TeacherPatchTarget(
                    patch_id=patch.patch_id,
                    user_id=patch.user_id,
                    slot=patch.slot,
                    risk=j.risk_score,
                    saliency=j.saliency,
                    neighbor_session_id=(neighbors or {}).get(patch.patch_id),
                )
            )
        return cls(
            session_id=key_patches.session_id,
            patch_targets=tuple(targets),
            session_score=judgment.overall_risk_score,
            teacher_missing=teacher_missing,
        )

    def to_json(self) -> dict:
        return {
            "session_id": self.session_id,
            "session_score": self.session_score,
            "teacher_missing": self.teacher_missing,
            "patches": [
                {
                    "patch_id": t.patch_id,
                    "user_id": t.user_id,
                    "slot": t.slot,
                    "risk": t.risk,
                    "saliency": t.saliency,
                    "neighbor_session_id": t.neighbor_session_id,
                }
                for t in self.patch_targets
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TeacherRecord":
        return cls(
            session_id=obj["session_id"],
            patch_targets=tuple(
                TeacherPatchTarget(
                    patch_id=p["patch_id"],
                    user_id=p["user_id"],
                    slot=int(p["slot"]),
                    risk=float(p["risk"]),
                    saliency=float(p["saliency"]),
                    neighbor_session_id=p.get("neighbor_session_id"),
                )
                for p in obj["patches"]
            ),
            session_score=float(obj["session_score"]),
            teacher_missing=bool(obj["teacher_missing"]),
        )


def write_teacher_records(path: str | Path,
                          records: Iterable[TeacherRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False))
            fh.write("\n")


def read_teacher_records(path: str | Path) -> dict[str, TeacherRecord]:
    records = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = TeacherRecord.from_json(json.loads(line))
                records[rec.session_id] = rec
    return records


# --- loss terms -------------------------------------------------------------


def session_loss(session_logits: Tensor, labels: Tensor) -> Tensor:
    """Sum-form BCE over the batch, evaluated on logits for stability.

    Probabilities are only materialized for metrics; the optimizer sees
    log-sigmoid terms directly.
    """
    return F.binary_cross_entropy_with_logits(
        session_logits, labels.to(session_logits.dtype), reduction="sum"
    )


def match_teacher_predictions(
    fwd: ForwardOutput, teacher: TeacherRecord
) -> tuple[Tensor, Tensor, Tensor]:
    """Align model patch scores with the teacher's key-patch targets.

    Returns (predicted scores, teacher risks, teacher saliencies), one row
    per key patch. Every teacher cell must exist in the forward output.
    """
    position = {(m.user_id, m.slot): i for i, m in enumerate(fwd.patch_meta)}
    rows = []
    for t in teacher.patch_targets:
        assert (t.user_id, t.slot) in position, (
            f"teacher patch ({t.user_id}, {t.slot}) missing from forward "
            f"output of session {teacher.session_id}"
        )
        rows.append(position[(t.user_id, t.slot)])
    preds = torch.sigmoid(fwd.patch_logits[rows])
    dtype = fwd.patch_logits.dtype
    risks = torch.tensor([t.risk for t in teacher.patch_targets], dtype=dtype)
    saliencies = torch.tensor([t.saliency for t in teacher.patch_targets],
                              dtype=dtype)
    return preds, risks, saliencies


def patch_loss(pred_scores: Tensor, teacher_risks: Tensor) -> Tensor:
    """Mean squared error over the key patches."""
    return ((pred_scores - teacher_risks) ** 2).mean()


def patch_to_session_loss(pred_scores: Tensor, saliencies: Tensor,
                          teacher_session_score: float) -> Tensor:
    """Squared gap between the saliency-weighted patch mean and the
    teacher's session score.

    The weights are normalized, so rescaling all saliencies by any c > 0
    changes nothing. An all-zero saliency vector is treated as teacher-
    missing (zero loss) with a warning.
    """
    total = saliencies.sum()
    if float(total) == 0.0:
        logger.warning("all-zero saliency; treating teacher as missing")
        return pred_scores.new_zeros(())
    weighted = (saliencies / total * pred_scores).sum()
    target = pred_scores.new_tensor(teacher_session_score)
    return (weighted - target) ** 2


def total_loss(session_term: Tensor, patch_term: Tensor,
               p2s_term: Tensor, weights: LossWeights) -> Tensor:
    """Exact weighted sum of the three terms."""
    return session_term + weights.beta * patch_term + weights.gamma * p2s_term


def distillation_loss(
    fwd: ForwardOutput,
    label: int,
    teacher: TeacherRecord | None,
    weights: LossWeights,
) -> tuple[Tensor, dict[str, float]]:
    """Per-session combined loss; auxiliary terms are skipped (exact zero)
    when there is no usable teacher or both weights are zero."""
    label_t = fwd.session_logit.new_tensor(float(label))
    l_s = F.binary_cross_entropy_with_logits(
        fwd.session_logit, label_t, reduction="sum"
    )
    parts = {"session": float(l_s.detach()), "patch": 0.0, "p2s": 0.0}
    use_teacher = (
        teacher is not None
        and not teacher.teacher_missing
        and (weights.beta > 0 or weights.gamma > 0)
    )
    if not use_teacher:
        return l_s, parts
    preds, risks, saliencies = match_teacher_predictions(fwd, teacher)
    l_p = patch_loss(preds, risks)
    l_p2s = patch_to_session_loss(preds, saliencies, teacher.session_score)
    parts["patch"] = float(l_p.detach())
    parts["p2s"] = float(l_p2s.detach())
    return total_loss(l_s, l_p, l_p2s, weights), parts
