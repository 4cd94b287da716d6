"""Stage orchestration: index construction, teacher collection, inference.

The four-stage flow is: (1) warm up the backbone on session labels,
(2) index key patches of predicted-positive training sessions with
session-aware summaries, (3) query each training session's key patches
against the index and collect structured teacher judgments, (4) distill.
Inference afterwards touches neither the index nor any client.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigurationError
from .index import (
    KeyPatchSet,
    PatchIndex,
    build_index,
    make_entry,
    retrieve,
    select_key_patches,
)
from .llm import (
    LLMClient,
    PatchPrompt,
    ReasoningPair,
    ReasoningRequest,
    SummaryRequest,
    describe_patch,
    request_judgment,
    request_summaries,
)
from .losses import TeacherPatchTarget, TeacherRecord
from .model import PatchGridModel
from .sessions import PatchGrid, Session
from .train import PreparedData

logger = logging.getLogger(__name__)


def stratified_split(
    sessions: Sequence[Session],
    fractions: tuple[float, float, float],
    seed: int,
) -> tuple[list[Session], list[Session], list[Session]]:
    """Label-stratified train/val/test split with seeded shuffling."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions {fractions} must sum to 1")
    rng = np.random.default_rng(seed)
    pools = {
        0: [s for s in sessions if s.label == 0],
        1: [s for s in sessions if s.label == 1],
    }
    out: tuple[list[Session], ...] = ([], [], [])
    for pool in pools.values():
        order = rng.permutation(len(pool))
        n_train = int(round(fractions[0] * len(pool)))
        n_val = int(round(fractions[1] * len(pool)))
        for rank, idx in enumerate(order):
            bucket = 0 if rank < n_train else (1 if rank < n_train + n_val
                                               else 2)
            out[bucket].append(pool[idx])
    return out


def _key_patch_prompts(kps: KeyPatchSet, grid: PatchGrid,
                       slot_seconds: float) -> list[PatchPrompt]:
    return [
        PatchPrompt(p.patch_id,
                    describe_patch(grid, p.user_id, p.slot, slot_seconds))
        for p in kps.patches
    ]


def build_evidence_index(
    model: PatchGridModel,
    train_data: PreparedData,
    client: LLMClient | None,
    threshold: float = 0.5,
    slot_seconds: float = 100.0,
) -> PatchIndex:
    """Stage 2: summarize and index key patches of predicted positives.

    Without a client (the language-model-free variant), raw patch
    descriptions stand in for the session-aware summaries.
    """
    entries = []
    model.eval()
    with torch.no_grad():
        for session, grid in train_data:
            fwd = model(session, grid)
            kps = select_key_patches(fwd, session.session_id, "index",
                                     threshold)
            if kps is None:
                continue
            prompts = _key_patch_prompts(kps, grid, slot_seconds)
            if client is None:
                summaries = {p.patch_id: p.patch_desc for p in prompts}
            else:
                req = SummaryRequest(session_id=session.session_id,
                                     patches=tuple(prompts))
                summaries = request_summaries(client, req)
            for patch in kps.patches:
                entries.append(
                    make_entry(patch, session.session_id,
                               summaries[patch.patch_id])
                )
    if not entries:
        logger.warning("no sessions predicted positive; index is empty")
    return build_index(entries)


def _embedding_average_teacher(
    model: PatchGridModel,
    kps: KeyPatchSet,
    index: PatchIndex,
    k: int,
) -> TeacherRecord:
    """Teacher substitute without any language model: each query patch is
    averaged with its top-1 neighbor and scored by the patch head, with
    uniform saliency; the session target is the mean of the patch targets."""
    targets = []
    scores = []
    uniform = 1.0 / len(kps.patches)
    with torch.no_grad():
        for patch in kps.patches:
            vec = patch.embedding
            neighbors = retrieve(index, vec, kps.session_id, k) if len(index) \
                else []
            if neighbors:
                vec = (vec + neighbors[0].entry.embedding) / 2.0
            logit = model.patch_head(
                torch.from_numpy(np.asarray(vec)).to(model.dtype)
            ).squeeze(-1)
            score = float(torch.sigmoid(logit))
            scores.append(score)
            targets.append(
                TeacherPatchTarget(
                    patch_id=patch.patch_id,
                    user_id=patch.user_id,
                    slot=patch.slot,
                    risk=score,
                    saliency=uniform,
                    neighbor_session_id=(
                        neighbors[0].entry.meta["session_id"]
                        if neighbors else None
                    ),
                )
            )
    return TeacherRecord(
        session_id=kps.session_id,
        patch_targets=tuple(targets),
        session_score=float(np.mean(scores)),
        teacher_missing=False,
    )


def collect_teacher_records(
    model: PatchGridModel,
    train_data: PreparedData,
    index: PatchIndex,
    client: LLMClient | None,
    mode: str = "full",
    slot_seconds: float = 100.0,
    k: int = 1,
) -> dict[str, TeacherRecord]:
    """Stage 3: retrieval-augmented reasoning over every training session.

    ``mode`` adjusts the evidence: "no_R" keeps the reasoning but strips
    retrieved summaries; "no_L" replaces reasoning with query/neighbor
    embedding averaging and needs no client.
    """
    if mode != "no_L" and client is None:
        raise ConfigurationError(f"mode {mode!r} requires a teacher client")
    records: dict[str, TeacherRecord] = {}
    model.eval()
    with torch.no_grad():
        forwards = [
            (session, grid, model(session, grid))
            for session, grid in train_data
        ]
    for session, grid, fwd in forwards:
        kps = select_key_patches(fwd, session.session_id, "query")
        if mode == "no_L":
            records[session.session_id] = _embedding_average_teacher(
                model, kps, index, k
            )
            continue
        pairs = []
        neighbor_ids: dict[int, str] = {}
        for patch, prompt in zip(kps.patches,
                                 _key_patch_prompts(kps, grid, slot_seconds)):
            summary = ""
            if mode != "no_R" and len(index):
                neighbors = retrieve(index, patch.embedding,
                                     kps.session_id, k)
                if neighbors:
                    summary = neighbors[0].entry.summary
                    neighbor_ids[patch.patch_id] = (
                        neighbors[0].entry.meta["session_id"]
                    )
            pairs.append(
                ReasoningPair(
                    patch_id=patch.patch_id,
                    query_patch=prompt.patch_desc,
                    similar_patch_ai_summary=summary,
                )
            )
        judgment, missing = request_judgment(
            client, ReasoningRequest(session.session_id, tuple(pairs))
        )
        records[session.session_id] = TeacherRecord.from_judgment(
            kps, judgment, teacher_missing=missing, neighbors=neighbor_ids
        )
    return records


@dataclass(frozen=True)
class InferenceResult:
    session_id: str
    score: float
    patch_scores: dict[tuple[str, int], float]


def infer_sessions(model: PatchGridModel,
                   data: PreparedData) -> list[InferenceResult]:
    """Score sessions with the backbone alone: no retrieval, no client."""
    model.eval()
    out = []
    with torch.no_grad():
        for session, grid in data:
            fwd = model(session, grid)
            scores = fwd.patch_scores
            out.append(
                InferenceResult(
                    session_id=session.session_id,
                    score=fwd.session_score,
                    patch_scores={
                        (m.user_id, m.slot): float(scores[i])
                        for i, m in enumerate(fwd.patch_meta)
                    },
                )
            )
    return out
