"""Session data model: actions, temporal discretization, and the patch grid.

A session is one live stream's bounded window of host and viewer actions.
Slicing it on the (user, timeslot) plane yields patches, the basic evidence
unit everything downstream works on.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateSessionError, OutOfRangeError

logger = logging.getLogger(__name__)

VIEWER_ACTION_TYPES = (
    "entry",
    "comment",
    "gift",
    "like",
    "share",
    "leaderboard",
    "group-join",
    "co-stream-request",
)
HOST_ACTION_TYPES = (
    "stream-start",
    "speech-transcript",
    "ocr-content",
)
ACTION_TYPES = VIEWER_ACTION_TYPES + HOST_ACTION_TYPES
ACTION_TYPE_IDS = {name: i for i, name in enumerate(ACTION_TYPES)}

HOST_ROLE = "host"
VIEWER_ROLE = "viewer"


@dataclass
class Action:
    """One user event inside a session.

    ``timestamp`` is seconds from session start. ``text_embedding`` is the
    pre-encoded text vector; ``raw_text`` is kept for prompt construction and
    may be empty for non-textual actions (likes, entries, ...).
    """

    user_id: str
    timestamp: float
    action_type: str
    text_embedding: np.ndarray
    raw_text: str = ""

    def __post_init__(self) -> None:
        if self.action_type not in ACTION_TYPE_IDS:
            raise ValueError(f"unknown action type: {self.action_type!r}")
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp: {self.timestamp}")
        self.text_embedding = np.asarray(self.text_embedding, dtype=np.float32)
        if self.text_embedding.ndim != 1:
            raise ValueError("text_embedding must be a 1-d vector")
        if not np.all(np.isfinite(self.text_embedding)):
            raise ValueError("text_embedding contains non-finite values")


@dataclass
class Session:
    """A bounded window of actions by one host and their viewers."""

    session_id: str
    host_id: str
    viewer_ids: frozenset[str]
    actions: list[Action]
    label: int | None = None

    def __post_init__(self) -> None:
        if self.host_id in self.viewer_ids:
            raise ValueError(f"host {self.host_id!r} listed among viewers")
        users = {self.host_id} | set(self.viewer_ids)
        for a in self.actions:
            if a.user_id not in users:
                raise ValueError(f"action by unknown user {a.user_id!r}")
        for prev, cur in zip(self.actions, self.actions[1:]):
            if cur.timestamp < prev.timestamp:
                raise ValueError("actions are not sorted by timestamp")
        if self.label is not None and self.label not in (0, 1):
            raise ValueError(f"label must be 0/1, got {self.label!r}")

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    def role_of(self, user_id: str) -> str:
        return HOST_ROLE if user_id == self.host_id else VIEWER_ROLE


@dataclass(frozen=True)
class DiscretizationConfig:
    """Split the [0, horizon] window into equal, non-overlapping slots."""

    horizon_seconds: float = 1800.0
    slot_seconds: float = 100.0

    def __post_init__(self) -> None:
        if self.horizon_seconds <= 0 or self.slot_seconds <= 0:
            raise ConfigurationError("horizon and slot width must be positive")
        ratio = self.horizon_seconds / self.slot_seconds
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigurationError(
                f"horizon {self.horizon_seconds} is not a multiple of "
                f"slot width {self.slot_seconds}"
            )

    @property
    def slot_count(self) -> int:
        return int(round(self.horizon_seconds / self.slot_seconds))


@dataclass(frozen=True)
class PreprocessConfig:
    """Truncation and activity-filter rules applied to raw sessions."""

    horizon_seconds: float = 1800.0
    max_viewers: int = 50
    max_actions: int = 2096

    def __post_init__(self) -> None:
        if self.max_viewers < 1 or self.max_actions < 1:
            raise ConfigurationError("caps must be at least 1")


def slot_of(timestamp: float, cfg: DiscretizationConfig) -> int:
    """Return the 1-based slot containing ``timestamp``.

    Slot k covers [(k-1)*slot, k*slot). The exact right endpoint of the
    window is assigned to the final slot instead of being rejected.
    """
    if timestamp < 0 or timestamp > cfg.horizon_seconds:
        raise OutOfRangeError(
            f"timestamp {timestamp} outside [0, {cfg.horizon_seconds}]"
        )
    if timestamp == cfg.horizon_seconds:
        return cfg.slot_count
    return int(math.floor(timestamp / cfg.slot_seconds)) + 1


def preprocess(session: Session, cfg: PreprocessConfig) -> Session:
    """Apply horizon truncation, viewer selection, and the action cap.

    Viewers are ranked by action count inside the window, ties broken by
    first appearance; all but the ``max_viewers`` most active are dropped
    with their actions. The surviving sequence keeps its earliest
    ``max_actions`` actions. The host is never removed.
    """
    kept = [a for a in session.actions if a.timestamp <= cfg.horizon_seconds]

    counts: dict[str, int] = {}
    first_seen: dict[str, int] = {}
    for i, a in enumerate(kept):
        if a.user_id == session.host_id:
            continue
        counts[a.user_id] = counts.get(a.user_id, 0) + 1
        first_seen.setdefault(a.user_id, i)
    ranked = sorted(counts, key=lambda u: (-counts[u], first_seen[u]))
    keep_users = set(ranked[: cfg.max_viewers])
    keep_users.add(session.host_id)

    kept = [a for a in kept if a.user_id in keep_users]
    kept = kept[: cfg.max_actions]
    if not kept:
        raise DegenerateSessionError(
            f"session {session.session_id!r} empty after preprocessing"
        )

    viewers = frozenset(a.user_id for a in kept) - {session.host_id}
    return Session(
        session_id=session.session_id,
        host_id=session.host_id,
        viewer_ids=viewers,
        actions=kept,
        label=session.label,
    )


@dataclass
class PatchGrid:
    """Per-session map from (user, slot) to that user's actions in the slot.

    Empty cells are absent. ``action_indices`` holds each patch's action
    positions within the owning session's chronological sequence.
    ``user_first_index`` records where each user first acted, which fixes
    all activity tie-breaks.
    """

    session_id: str
    host_id: str
    slot_count: int
    patches: dict[tuple[str, int], list[Action]]
    user_first_index: dict[str, int]
    action_indices: dict[tuple[str, int], list[int]] = field(
        default_factory=dict
    )

    def role_of(self, user_id: str) -> str:
        return HOST_ROLE if user_id == self.host_id else VIEWER_ROLE

    def activity(self, user_id: str) -> int:
        return sum(
            len(acts) for (u, _), acts in self.patches.items() if u == user_id
        )

    @property
    def n_patches(self) -> int:
        return len(self.patches)

    @property
    def n_actions(self) -> int:
        return sum(len(acts) for acts in self.patches.values())

    def users(self) -> list[str]:
        seen: dict[str, None] = {}
        for u, _ in self.patches:
            seen.setdefault(u, None)
        return list(seen)


def build_patch_grid(session: Session, cfg: DiscretizationConfig) -> PatchGrid:
    """Partition a preprocessed session's actions into (user, slot) patches."""
    patches: dict[tuple[str, int], list[Action]] = {}
    indices: dict[tuple[str, int], list[int]] = {}
    first_index: dict[str, int] = {}
    for i, a in enumerate(session.actions):
        key = (a.user_id, slot_of(a.timestamp, cfg))
        patches.setdefault(key, []).append(a)
        indices.setdefault(key, []).append(i)
        first_index.setdefault(a.user_id, i)
    return PatchGrid(
        session_id=session.session_id,
        host_id=session.host_id,
        slot_count=cfg.slot_count,
        patches=patches,
        user_first_index=first_index,
        action_indices=indices,
    )


def flatten_grid(grid: PatchGrid) -> list[tuple[str, int]]:
    """Order patches user-then-slot: host first, then viewers by activity.

    Host patches come first in ascending slot order, then each viewer's
    patches (ascending slot), viewers sorted by descending activity with
    ties broken by first appearance. Deterministic for a fixed grid.
    """
    if not grid.patches:
        raise DegenerateSessionError(
            f"session {grid.session_id!r} has an empty patch grid"
        )
    by_user: dict[str, list[int]] = {}
    counts: dict[str, int] = {}
    for (u, k), acts in grid.patches.items():
        by_user.setdefault(u, []).append(k)
        counts[u] = counts.get(u, 0) + len(acts)

    order: list[tuple[str, int]] = []
    if grid.host_id in by_user:
        for k in sorted(by_user[grid.host_id]):
            order.append((grid.host_id, k))
    viewers = [u for u in by_user if u != grid.host_id]
    viewers.sort(key=lambda u: (-counts[u], grid.user_first_index[u]))
    for u in viewers:
        for k in sorted(by_user[u]):
            order.append((u, k))
    return order


# --- dataset file format -------------------------------------------------
#
# JSON-lines, one session per line:
#   {"session_id": ..., "host_id": ...,
#    "actions": [{"user_id": ..., "t": ..., "type": ..., "text": ...}, ...],
#    "label": 0|1|null}
# Text embeddings are computed at load time by the supplied encoder and are
# never stored in the file.


def session_to_json(session: Session) -> dict:
    return {
        "session_id": session.session_id,
        "host_id": session.host_id,
        "actions": [
            {
                "user_id": a.user_id,
                "t": a.timestamp,
                "type": a.action_type,
                "text": a.raw_text,
            }
            for a in session.actions
        ],
        "label": session.label,
    }


def session_from_json(
    obj: dict,
    encoder: Callable[[str], np.ndarray],
    _cache: dict[str, np.ndarray] | None = None,
) -> Session:
    cache = _cache if _cache is not None else {}
    records = sorted(enumerate(obj["actions"]), key=lambda p: (p[1]["t"], p[0]))
    actions = []
    for _, rec in records:
        text = rec.get("text", "") or ""
        emb = cache.get(text)
        if emb is None:
            emb = encoder(text)
            cache[text] = emb
        actions.append(
            Action(
                user_id=rec["user_id"],
                timestamp=float(rec["t"]),
                action_type=rec["type"],
                text_embedding=emb,
                raw_text=text,
            )
        )
    host = obj["host_id"]
    viewers = frozenset(a.user_id for a in actions) - {host}
    label = obj.get("label")
    return Session(
        session_id=obj["session_id"],
        host_id=host,
        viewer_ids=viewers,
        actions=actions,
        label=None if label is None else int(label),
    )


def write_sessions(path: str | Path, sessions: Iterable[Session]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for s in sessions:
            fh.write(json.dumps(session_to_json(s), ensure_ascii=False))
            fh.write("\n")


def read_sessions(
    path: str | Path, encoder: Callable[[str], np.ndarray]
) -> list[Session]:
    cache: dict[str, np.ndarray] = {}
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(session_from_json(json.loads(line), encoder, cache))
    return out


def prepare_sessions(
    sessions: Sequence[Session],
    pre_cfg: PreprocessConfig,
    disc_cfg: DiscretizationConfig,
) -> list[tuple[Session, PatchGrid]]:
    """Preprocess and grid a batch, skipping degenerate sessions with a warning."""
    out = []
    for s in sessions:
        try:
            p = preprocess(s, pre_cfg)
        except DegenerateSessionError:
            logger.warning("skipping degenerate session %s", s.session_id)
            continue
        out.append((p, build_patch_grid(p, disc_cfg)))
    return out
