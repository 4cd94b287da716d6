"""Key-patch selection and the cross-session evidence index.

Selection keeps the patches the session summary attended to most, split by
role: up to five host patches and three viewer patches. Their refined
embeddings, L2-normalized so inner product equals cosine, become queries
and index entries. Retrieval is an exact scan with same-session exclusion;
at the target scale (tens of thousands of entries) exactness costs
nothing, and an approximate backend can replace the scan behind the same
interface if that changes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from .errors import ConfigurationError
from .model import ForwardOutput
from .sessions import HOST_ROLE, VIEWER_ROLE

MAX_HOST_PATCHES = 5
MAX_VIEWER_PATCHES = 3


class CallCounter:
    """Process-wide counter used to assert stage isolation at inference."""

    def __init__(self) -> None:
        self.value = 0

    def bump(self) -> None:
        self.value += 1


retrieval_calls = CallCounter()


def _normalize(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ConfigurationError("cannot index a zero embedding")
    return vec / norm


@dataclass(frozen=True)
class KeyPatch:
    """A selected patch: its attention weight plus the retrieval vector."""

    patch_id: int               # 1-based within the session's selection
    user_id: str
    role: str
    slot: int
    weight: float
    embedding: np.ndarray       # L2-normalized refined embedding


@dataclass(frozen=True)
class KeyPatchSet:
    session_id: str
    session_score: float
    host_patches: tuple[KeyPatch, ...]
    viewer_patches: tuple[KeyPatch, ...]

    @property
    def patches(self) -> tuple[KeyPatch, ...]:
        return self.host_patches + self.viewer_patches


def select_key_patches(
    fwd: ForwardOutput,
    session_id: str,
    purpose: Literal["index", "query"],
    threshold: float = 0.5,
    max_host: int = MAX_HOST_PATCHES,
    max_viewer: int = MAX_VIEWER_PATCHES,
) -> KeyPatchSet | None:
    """Pick the top-attention patches per role.

    For ``purpose="index"`` the session must be predicted positive
    (score >= threshold), otherwise None is returned; queries are always
    formed. Within a role, ranking is by attention weight, ties broken by
    earlier slot and then flattened order.
    """
    score = fwd.session_score
    if purpose == "index" and score < threshold:
        return None

    alpha = fwd.alpha_np
    refined = fwd.refined.detach().cpu().numpy()
    by_role: dict[str, list[int]] = {HOST_ROLE: [], VIEWER_ROLE: []}
    for i, meta in enumerate(fwd.patch_meta):
        by_role[meta.role].append(i)

    def top(indices: list[int], cap: int) -> list[int]:
        ranked = sorted(
            indices,
            key=lambda i: (-alpha[i], fwd.patch_meta[i].slot, i),
        )
        return ranked[:cap]

    picks = top(by_role[HOST_ROLE], max_host) + top(
        by_role[VIEWER_ROLE], max_viewer
    )
    patches = []
    for pid, i in enumerate(picks, start=1):
        meta = fwd.patch_meta[i]
        patches.append(
            KeyPatch(
                patch_id=pid,
                user_id=meta.user_id,
                role=meta.role,
                slot=meta.slot,
                weight=float(alpha[i]),
                embedding=_normalize(refined[i]),
            )
        )
    n_host = len(top(by_role[HOST_ROLE], max_host))
    return KeyPatchSet(
        session_id=session_id,
        session_score=score,
        host_patches=tuple(patches[:n_host]),
        viewer_patches=tuple(patches[n_host:]),
    )


@dataclass(frozen=True)
class IndexEntry:
    embedding: np.ndarray       # L2-normalized, float64
    summary: str
    meta: dict

    def __post_init__(self) -> None:
        if "session_id" not in self.meta:
            raise ConfigurationError("index entry meta lacks session_id")
        norm = float(np.linalg.norm(self.embedding))
        if abs(norm - 1.0) > 1e-6:
            raise ConfigurationError(
                f"index entry embedding norm {norm} is not 1"
            )


def make_entry(patch: KeyPatch, session_id: str, summary: str) -> IndexEntry:
    return IndexEntry(
        embedding=patch.embedding,
        summary=summary,
        meta={
            "session_id": session_id,
            "user_id": patch.user_id,
            "role": patch.role,
            "slot": patch.slot,
        },
    )


@dataclass(frozen=True)
class RetrievalResult:
    entry: IndexEntry
    score: float


class PatchIndex:
    """Immutable snapshot of entries supporting exact cosine top-K search.

    Insertion order is preserved and breaks cosine ties, so retrieval
    fixtures reproduce. Rebuilds create a new snapshot; concurrent readers
    of an existing snapshot are safe.
    """

    def __init__(self, entries: Sequence[IndexEntry]):
        self._entries = tuple(entries)
        if self._entries:
            dims = {e.embedding.shape[0] for e in self._entries}
            if len(dims) != 1:
                raise ConfigurationError(
                    f"mixed embedding dimensions in index: {sorted(dims)}"
                )
            self._matrix = np.stack(
                [np.asarray(e.embedding, dtype=np.float64)
                 for e in self._entries]
            )
            self._session_ids = np.array(
                [e.meta["session_id"] for e in self._entries]
            )
        else:
            self._matrix = np.zeros((0, 0), dtype=np.float64)
            self._session_ids = np.array([], dtype=object)

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def dim(self) -> int:
        return self._matrix.shape[1]

    @property
    def entries(self) -> tuple[IndexEntry, ...]:
        return self._entries

    def search(
        self, query: np.ndarray, exclude_session: str, k: int
    ) -> list[RetrievalResult]:
        if k < 1:
            raise ConfigurationError("k must be >= 1")
        if not self._entries:
            return []
        query = _normalize(query)
        if query.shape[0] != self.dim:
            raise ConfigurationError(
                f"query dim {query.shape[0]} != index dim {self.dim}"
            )
        scores = self._matrix @ query
        eligible = np.flatnonzero(self._session_ids != exclude_session)
        if eligible.size == 0:
            return []
        # Stable sort on descending score keeps insertion order among ties.
        ranked = eligible[np.argsort(-scores[eligible], kind="stable")][:k]
        return [
            RetrievalResult(entry=self._entries[i], score=float(scores[i]))
            for i in ranked
        ]


def build_index(entries: Iterable[IndexEntry]) -> PatchIndex:
    return PatchIndex(list(entries))


def retrieve(
    index: PatchIndex,
    query_embedding: np.ndarray,
    query_session_id: str,
    k: int = 1,
) -> list[RetrievalResult]:
    """Top-K neighbors by cosine among entries from other sessions."""
    retrieval_calls.bump()
    return index.search(query_embedding, query_session_id, k)


# --- persistence ----------------------------------------------------------
#
# A directory holding:
#   embeddings.bin   little-endian; header = magic "SRIX", uint32 version,
#                    uint32 rows, uint32 dim; then rows*dim float32
#   metadata.jsonl   one {"summary":..., "meta":...} record per row

_MAGIC = b"SRIX"
_VERSION = 1
EMBEDDINGS_FILE = "embeddings.bin"
METADATA_FILE = "metadata.jsonl"


def save_index(index: PatchIndex, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows, dim = (len(index), index.dim) if len(index) else (0, 0)
    with (directory / EMBEDDINGS_FILE).open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", _VERSION, rows, dim))
        for entry in index.entries:
            fh.write(entry.embedding.astype("<f4").tobytes())
    with (directory / METADATA_FILE).open("w", encoding="utf-8") as fh:
        for entry in index.entries:
            fh.write(json.dumps({"summary": entry.summary,
                                 "meta": entry.meta}, ensure_ascii=False))
            fh.write("\n")


def load_index(directory: str | Path) -> PatchIndex:
    directory = Path(directory)
    raw = (directory / EMBEDDINGS_FILE).read_bytes()
    if raw[:4] != _MAGIC:
        raise ConfigurationError(f"{directory} is not an index directory")
    version, rows, dim = struct.unpack("<III", raw[4:16])
    if version != _VERSION:
        raise ConfigurationError(f"unsupported index version {version}")
    matrix = np.frombuffer(raw[16:], dtype="<f4").reshape(rows, dim)
    records = []
    with (directory / METADATA_FILE).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    if len(records) != rows:
        raise ConfigurationError(
            f"metadata rows {len(records)} != embedding rows {rows}"
        )
    entries = [
        IndexEntry(
            embedding=_normalize(matrix[i]),
            summary=rec["summary"],
            meta=rec["meta"],
        )
        for i, rec in enumerate(records)
    ]
    return PatchIndex(entries)
