"""Prompt construction, response parsing, and teacher clients.

Two fixed prompts drive the teacher: one summarizes key patches in session
context, the other reasons over query patches paired with retrieved
cross-session summaries and returns structured multi-granularity scores.
Any text-in/text-out client can sit behind them; a deterministic mock
teacher (backed by the hidden synthetic truth) serves offline runs, and a
transcript cache makes reruns free.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

from .errors import OracleError, PromptValidationError, ResponseParseError
from .index import CallCounter
from .sessions import PatchGrid
from .synth import RISK_LEXICON, PatchTruth
from .text import tokenize

logger = logging.getLogger(__name__)

llm_calls = CallCounter()

MAX_PATCHES_PER_REQUEST = 8
RISK_TYPES = ("normal", "fraud", "gambling", "sexual")

REQUEST_MARKER = (
    "The live streaming session for this query is provided below:"
)
JSON_ONLY_REMINDER = (
    "\n\nRespond with JSON only, strictly following the output format."
)

SUMMARY_PROMPT_HEADER = """\
You are a senior risk control expert with ten years of experience countering underground black-market operations. You understand that malicious actors rarely expose themselves directly. Instead, they use a variety of covert tactics to carry out fraud, gambling, and sexual-content redirection.

Below are multiple user behavior patches from the same live stream (not exhaustive). Each patch represents the sequence of actions by a single user (the host or a viewer) within a 100-second time window. These patches originate from the same live session and may include carefully designed coordinated behavior.

Your task: act like a real risk control expert. From subtle traces, detect anomalies and identify behavior patterns that appear normal on the surface but are suspicious.

Guidelines for identifying covert risks:

1. Covert fraud behaviors: Scripted language masking using words such as "benefits", "discounts", "insider information" instead of explicit scam language; temporal dispersion to avoid concentrated operations; content dilution hiding one or two key guiding messages inside normal content.

2. Covert gambling behaviors: Euphemism system using codewords like "drive", "get on", "arrive" to refer to gambling; platform redirect to third-party platforms before gambling; game disguises such as "game trials", "predictions", "mystery box openings", "stone gambling", "cockfighting".

3. Sexual-content redirection behaviors: Implicit marketing like "special services", "private benefits", "one-on-one"; multi-platform coordination with hints in live session but actions elsewhere; identity packaging as "model", "host assistant", or "agent"; time-lag operations building trust then gradually guiding users toward prohibited content.

4. Behavior pattern recognition: Abnormal frequency, timing, or action combinations forming a violation chain.

5. Language pattern recognition: Over-enthusiasm to quickly build trust, creating urgency with "limited time" or "limited slots", authority packaging by impersonating official staff or professionals.

Analysis requirements: For each patch, perform in-depth analysis (beyond literal text), recognize patterns, analyze correlations between patches, and provide a risk score 0.0-1.0 with detailed explanation.

Input format:
{
  "session_id": "xxx",
  "patches": [
    {"patch_id": 1, "patch_desc": "host spoke 4 times at 00:29: ..."},
    {"patch_id": 2, "patch_desc": "host ..."}
  ]
}

Strict output format:
{
  "session_id": "session_12345",
  "patches": [
    {"patch_id": 1, "risk_score": 0.8, "explanation": "..."},
    {"patch_id": 2, "risk_score": 0.4, "explanation": "..."}
  ],
  "session_summary": "...",
  "overall_risk_score": 0.9,
  "primary_risk_type": "fraud",
  "coordination_indicators": true
}
"""

REASONING_PROMPT_HEADER = """\
You are a senior live streaming risk control expert with ten years of experience countering underground black-market operations. Malicious actors rarely expose themselves directly; they use covert tactics for fraud, gambling, or sexual-content redirection.

Below are multiple user behavior patches from the same live stream (not exhaustive). Each patch represents the actions of a single user within a 100-second time window, potentially with coordinated behavior.

Your task: Independently analyze the query patch, compare with AI-summarized similar patches, and produce a strict JSON judgment.

Analysis principles:
1) Independent analysis of the query patch always comes first;
2) AI summaries are only secondary references;
3) Base final decisions on the query patch, but note differences with similar patches;
4) Assign a saliency score (0.0-1.0) for each patch reflecting weight in overall risk, based on behavioral chain, frequency, coordination, and violation patterns.

Key risk indicators:
Fraud: scripted disguises (e.g., "benefits", "discounts"), content dilution, temporal dispersion.
Gambling: coded language ("drive", "get on", "arrive"), platform redirection, game disguises ("mystery boxes", "predictions", "stone gambling").
Sexual redirection: implicit marketing ("special services", "one-on-one"), multi-platform operation, identity packaging ("model", "assistant", "agent").
Behavioral/language patterns: abnormal frequency, timing, or combinations; over-enthusiasm, urgency, authority signals; coordinated behavior among patches.

Input format:
{
  "session_id": "xxx",
  "patches": [
    {"patch_id": 1, "query_patch": "...", "similar_patch_ai_summary": "..."},
    {"patch_id": 2, "query_patch": "...", "similar_patch_ai_summary": "..."}
  ]
}

Output format (strict JSON):
{
  "session_id": "xxx",
  "patches": [
    {"patch_id": 1, "risk_score": 0.0, "saliency": 0.0, "explanation": "..."}
  ],
  "session_summary": "...",
  "overall_risk_score": 0.0,
  "primary_risk_type": "fraud | gambling | sexual | normal",
  "coordination_indicators": false
}

Reminders: Independent analysis has priority. Explanations must distinguish independent findings vs. similar patch references. Focus on patterns, abnormal frequencies, and potential coordination. Use behavioral chain logic (actions -> results -> risks). Strictly follow output constraints: overall_risk_score 0.0-1.0, primary_risk_type from [normal, fraud, gambling, sexual], saliency 0.0-1.0 per patch.
"""


# --- requests --------------------------------------------------------------


@dataclass(frozen=True)
class PatchPrompt:
    patch_id: int
    patch_desc: str


@dataclass(frozen=True)
class SummaryRequest:
    session_id: str
    patches: tuple[PatchPrompt, ...]


@dataclass(frozen=True)
class ReasoningPair:
    patch_id: int
    query_patch: str
    similar_patch_ai_summary: str = ""


@dataclass(frozen=True)
class ReasoningRequest:
    session_id: str
    patches: tuple[ReasoningPair, ...]


def _validate_patch_ids(ids: list[int]) -> None:
    if not ids:
        raise PromptValidationError("request contains no patches")
    if len(ids) > MAX_PATCHES_PER_REQUEST:
        raise PromptValidationError(
            f"{len(ids)} patches exceed the cap of {MAX_PATCHES_PER_REQUEST}"
        )
    if len(set(ids)) != len(ids):
        raise PromptValidationError(f"duplicate patch ids in {ids}")
    if any((not isinstance(i, int)) or i < 1 for i in ids):
        raise PromptValidationError(f"patch ids must be 1-based ints: {ids}")


def summary_request_payload(req: SummaryRequest) -> dict:
    return {
        "session_id": req.session_id,
        "patches": [
            {"patch_id": p.patch_id, "patch_desc": p.patch_desc}
            for p in req.patches
        ],
    }


def reasoning_request_payload(req: ReasoningRequest) -> dict:
    return {
        "session_id": req.session_id,
        "patches": [
            {
                "patch_id": p.patch_id,
                "query_patch": p.query_patch,
                "similar_patch_ai_summary": p.similar_patch_ai_summary,
            }
            for p in req.patches
        ],
    }


def _render(header: str, payload: dict) -> str:
    body = json.dumps(payload, indent=2, ensure_ascii=False)
    return f"{header}\n{REQUEST_MARKER}\n{body}\n"


def build_summary_prompt(req: SummaryRequest) -> str:
    """Render the summarization prompt; byte-stable for identical input."""
    _validate_patch_ids([p.patch_id for p in req.patches])
    return _render(SUMMARY_PROMPT_HEADER, summary_request_payload(req))


def build_reasoning_prompt(req: ReasoningRequest) -> str:
    """Render the evidence-integrated prompt; missing neighbors serialize
    as empty summary strings so the pair structure stays fixed."""
    _validate_patch_ids([p.patch_id for p in req.patches])
    return _render(REASONING_PROMPT_HEADER, reasoning_request_payload(req))


def describe_patch(grid: PatchGrid, user_id: str, slot: int,
                   slot_seconds: float = 100.0) -> str:
    """Concatenate a patch's raw action texts with role/time framing.

    The leading "<role> <user> @slot <k>" frame is machine-parseable; the
    mock teacher relies on it to locate the cell in the hidden truth map.
    """
    actions = grid.patches[(user_id, slot)]
    role = grid.role_of(user_id)

    def mmss(seconds: float) -> str:
        s = int(round(seconds))
        return f"{s // 60:02d}:{s % 60:02d}"

    start, end = (slot - 1) * slot_seconds, slot * slot_seconds
    parts = []
    for a in actions:
        text = a.raw_text.strip()
        parts.append(f"[{a.action_type}] {text}" if text else
                     f"[{a.action_type}]")
    return (
        f"{role} {user_id} @slot {slot} ({mmss(start)}-{mmss(end)}): "
        f"{len(actions)} actions: " + " | ".join(parts)
    )


# --- response parsing ------------------------------------------------------


def extract_first_json(text: str):
    """Return the first JSON value embedded anywhere in the text."""
    decoder = json.JSONDecoder()
    for i, ch in enumerate(text):
        if ch in "{[":
            try:
                value, _ = decoder.raw_decode(text[i:])
                return value
            except json.JSONDecodeError:
                continue
    raise ResponseParseError("no JSON value found in response")


def _coerce_patch_id(raw) -> int:
    if isinstance(raw, bool):
        raise ResponseParseError(f"invalid patch_id {raw!r}")
    if isinstance(raw, int):
        return raw
    if isinstance(raw, str) and raw.strip().isdigit():
        return int(raw.strip())
    raise ResponseParseError(f"invalid patch_id {raw!r}")


def _score(raw, name: str) -> float:
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise ResponseParseError(f"{name} must be a number, got {raw!r}")
    value = float(raw)
    if not 0.0 <= value <= 1.0:
        raise ResponseParseError(f"{name}={value} outside [0, 1]")
    return value


def _check_ids(found: list[int], expected: list[int]) -> None:
    if len(found) != len(set(found)):
        raise ResponseParseError(f"duplicate patch ids in response: {found}")
    if set(found) != set(expected):
        raise ResponseParseError(
            f"response patch ids {sorted(found)} != requested "
            f"{sorted(expected)}"
        )


def parse_summary_response(text: str,
                           expected_patch_ids: list[int]) -> dict[int, str]:
    """Parse per-patch summaries out of a summarization response.

    Accepts both the bare-list form ([{"patch_id": ..., "summary": ...}])
    and the strict output format, whose per-patch explanation doubles as
    the summary.
    """
    value = extract_first_json(text)
    if isinstance(value, dict):
        records = value.get("patches")
        if not isinstance(records, list):
            raise ResponseParseError("response object lacks a patches list")
    elif isinstance(value, list):
        records = value
    else:
        raise ResponseParseError(f"unexpected JSON of type {type(value)}")

    summaries: dict[int, str] = {}
    ids = []
    for rec in records:
        if not isinstance(rec, dict):
            raise ResponseParseError(f"patch record is not an object: {rec!r}")
        pid = _coerce_patch_id(rec.get("patch_id"))
        summary = rec.get("summary", rec.get("explanation"))
        if not isinstance(summary, str) or not summary:
            raise ResponseParseError(f"patch {pid} has no usable summary")
        ids.append(pid)
        summaries[pid] = summary
    _check_ids(ids, expected_patch_ids)
    return summaries


@dataclass(frozen=True)
class PatchJudgment:
    risk_score: float
    saliency: float
    explanation: str = ""


@dataclass(frozen=True)
class LLMJudgment:
    """Validated structured output of one reasoning call."""

    session_id: str
    patches: dict[int, PatchJudgment]
    overall_risk_score: float
    primary_risk_type: str
    coordination_indicators: bool
    session_summary: str = ""


def parse_reasoning_response(text: str,
                             expected_patch_ids: list[int]) -> LLMJudgment:
    """Strictly validate a reasoning response.

    Out-of-range scores and unknown risk types are parse errors, never
    clamped; silent repair would hide teacher drift.
    """
    value = extract_first_json(text)
    if not isinstance(value, dict):
        raise ResponseParseError("reasoning response must be a JSON object")
    records = value.get("patches")
    if not isinstance(records, list):
        raise ResponseParseError("response object lacks a patches list")

    patches: dict[int, PatchJudgment] = {}
    ids = []
    for rec in records:
        if not isinstance(rec, dict):
            raise ResponseParseError(f"patch record is not an object: {rec!r}")
        pid = _coerce_patch_id(rec.get("patch_id"))
        explanation = rec.get("explanation", "")
        if not isinstance(explanation, str):
            raise ResponseParseError(f"patch {pid} explanation is not text")
        patches[pid] = PatchJudgment(
            risk_score=_score(rec.get("risk_score"), f"patch {pid} risk_score"),
            saliency=_score(rec.get("saliency"), f"patch {pid} saliency"),
            explanation=explanation,
        )
        ids.append(pid)
    _check_ids(ids, expected_patch_ids)

    risk_type = value.get("primary_risk_type")
    if risk_type not in RISK_TYPES:
        raise ResponseParseError(f"unknown primary_risk_type {risk_type!r}")
    coordination = value.get("coordination_indicators")
    if not isinstance(coordination, bool):
        raise ResponseParseError("coordination_indicators must be a boolean")
    summary = value.get("session_summary", "")
    if not isinstance(summary, str):
        raise ResponseParseError("session_summary must be text")
    return LLMJudgment(
        session_id=str(value.get("session_id", "")),
        patches=patches,
        overall_risk_score=_score(value.get("overall_risk_score"),
                                  "overall_risk_score"),
        primary_risk_type=risk_type,
        coordination_indicators=coordination,
        session_summary=summary,
    )


# --- deterministic mock teacher ---------------------------------------------

_DESC_FRAME_RE = re.compile(r"^(host|viewer) (\S+) @slot (\d+)\b")


def _unit_float(*parts) -> float:
    digest = hashlib.blake2b(
        ":".join(str(p) for p in parts).encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little") / 2.0**64


def _frame_of(desc: str) -> tuple[str, str, int]:
    m = _DESC_FRAME_RE.match(desc)
    if not m:
        raise OracleError(f"patch description lacks the role/slot frame: "
                          f"{desc[:60]!r}")
    return m.group(1), m.group(2), int(m.group(3))


def mock_oracle(request: SummaryRequest | ReasoningRequest,
                truth: PatchTruth, seed: int = 0) -> str:
    """Deterministic stand-in teacher for offline runs.

    Patches on planted cells score in the 0.8-0.95 band (seeded jitter),
    others in 0.02-0.2. Saliency grows with the patch's planted-vocabulary
    density: 0.05 + 0.95 * (lexicon hits / tokens). The session score is
    0.7 * max + 0.3 * mean of the patch scores. Output is always valid
    under the strict response format.
    """
    sid = request.session_id
    if not truth.knows(sid):
        raise OracleError(f"unknown session {sid!r} in truth map")

    with_saliency = isinstance(request, ReasoningRequest)
    rows = []
    risks = []
    risky_users = set()
    for p in request.patches:
        desc = p.query_patch if with_saliency else p.patch_desc
        role, user, slot = _frame_of(desc)
        risky = truth.is_risky(sid, user, slot)
        jitter = _unit_float(seed, sid, p.patch_id, "risk")
        risk = 0.8 + 0.15 * jitter if risky else 0.02 + 0.18 * jitter
        risk = round(risk, 4)
        risks.append(risk)
        if risky:
            risky_users.add(user)

        tokens = tokenize(desc)
        hits = sum(1 for t in tokens if t in RISK_LEXICON)
        found = sorted({t for t in tokens if t in RISK_LEXICON})[:3]
        if risky:
            explanation = (
                f"The {role}'s slot-{slot} burst leans on persuasion cues "
                f"({', '.join(found) or 'scripted phrasing'}) consistent "
                f"with a staged promotion-to-redirect chain."
            )
        else:
            explanation = (
                f"Routine {role} activity in slot {slot}; no persuasion "
                f"chain or coordination signal."
            )
        row = {"patch_id": p.patch_id, "risk_score": risk}
        if with_saliency:
            row["saliency"] = round(
                min(1.0, 0.05 + 0.95 * hits / max(1, len(tokens))), 4
            )
        row["explanation"] = explanation
        rows.append(row)

    overall = round(0.7 * max(risks) + 0.3 * sum(risks) / len(risks), 4)
    any_risky = bool(risky_users)
    response = {
        "session_id": sid,
        "patches": rows,
        "session_summary": (
            "Coordinated scripted selling with staged testimonials and "
            "an off-platform redirect." if any_risky
            else "Ordinary streaming interaction without risk chains."
        ),
        "overall_risk_score": overall,
        "primary_risk_type": "fraud" if any_risky else "normal",
        "coordination_indicators": len(risky_users) >= 2,
    }
    return json.dumps(response, ensure_ascii=False)


# --- clients ----------------------------------------------------------------


class LLMClient(Protocol):
    def complete(self, prompt: str) -> str: ...


@dataclass(frozen=True)
class HTTPClientConfig:
    endpoint: str
    model: str
    api_key_env: str = "STREAMRISK_LLM_API_KEY"
    timeout: float = 60.0
    max_retries: int = 2


class HTTPLLMClient:
    """Minimal chat-completions client; any HTTP provider adapts behind it."""

    def __init__(self, cfg: HTTPClientConfig, transport=None):
        self.cfg = cfg
        self._transport = transport or self._post

    def _post(self, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.cfg.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        req = urllib.request.Request(
            self.cfg.endpoint,
            data=json.dumps(payload).encode("utf-8"),
            headers=headers,
            method="POST",
        )
        with urllib.request.urlopen(req, timeout=self.cfg.timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))

    def complete(self, prompt: str) -> str:
        payload = {
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
        }
        last_error: Exception | None = None
        for _ in range(self.cfg.max_retries + 1):
            llm_calls.bump()
            try:
                body = self._transport(payload)
                return body["choices"][0]["message"]["content"]
            except (urllib.error.URLError, KeyError, TimeoutError) as exc:
                last_error = exc
                logger.warning("LLM call failed, retrying: %s", exc)
        raise ResponseParseError(f"LLM endpoint unreachable: {last_error}")


def parse_request_from_prompt(
    prompt: str,
) -> SummaryRequest | ReasoningRequest:
    """Recover the serialized request from a rendered prompt."""
    _, _, tail = prompt.rpartition(REQUEST_MARKER)
    payload = extract_first_json(tail)
    patches = payload["patches"]
    if patches and "query_patch" in patches[0]:
        return ReasoningRequest(
            session_id=payload["session_id"],
            patches=tuple(
                ReasoningPair(
                    patch_id=p["patch_id"],
                    query_patch=p["query_patch"],
                    similar_patch_ai_summary=p.get(
                        "similar_patch_ai_summary", ""
                    ),
                )
                for p in patches
            ),
        )
    return SummaryRequest(
        session_id=payload["session_id"],
        patches=tuple(
            PatchPrompt(patch_id=p["patch_id"], patch_desc=p["patch_desc"])
            for p in patches
        ),
    )


class MockLLMClient:
    """Answers rendered prompts with the deterministic mock teacher."""

    def __init__(self, truth: PatchTruth, seed: int = 0):
        self.truth = truth
        self.seed = seed

    def complete(self, prompt: str) -> str:
        llm_calls.bump()
        request = parse_request_from_prompt(prompt)
        return mock_oracle(request, self.truth, self.seed)


class CachingLLMClient:
    """JSON-lines transcript cache keyed by prompt hash; reruns are free."""

    def __init__(self, inner: LLMClient, cache_path: str | Path):
        self.inner = inner
        self.cache_path = Path(cache_path)
        self.misses = 0
        self._cache: dict[str, str] = {}
        if self.cache_path.exists():
            with self.cache_path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._cache[rec["key"]] = rec["response"]

    @staticmethod
    def _key(prompt: str) -> str:
        return hashlib.sha256(prompt.encode("utf-8")).hexdigest()

    def complete(self, prompt: str) -> str:
        key = self._key(prompt)
        if key in self._cache:
            return self._cache[key]
        self.misses += 1
        response = self.inner.complete(prompt)
        self._cache[key] = response
        self.cache_path.parent.mkdir(parents=True, exist_ok=True)
        with self.cache_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps({"key": key, "response": response},
                                ensure_ascii=False))
            fh.write("\n")
        return response


# --- structured calls with the retry/fallback policy ------------------------


def request_summaries(client: LLMClient,
                      req: SummaryRequest) -> dict[int, str]:
    """Summarize key patches; falls back to the raw descriptions if the
    client cannot produce parseable output twice in a row."""
    prompt = build_summary_prompt(req)
    expected = [p.patch_id for p in req.patches]
    try:
        return parse_summary_response(client.complete(prompt), expected)
    except ResponseParseError as exc:
        logger.warning("summary parse failed, retrying: %s", exc)
    try:
        return parse_summary_response(
            client.complete(prompt + JSON_ONLY_REMINDER), expected
        )
    except ResponseParseError as exc:
        logger.warning("summary parse failed twice, using raw descriptions: "
                       "%s", exc)
        return {p.patch_id: p.patch_desc for p in req.patches}


def request_judgment(client: LLMClient,
                     req: ReasoningRequest) -> tuple[LLMJudgment, bool]:
    """Run evidence-integrated reasoning with one retry.

    After a second parse failure the session gets a neutral judgment
    (risk 0.5 per patch, uniform saliency, session 0.5) and is flagged
    teacher-missing so distillation zeroes its auxiliary losses.
    """
    prompt = build_reasoning_prompt(req)
    expected = [p.patch_id for p in req.patches]
    try:
        return parse_reasoning_response(client.complete(prompt),
                                        expected), False
    except ResponseParseError as exc:
        logger.warning("reasoning parse failed, retrying: %s", exc)
    try:
        return parse_reasoning_response(
            client.complete(prompt + JSON_ONLY_REMINDER), expected
        ), False
    except ResponseParseError as exc:
        logger.warning("reasoning parse failed twice, substituting a "
                       "neutral judgment: %s", exc)
    neutral = LLMJudgment(
        session_id=req.session_id,
        patches={
            p.patch_id: PatchJudgment(
                risk_score=0.5,
                saliency=1.0 / len(req.patches),
                explanation="neutral fallback",
            )
            for p in req.patches
        },
        overall_risk_score=0.5,
        primary_risk_type="normal",
        coordination_indicators=False,
    )
    return neutral, True
