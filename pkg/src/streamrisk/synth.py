"""Synthetic session generator with planted recurring risk chains.

Positive sessions carry one scripted scam routine (promotion, shill
testimonial, urgency, redirect) spread across host and shill patches in
distinct timeslots. The same template recurs across many sessions under
different surface themes, so cross-session retrieval has real signal to
find. Negative sessions are background chatter, occasionally salted with a
lone risky-sounding word so single-token shortcuts do not work.

The generator also produces a hidden ``PatchTruth`` map of planted cells.
Training code must never read it; only the mock teacher and the test
harness may.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .sessions import Action, DiscretizationConfig, Session
from .text import HashingTextEncoder

# Surface contexts: what the stream appears to be about.
THEME_WORDS: dict[str, tuple[str, ...]] = {
    "parttime_job": ("parttime", "job", "salary", "resume", "typing", "daily"),
    "cheap_phone": ("phone", "unlocked", "warranty", "shipping", "charger", "box"),
    "jewelry": ("jade", "bracelet", "pendant", "carving", "polish", "gemstone"),
    "seafood": ("crab", "shrimp", "frozen", "catch", "harbor", "net"),
    "kitten_adoption": ("kitten", "adoption", "litter", "vaccine", "paw", "breed"),
    "prize_draw": ("prize", "draw", "ticket", "winner", "raffle", "spin"),
    "blind_box": ("blindbox", "figure", "unbox", "rare", "series", "seal"),
    "stone_bet": ("stone", "cut", "rough", "crystal", "vein", "gamble"),
    "sports_pick": ("match", "odds", "score", "pick", "league", "parlay"),
    "concert_ticket": ("concert", "ticket", "row", "stage", "tour", "seat"),
}

# Functional vocabulary of the recurring routine, by phase.
PHASE_KEYWORDS: dict[str, tuple[str, ...]] = {
    "promotion": ("benefits", "insider", "discount", "deal", "exclusive",
                  "bonus", "offer", "wholesale"),
    "testimonial": ("received", "legit", "arrived", "worked", "already",
                    "ordered", "genuine", "trust"),
    "urgency": ("hurry", "limited", "slots", "lastchance", "today",
                "closing", "quick", "final"),
    "redirect": ("contact", "assistant", "private", "group", "add",
                 "offplatform", "direct", "dm"),
}

# Union of all phase keywords; the mock teacher uses it to gauge how much
# planted vocabulary a patch carries.
RISK_LEXICON: frozenset[str] = frozenset(
    w for words in PHASE_KEYWORDS.values() for w in words
)

BENIGN_WORDS = (
    "hello", "hi", "welcome", "nice", "song", "music", "play", "love",
    "stream", "follow", "thanks", "everyone", "good", "great", "day", "fun",
    "chat", "friend", "watch", "cool", "show", "talk", "time", "new", "see",
    "amazing", "haha", "wow", "singing", "dance", "game", "weather", "food",
    "coffee", "story", "question", "answer", "right", "okay", "sure",
)

_VIEWER_BG_TYPES = ("comment", "like", "gift", "share", "leaderboard",
                    "group-join", "co-stream-request")
_VIEWER_BG_PROBS = (0.62, 0.14, 0.08, 0.06, 0.04, 0.03, 0.03)


@dataclass(frozen=True)
class ScamPhase:
    name: str
    role: str  # "host" or "shill"
    action_type: str
    keywords: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.keywords:
            raise ConfigurationError(f"phase {self.name!r} names no keywords")


@dataclass(frozen=True)
class ScamTemplate:
    """One scripted routine: an ordered phase chain over a surface theme."""

    template_id: str
    theme_words: tuple[str, ...]
    phases: tuple[ScamPhase, ...]

    def __post_init__(self) -> None:
        if not self.phases:
            raise ConfigurationError(
                f"template {self.template_id!r} has an empty phase sequence"
            )


def default_templates(
    n_templates: int, rng: np.random.Generator
) -> tuple[ScamTemplate, ...]:
    """Build templates over distinct themes with per-template keyword subsets."""
    themes = list(THEME_WORDS)
    out = []
    for i in range(n_templates):
        theme = themes[i % len(themes)]
        phases = []
        for name, role, atype in (
            ("promotion", "host", "speech-transcript"),
            ("testimonial", "shill", "comment"),
            ("urgency", "host", "speech-transcript"),
            ("redirect", "host", "speech-transcript"),
        ):
            pool = PHASE_KEYWORDS[name]
            size = min(5, len(pool))
            words = tuple(rng.choice(pool, size=size, replace=False))
            phases.append(ScamPhase(name, role, atype, words))
        out.append(
            ScamTemplate(
                template_id=f"tpl_{i:02d}_{theme}",
                theme_words=THEME_WORDS[theme],
                phases=tuple(phases),
            )
        )
    return tuple(out)


@dataclass(frozen=True)
class SynthConfig:
    """Generator knobs. ``seed`` fixes every random draw.

    ``positive_rate`` is the fraction of risky sessions; the count is
    ``round(n_sessions * positive_rate)``, so the default 1/11 yields a
    1:10 positive:negative mix.
    """

    n_sessions: int = 1100
    positive_rate: float = 1.0 / 11.0
    n_templates: int = 6
    viewers_range: tuple[int, int] = (8, 20)
    actions_range: tuple[int, int] = (60, 160)
    horizon_seconds: float = 1800.0
    slot_seconds: float = 100.0
    decoy_rate: float = 0.08
    decoy_phase_rate: float = 0.3
    seed: int = 0
    d_text: int = 64

    def __post_init__(self) -> None:
        if not 0 < self.positive_rate < 1:
            raise ConfigurationError("positive_rate must be in (0, 1)")
        if self.n_sessions < 1 or self.n_templates < 1:
            raise ConfigurationError("n_sessions and n_templates must be >= 1")
        if not 0 <= self.decoy_phase_rate <= 1:
            raise ConfigurationError("decoy_phase_rate must be in [0, 1]")
        for lo, hi in (self.viewers_range, self.actions_range):
            if lo < 1 or hi < lo:
                raise ConfigurationError("ranges must satisfy 1 <= lo <= hi")


class PatchTruth:
    """Hidden ground truth: which (session, user, slot) cells were planted.

    Known to the generator, the mock teacher, and the test harness only.
    Every generated session id is present; negatives map to no cells.
    """

    def __init__(self, cells: dict[str, set[tuple[str, int]]] | None = None):
        self._cells: dict[str, set[tuple[str, int]]] = cells or {}

    def add_session(self, session_id: str) -> None:
        self._cells.setdefault(session_id, set())

    def mark(self, session_id: str, user_id: str, slot: int) -> None:
        self._cells.setdefault(session_id, set()).add((user_id, slot))

    def knows(self, session_id: str) -> bool:
        return session_id in self._cells

    def cells_for(self, session_id: str) -> frozenset[tuple[str, int]]:
        return frozenset(self._cells[session_id])

    def is_risky(self, session_id: str, user_id: str, slot: int) -> bool:
        return (user_id, slot) in self._cells[session_id]

    @property
    def session_ids(self) -> list[str]:
        return list(self._cells)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "sessions": {
                sid: sorted([u, k] for (u, k) in cells)
                for sid, cells in self._cells.items()
            }
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True), "utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PatchTruth":
        payload = json.loads(Path(path).read_text("utf-8"))
        cells = {
            sid: {(u, int(k)) for u, k in pairs}
            for sid, pairs in payload["sessions"].items()
        }
        return cls(cells)


def _words(rng: np.random.Generator, pool, lo: int, hi: int) -> list[str]:
    n = int(rng.integers(lo, hi + 1))
    return [str(w) for w in rng.choice(pool, size=n, replace=True)]


def _benign_text(rng: np.random.Generator, lo: int, hi: int,
                 decoy_rate: float) -> str:
    words = _words(rng, BENIGN_WORDS, lo, hi)
    if rng.random() < decoy_rate:
        lexicon = sorted(RISK_LEXICON)
        words.insert(int(rng.integers(0, len(words) + 1)),
                     lexicon[int(rng.integers(0, len(lexicon)))])
    return " ".join(words)


def _phase_text(rng: np.random.Generator, template: ScamTemplate,
                phase: ScamPhase, decoy_rate: float) -> str:
    words = _words(rng, phase.keywords, 2, 3)
    words += _words(rng, template.theme_words, 1, 2)
    words += _words(rng, BENIGN_WORDS, 1, 3)
    rng.shuffle(words)
    return " ".join(words)


def _generate_session(
    rng: np.random.Generator,
    cfg: SynthConfig,
    disc: DiscretizationConfig,
    session_id: str,
    template: ScamTemplate | None,
    decoys: tuple[ScamTemplate, ...],
    encoder: HashingTextEncoder,
    truth: PatchTruth,
) -> Session:
    host = "host"
    n_viewers = int(rng.integers(cfg.viewers_range[0], cfg.viewers_range[1] + 1))
    viewers = [f"v{i:02d}" for i in range(n_viewers)]
    horizon = cfg.horizon_seconds
    actions: list[Action] = []

    def emit(user: str, t: float, atype: str, text: str = "") -> None:
        t = min(round(float(t), 2), horizon)
        actions.append(Action(user, t, atype, encoder(text), text))

    emit(host, 0.0, "stream-start")
    n_bg = int(rng.integers(cfg.actions_range[0], cfg.actions_range[1] + 1))
    n_host = max(3, int(round(n_bg * 0.25)))
    for t in rng.uniform(1.0, horizon, size=n_host):
        atype = "ocr-content" if rng.random() < 0.1 else "speech-transcript"
        emit(host, t, atype, _benign_text(rng, 4, 9, cfg.decoy_rate))
    for v in viewers:
        emit(v, rng.uniform(0.0, horizon / 3), "entry")
    n_rest = max(0, n_bg - n_host - n_viewers)
    for _ in range(n_rest):
        v = viewers[int(rng.integers(0, n_viewers))]
        atype = str(rng.choice(_VIEWER_BG_TYPES, p=_VIEWER_BG_PROBS))
        text = (
            _benign_text(rng, 2, 6, cfg.decoy_rate) if atype == "comment" else ""
        )
        emit(v, rng.uniform(0.0, horizon), atype, text)

    def plant_phase(template: ScamTemplate, phase: ScamPhase, slot: int,
                    shills: list[str]) -> str:
        actor = host if phase.role == "host" else shills[
            int(rng.integers(0, len(shills)))
        ]
        lo = (slot - 1) * cfg.slot_seconds
        # stay clear of the right edge: timestamps round to 2 decimals
        hi = slot * cfg.slot_seconds - 0.01
        for t in rng.uniform(lo, hi, size=int(rng.integers(2, 4))):
            emit(actor, t, phase.action_type,
                 _phase_text(rng, template, phase, cfg.decoy_rate))
        return actor

    truth.add_session(session_id)
    label = 0
    if template is not None:
        label = 1
        n_phases = len(template.phases)
        slots = np.sort(
            rng.choice(np.arange(1, disc.slot_count + 1), size=n_phases,
                       replace=False)
        )
        n_shills = min(2, n_viewers)
        shills = [str(v) for v in rng.choice(viewers, size=n_shills,
                                             replace=False)]
        for phase, slot in zip(template.phases, slots):
            actor = plant_phase(template, phase, int(slot), shills)
            truth.mark(session_id, actor, int(slot))
    elif rng.random() < cfg.decoy_phase_rate:
        # Out-of-chain phases: risky-sounding vocabulary without the full
        # scripted progression, so the session stays benign and unmarked.
        decoy_template = decoys[int(rng.integers(0, len(decoys)))]
        n_decoys = int(rng.integers(1, 3))
        phase_ids = rng.choice(len(decoy_template.phases), size=n_decoys,
                               replace=False)
        slots = rng.choice(np.arange(1, disc.slot_count + 1),
                           size=n_decoys, replace=False)
        for pid, slot in zip(phase_ids, slots):
            phase = decoy_template.phases[int(pid)]
            plant_phase(decoy_template, phase, int(slot),
                        [viewers[int(rng.integers(0, n_viewers))]])

    actions.sort(key=lambda a: a.timestamp)
    return Session(
        session_id=session_id,
        host_id=host,
        viewer_ids=frozenset(viewers),
        actions=actions,
        label=label,
    )


def generate_dataset(cfg: SynthConfig) -> tuple[list[Session], PatchTruth]:
    """Generate a labeled dataset plus its hidden planted-cell map.

    Deterministic given the config (the seed fixes all draws). Templates
    are assigned round-robin over positives, so every template recurs in
    at least two sessions whenever the positive count allows it.
    """
    disc = DiscretizationConfig(cfg.horizon_seconds, cfg.slot_seconds)
    max_phases = 4
    if disc.slot_count < max_phases:
        raise ConfigurationError(
            f"{disc.slot_count} slots cannot hold a {max_phases}-phase chain"
        )
    rng = np.random.default_rng(cfg.seed)
    templates = default_templates(cfg.n_templates, rng)
    encoder = HashingTextEncoder(cfg.d_text)

    n_pos = int(round(cfg.n_sessions * cfg.positive_rate))
    labels = np.zeros(cfg.n_sessions, dtype=int)
    labels[:n_pos] = 1
    rng.shuffle(labels)

    truth = PatchTruth()
    sessions = []
    pos_ordinal = 0
    for idx, is_pos in enumerate(labels):
        template = None
        if is_pos:
            template = templates[pos_ordinal % len(templates)]
            pos_ordinal += 1
        sessions.append(
            _generate_session(rng, cfg, disc, f"s{idx:05d}", template,
                              templates, encoder, truth)
        )
    return sessions, truth
