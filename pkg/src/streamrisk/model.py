"""Patch-grid backbone for session risk scoring.

The forward pass works on one session at a time: actions are embedded and
contextualized over the whole chronological sequence, grouped into
(user, timeslot) patches and compressed by a recurrent aggregator, then the
patch set is refined by attention layers biased with a fused, row-stochastic
relation adjacency. A learnable CLS token summarizes the session; small MLP
heads score the session and every patch.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigurationError
from .sessions import (
    ACTION_TYPE_IDS,
    ACTION_TYPES,
    HOST_ROLE,
    PatchGrid,
    Session,
    flatten_grid,
)

RELATION_NAMES = ("temporal", "user", "role", "affinity")


@dataclass(frozen=True)
class ModelConfig:
    d_k: int = 128
    n_heads: int = 8
    n_seq_layers: int = 2
    n_graph_layers: int = 1
    dropout: float = 0.1
    d_text: int = 64
    n_action_types: int = len(ACTION_TYPES)
    max_patches: int = 1024
    max_actions: int = 2096
    graph_bias: bool = True
    # expected positive rate; sets the session head's initial bias so
    # imbalanced training skips the learn-the-prior plateau
    session_prior: float = 0.5

    def __post_init__(self) -> None:
        if min(self.d_k, self.n_heads, self.n_seq_layers, self.n_graph_layers,
               self.d_text, self.n_action_types) < 1:
            raise ConfigurationError("all model dimensions must be positive")
        if self.d_k % self.n_heads:
            raise ConfigurationError(
                f"d_k={self.d_k} not divisible by n_heads={self.n_heads}"
            )
        if not 0.0 < self.session_prior < 1.0:
            raise ConfigurationError("session_prior must lie in (0, 1)")


class PatchMeta(NamedTuple):
    user_id: str
    role: str
    slot: int


@dataclass
class PatchEmbeddingSet:
    """One embedding per non-empty patch, in flattened grid order."""

    embeddings: Tensor          # (n, d_k)
    meta: list[PatchMeta]
    slots: Tensor               # (n,) long
    user_codes: Tensor          # (n,) long, by order of appearance
    is_host: Tensor             # (n,) bool

    @classmethod
    def assemble(cls, embeddings: Tensor,
                 meta: list[PatchMeta]) -> "PatchEmbeddingSet":
        codes: dict[str, int] = {}
        for m in meta:
            codes.setdefault(m.user_id, len(codes))
        return cls(
            embeddings=embeddings,
            meta=meta,
            slots=torch.tensor([m.slot for m in meta], dtype=torch.long),
            user_codes=torch.tensor([codes[m.user_id] for m in meta],
                                    dtype=torch.long),
            is_host=torch.tensor([m.role == HOST_ROLE for m in meta]),
        )

    def __len__(self) -> int:
        return len(self.meta)


@dataclass
class RelationAdjacency:
    """The four relation matrices over the ordered patch list."""

    temporal: Tensor
    user: Tensor
    role: Tensor
    affinity: Tensor

    def stacked(self) -> Tensor:
        return torch.stack([self.temporal, self.user, self.role,
                            self.affinity])


@dataclass
class ForwardOutput:
    """Everything one forward pass exposes about a session."""

    session_logit: Tensor       # scalar
    patch_logits: Tensor        # (n,)
    patch_meta: list[PatchMeta]
    refined: Tensor             # (n, d_k) refined patch embeddings
    alpha: Tensor               # (n,) CLS attention over patches, sums to 1
    session_embedding: Tensor   # (d_k,)

    @property
    def session_score(self) -> float:
        return float(torch.sigmoid(self.session_logit))

    @property
    def patch_scores(self) -> np.ndarray:
        return torch.sigmoid(self.patch_logits).detach().cpu().numpy()

    @property
    def alpha_np(self) -> np.ndarray:
        return self.alpha.detach().cpu().numpy()


def cosine_affinity(embeddings: Tensor) -> Tensor:
    """Pairwise cosine similarity mapped to [0, 1] via (1 + cos) / 2."""
    normed = embeddings / embeddings.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return (1.0 + normed @ normed.T) / 2.0


def build_relation_adjacency(pe: PatchEmbeddingSet) -> RelationAdjacency:
    """Gate pairwise affinity by the temporal / user / role indicators.

    The fourth matrix keeps whatever affinity the first three did not
    already claim, clamped at zero from below. Self-pairs get no special
    casing: the temporal and user gates both hold on the diagonal.
    """
    sim = cosine_affinity(pe.embeddings)
    near = (pe.slots[:, None] - pe.slots[None, :]).abs() <= 1
    same_user = pe.user_codes[:, None] == pe.user_codes[None, :]
    cross_role = pe.is_host[:, None] ^ pe.is_host[None, :]
    a_t = near.to(sim.dtype) * sim
    a_u = same_user.to(sim.dtype) * sim
    a_r = cross_role.to(sim.dtype) * sim
    a_a = (sim - torch.max(torch.max(a_t, a_u), a_r)).clamp_min(0.0)
    return RelationAdjacency(a_t, a_u, a_r, a_a)


def fuse_adjacency(rel: RelationAdjacency, weights: Tensor) -> Tensor:
    """Weighted-sum the relation matrices and row-softmax, CLS included.

    A zero row and column are prepended for the CLS position before the
    softmax, so the CLS structural prior is uniform. Every row of the
    result sums to 1.
    """
    combined = (weights.reshape(4, 1, 1) * rel.stacked()).sum(dim=0)
    padded = F.pad(combined, (1, 0, 1, 0))
    return torch.softmax(padded, dim=-1)


def sinusoidal_positions(n: int, d: int, *, dtype: torch.dtype,
                         device: torch.device) -> Tensor:
    """Classic fixed sin/cos position features for a length-n sequence."""
    position = torch.arange(n, dtype=dtype, device=device).unsqueeze(1)
    half = torch.arange(0, d, 2, dtype=dtype, device=device)
    div = torch.exp(half * (-math.log(10000.0) / d))
    out = torch.zeros(n, d, dtype=dtype, device=device)
    out[:, 0::2] = torch.sin(position * div)
    out[:, 1::2] = torch.cos(position * div)[:, : d // 2]
    return out


class SequenceContextualizer(nn.Module):
    """Self-attention over the whole action sequence.

    Setting ``identity=True`` bypasses the encoder entirely (test hook):
    tokens pass through unchanged, positions included.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.identity = False
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.d_k,
            nhead=cfg.n_heads,
            dim_feedforward=2 * cfg.d_k,
            dropout=cfg.dropout,
            batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, cfg.n_seq_layers,
                                             enable_nested_tensor=False)

    def forward(self, tokens: Tensor) -> Tensor:
        if self.identity:
            return tokens
        n, d = tokens.shape
        x = tokens + sinusoidal_positions(n, d, dtype=tokens.dtype,
                                          device=tokens.device)
        return self.encoder(x.unsqueeze(0)).squeeze(0)


class GraphAttentionLayer(nn.Module):
    """Multi-head attention whose pre-softmax scores carry an additive bias.

    Per head: softmax((Q K^T + bias) / sqrt(d_head)) V, followed by the
    usual residual + layernorm and a feed-forward block. With a zero bias
    this is exactly vanilla scaled dot-product attention.
    """

    def __init__(self, d_k: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_k // n_heads
        self.q_proj = nn.Linear(d_k, d_k)
        self.k_proj = nn.Linear(d_k, d_k)
        self.v_proj = nn.Linear(d_k, d_k)
        self.out_proj = nn.Linear(d_k, d_k)
        self.ffn = nn.Sequential(
            nn.Linear(d_k, 2 * d_k),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(2 * d_k, d_k),
        )
        self.norm_attn = nn.LayerNorm(d_k)
        self.norm_ffn = nn.LayerNorm(d_k)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
        n = x.shape[0]
        q = self.q_proj(x).view(n, self.n_heads, self.d_head).transpose(0, 1)
        k = self.k_proj(x).view(n, self.n_heads, self.d_head).transpose(0, 1)
        v = self.v_proj(x).view(n, self.n_heads, self.d_head).transpose(0, 1)
        scores = (q @ k.transpose(1, 2) + bias.unsqueeze(0)) / math.sqrt(
            self.d_head
        )
        probs = torch.softmax(scores, dim=-1)
        ctx = (self.dropout(probs) @ v).transpose(0, 1).reshape(n, -1)
        x = self.norm_attn(x + self.dropout(self.out_proj(ctx)))
        x = self.norm_ffn(x + self.ffn(x))
        return x, probs


class PatchGridModel(nn.Module):
    """Two-stage encoder plus graph-biased attention over the patch grid."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d_type = cfg.d_k // 2
        self.type_embedding = nn.Embedding(cfg.n_action_types, d_type)
        self.text_proj = nn.Linear(cfg.d_text, cfg.d_k - d_type)
        self.contextualizer = SequenceContextualizer(cfg)
        self.patch_rnn = nn.LSTM(
            cfg.d_k,
            cfg.d_k,
            num_layers=cfg.n_seq_layers,
            batch_first=True,
            dropout=cfg.dropout if cfg.n_seq_layers > 1 else 0.0,
        )
        self.relation_weights = nn.Parameter(torch.ones(len(RELATION_NAMES)))
        self.graph_layers = nn.ModuleList(
            GraphAttentionLayer(cfg.d_k, cfg.n_heads, cfg.dropout)
            for _ in range(cfg.n_graph_layers)
        )
        self.cls_token = nn.Parameter(torch.empty(cfg.d_k))
        nn.init.normal_(self.cls_token, std=0.02)
        self.session_head = nn.Sequential(
            nn.Linear(cfg.d_k, cfg.d_k), nn.ReLU(), nn.Linear(cfg.d_k, 1)
        )
        self.patch_head = nn.Sequential(
            nn.Linear(cfg.d_k, cfg.d_k), nn.ReLU(), nn.Linear(cfg.d_k, 1)
        )
        nn.init.constant_(
            self.session_head[-1].bias,
            math.log(cfg.session_prior / (1.0 - cfg.session_prior)),
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.cls_token.dtype

    def embed_actions(self, session: Session) -> Tensor:
        """Embed and contextualize the full action sequence; (N, d_k)."""
        assert session.n_actions >= 1, "empty session reached the model"
        assert session.n_actions <= self.cfg.max_actions, (
            "session exceeds the action cap; preprocess() must run first"
        )
        type_ids = torch.tensor(
            [ACTION_TYPE_IDS[a.action_type] for a in session.actions],
            dtype=torch.long,
        )
        texts = torch.from_numpy(
            np.stack([a.text_embedding for a in session.actions])
        ).to(self.dtype)
        tokens = torch.cat(
            [self.type_embedding(type_ids), self.text_proj(texts)], dim=-1
        )
        return self.contextualizer(tokens)

    def encode_patches(
        self,
        tokens: Tensor,
        session: Session,
        grid: PatchGrid,
        order: list[tuple[str, int]] | None = None,
    ) -> PatchEmbeddingSet:
        """Aggregate each patch's tokens; the final RNN state is the patch.

        ``grid`` must have been built from ``session``: its action indices
        address positions in the session's chronological token sequence.
        """
        if order is None:
            order = self.flatten_order(grid)
        idx_lists = [grid.action_indices[key] for key in order]
        lengths = torch.tensor([len(ix) for ix in idx_lists])
        n, max_len = len(idx_lists), int(lengths.max())
        flat = torch.tensor(
            [i for ix in idx_lists for i in ix], dtype=torch.long
        )
        rows = torch.repeat_interleave(torch.arange(n), lengths)
        cols = torch.arange(len(flat)) - torch.repeat_interleave(
            torch.cumsum(lengths, 0) - lengths, lengths
        )
        padded = tokens.new_zeros(n, max_len, tokens.shape[-1])
        padded[rows, cols] = tokens[flat]
        packed = nn.utils.rnn.pack_padded_sequence(
            padded, lengths, batch_first=True, enforce_sorted=False
        )
        _, (h_n, _) = self.patch_rnn(packed)
        meta = [PatchMeta(u, grid.role_of(u), k) for u, k in order]
        return PatchEmbeddingSet.assemble(h_n[-1], meta)

    def flatten_order(self, grid: PatchGrid) -> list[tuple[str, int]]:
        """Flattened patch order, truncated to the attention-size cap.

        The flattening puts the host first and viewers in descending
        activity, so slicing off the tail drops the least active viewers'
        patches first.
        """
        order = flatten_grid(grid)
        return order[: self.cfg.max_patches]

    def graph_forward(self, pe: PatchEmbeddingSet,
                      bias: Tensor | None = None) -> ForwardOutput:
        """Refine [CLS | patches] under the fused structural bias and score.

        ``bias`` defaults to the fused relation adjacency (or all zeros
        when the config disables the graph bias, which reduces every layer
        to vanilla self-attention).
        """
        n = len(pe)
        if bias is None:
            if self.cfg.graph_bias:
                bias = fuse_adjacency(build_relation_adjacency(pe),
                                      self.relation_weights)
            else:
                bias = pe.embeddings.new_zeros(n + 1, n + 1)

        x = torch.cat([self.cls_token.unsqueeze(0), pe.embeddings], dim=0)
        probs = None
        for layer in self.graph_layers:
            x, probs = layer(x, bias)

        session_embedding = x[0]
        refined = x[1:]
        cls_row = probs.mean(dim=0)[0]          # head-averaged, final layer
        alpha = cls_row[1:] / cls_row[1:].sum().clamp_min(1e-12)
        return ForwardOutput(
            session_logit=self.session_head(session_embedding).squeeze(-1),
            patch_logits=self.patch_head(refined).squeeze(-1),
            patch_meta=pe.meta,
            refined=refined,
            alpha=alpha,
            session_embedding=session_embedding,
        )

    def forward(self, session: Session, grid: PatchGrid) -> ForwardOutput:
        order = self.flatten_order(grid)
        tokens = self.embed_actions(session)
        return self.graph_forward(
            self.encode_patches(tokens, session, grid, order)
        )


def build_model(cfg: ModelConfig, seed: int = 0) -> PatchGridModel:
    """Construct a model with seeded parameter initialization."""
    torch.manual_seed(seed)
    return PatchGridModel(cfg)


CHECKPOINT_FORMAT = "streamrisk.checkpoint"
STAGE_WARMUP = "warmup"
STAGE_DISTILLED = "distilled"


def save_checkpoint(model: PatchGridModel, path: str | Path, stage: str,
                    extra: dict | None = None) -> None:
    if stage not in (STAGE_WARMUP, STAGE_DISTILLED):
        raise ConfigurationError(f"unknown training stage {stage!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": 1,
            "stage": stage,
            "model_config": asdict(model.cfg),
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path: str | Path) -> tuple[PatchGridModel, str, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a model checkpoint")
    model = PatchGridModel(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["stage"], payload["extra"]
