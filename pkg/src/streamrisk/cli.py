"""Command-line pipeline: generate | warmup | index | reason | distill |
infer | eval | ablation | heatmap, all driven by one JSON config file.

Each subcommand consumes only artifacts of earlier stages named in its
arguments and records a manifest of config/artifact hashes. Inference is
instrumented: it asserts that no retrieval and no teacher calls happen.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .ablation import AblationSetup, run_ablation, write_ablation_table
from .config import PipelineConfig, load_pipeline_config, write_manifest
from .errors import StreamRiskError
from .heatmap import emit_heatmap
from .index import load_index, retrieval_calls, save_index
from .llm import (
    CachingLLMClient,
    HTTPClientConfig,
    HTTPLLMClient,
    MockLLMClient,
    llm_calls,
)
from .losses import read_teacher_records, write_teacher_records
from .metrics import compute_all
from .model import build_model, load_checkpoint, save_checkpoint
from .pipeline import (
    build_evidence_index,
    collect_teacher_records,
    infer_sessions,
    stratified_split,
)
from .sessions import prepare_sessions, read_sessions, write_sessions
from .synth import PatchTruth, generate_dataset
from .text import HashingTextEncoder
from .train import distill_train, score_sessions, warmup_train

logger = logging.getLogger(__name__)


def _encoder(cfg: PipelineConfig) -> HashingTextEncoder:
    return HashingTextEncoder(cfg.synth.d_text)


def _load_split(cfg: PipelineConfig, path: Path):
    sessions = read_sessions(path, _encoder(cfg))
    return prepare_sessions(sessions, cfg.preprocess, cfg.discretization)


def _teacher_client(cfg: PipelineConfig):
    if cfg.llm.mock:
        inner = MockLLMClient(PatchTruth.load(cfg.data.truth), cfg.seed)
    else:
        inner = HTTPLLMClient(
            HTTPClientConfig(
                endpoint=cfg.llm.endpoint,
                model=cfg.llm.model,
                api_key_env=cfg.llm.api_key_env,
                timeout=cfg.llm.timeout,
                max_retries=cfg.llm.max_retries,
            )
        )
    return CachingLLMClient(inner, cfg.cache_path)


def cmd_generate(cfg: PipelineConfig, args) -> int:
    sessions, truth = generate_dataset(cfg.synth)
    train, val, test = stratified_split(sessions, cfg.splits, cfg.seed)
    write_sessions(cfg.data.train, train)
    write_sessions(cfg.data.val, val)
    write_sessions(cfg.data.test, test)
    truth.save(cfg.data.truth)
    print(f"generated {len(sessions)} sessions "
          f"({sum(s.label for s in sessions)} positive): "
          f"{len(train)}/{len(val)}/{len(test)} train/val/test")
    write_manifest(cfg, "generate", {}, {
        "train": cfg.data.train, "val": cfg.data.val,
        "test": cfg.data.test, "truth": cfg.data.truth,
    })
    return 0


def cmd_warmup(cfg: PipelineConfig, args) -> int:
    train = _load_split(cfg, cfg.data.train)
    val = _load_split(cfg, cfg.data.val)
    model_cfg = cfg.model
    if cfg.train.ablation == "no_G":
        model_cfg = replace(model_cfg, graph_bias=False)
    model = build_model(model_cfg, cfg.seed)
    result = warmup_train(model, train, val, cfg.train,
                          log_path=cfg.out_dir / "metrics_warmup.jsonl")
    ckpt = Path(args.checkpoint or cfg.out_dir / "warmup.pt")
    save_checkpoint(result.model, ckpt, result.stage, {
        "best_epoch": result.best_epoch,
        "best_val_pr_auc": result.best_val_pr_auc,
    })
    print(f"warmup done: best val PR-AUC {result.best_val_pr_auc:.4f} "
          f"at epoch {result.best_epoch} -> {ckpt}")
    write_manifest(cfg, "warmup",
                   {"train": cfg.data.train, "val": cfg.data.val},
                   {"checkpoint": ckpt})
    return 0


def cmd_index(cfg: PipelineConfig, args) -> int:
    ckpt = Path(args.checkpoint or cfg.out_dir / "warmup.pt")
    model, _, _ = load_checkpoint(ckpt)
    train = _load_split(cfg, cfg.data.train)
    index = build_evidence_index(
        model, train, _teacher_client(cfg),
        threshold=cfg.select_threshold,
        slot_seconds=cfg.discretization.slot_seconds,
    )
    save_index(index, cfg.index_dir)
    print(f"indexed {len(index)} key patches -> {cfg.index_dir}")
    write_manifest(cfg, "index",
                   {"checkpoint": ckpt, "train": cfg.data.train},
                   {"index": cfg.index_dir})
    return 0


def cmd_reason(cfg: PipelineConfig, args) -> int:
    ckpt = Path(args.checkpoint or cfg.out_dir / "warmup.pt")
    model, _, _ = load_checkpoint(ckpt)
    train = _load_split(cfg, cfg.data.train)
    index = load_index(cfg.index_dir)
    client = _teacher_client(cfg)
    records = collect_teacher_records(
        model, train, index, client,
        mode=cfg.train.ablation if cfg.train.ablation in ("no_R", "no_L")
        else "full",
        slot_seconds=cfg.discretization.slot_seconds,
    )
    teachers_path = Path(args.teachers or cfg.out_dir / "teachers.jsonl")
    write_teacher_records(teachers_path, records.values())
    missing = sum(r.teacher_missing for r in records.values())
    print(f"collected {len(records)} teacher records "
          f"({missing} teacher-missing, {getattr(client, 'misses', '?')} "
          f"fresh client calls) -> {teachers_path}")
    write_manifest(cfg, "reason",
                   {"checkpoint": ckpt, "index": cfg.index_dir},
                   {"teachers": teachers_path})
    return 0


def cmd_distill(cfg: PipelineConfig, args) -> int:
    if cfg.train.ablation == "no_D":
        raise StreamRiskError(
            "ablation no_D skips distillation; evaluate the warmup "
            "checkpoint instead"
        )
    ckpt = Path(args.checkpoint or cfg.out_dir / "warmup.pt")
    model, _, _ = load_checkpoint(ckpt)
    teachers_path = Path(args.teachers or cfg.out_dir / "teachers.jsonl")
    teachers = read_teacher_records(teachers_path)
    train = _load_split(cfg, cfg.data.train)
    val = _load_split(cfg, cfg.data.val)
    result = distill_train(
        model, train, val, teachers, cfg.train, cfg.loss_weights,
        log_path=cfg.out_dir / "metrics_distill.jsonl",
    )
    out_ckpt = Path(args.out_checkpoint or cfg.out_dir / "distilled.pt")
    save_checkpoint(result.model, out_ckpt, result.stage, {
        "best_epoch": result.best_epoch,
        "best_val_pr_auc": result.best_val_pr_auc,
    })
    print(f"distillation done: best val PR-AUC {result.best_val_pr_auc:.4f} "
          f"at epoch {result.best_epoch} -> {out_ckpt}")
    write_manifest(cfg, "distill",
                   {"checkpoint": ckpt, "teachers": teachers_path},
                   {"checkpoint": out_ckpt})
    return 0


def cmd_infer(cfg: PipelineConfig, args) -> int:
    ckpt = Path(args.checkpoint or cfg.out_dir / "distilled.pt")
    model, stage, _ = load_checkpoint(ckpt)
    sessions_path = Path(args.sessions or cfg.data.test)
    data = _load_split(cfg, sessions_path)

    retrieval_before = retrieval_calls.value
    llm_before = llm_calls.value
    results = infer_sessions(model, data)
    assert retrieval_calls.value == retrieval_before, "inference retrieved"
    assert llm_calls.value == llm_before, "inference called the teacher"

    scores_path = Path(args.scores or cfg.out_dir / "scores.jsonl")
    scores_path.parent.mkdir(parents=True, exist_ok=True)
    with scores_path.open("w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps({
                "session_id": r.session_id,
                "score": r.score,
                "patch_scores": [
                    {"user_id": u, "slot": k, "score": v}
                    for (u, k), v in r.patch_scores.items()
                ],
            }) + "\n")

    if args.heatmap_dir:
        by_id = {s.session_id: (s, g) for s, g in data}
        for r in results:
            _, grid = by_id[r.session_id]
            emit_heatmap(grid, r.patch_scores,
                         Path(args.heatmap_dir) / f"{r.session_id}.png")

    print(f"scored {len(results)} sessions with {stage} checkpoint "
          f"(0 retrieval calls, 0 teacher calls) -> {scores_path}")
    write_manifest(cfg, "infer",
                   {"checkpoint": ckpt, "sessions": sessions_path},
                   {"scores": scores_path},
                   extra={"retrieval_calls": 0, "llm_calls": 0})
    return 0


def cmd_eval(cfg: PipelineConfig, args) -> int:
    ckpt = Path(args.checkpoint or cfg.out_dir / "distilled.pt")
    model, _, _ = load_checkpoint(ckpt)
    sessions_path = Path(args.sessions or cfg.data.test)
    data = _load_split(cfg, sessions_path)
    metrics = compute_all(score_sessions(model, data))
    metrics_path = cfg.out_dir / "eval_metrics.json"
    metrics_path.parent.mkdir(parents=True, exist_ok=True)
    metrics_path.write_text(json.dumps(metrics, indent=2), "utf-8")
    for name, value in metrics.items():
        print(f"{name}: {value:.4f}")
    write_manifest(cfg, "eval",
                   {"checkpoint": ckpt, "sessions": sessions_path},
                   {"metrics": metrics_path})
    return 0


def cmd_ablation(cfg: PipelineConfig, args) -> int:
    setup = AblationSetup(
        train_data=_load_split(cfg, cfg.data.train),
        val_data=_load_split(cfg, cfg.data.val),
        test_data=_load_split(cfg, cfg.data.test),
        truth=PatchTruth.load(cfg.data.truth),
        model_cfg=cfg.model,
        train_cfg=cfg.train,
        weights=cfg.loss_weights,
        select_threshold=cfg.select_threshold,
        slot_seconds=cfg.discretization.slot_seconds,
    )
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    seeds = [int(s) for s in args.seeds.split(",")]
    table = run_ablation(setup, modes, seeds)
    write_ablation_table(table, cfg.out_dir)
    for mode, metrics in table["medians"].items():
        print(f"{mode}: median PR-AUC {metrics['pr_auc']:.4f}, "
              f"F1 {metrics['f1']:.4f}")
    write_manifest(cfg, "ablation",
                   {"train": cfg.data.train, "test": cfg.data.test},
                   {"table": cfg.out_dir / "ablation.json"})
    return 0


def cmd_heatmap(cfg: PipelineConfig, args) -> int:
    ckpt = Path(args.checkpoint or cfg.out_dir / "distilled.pt")
    model, _, _ = load_checkpoint(ckpt)
    sessions_path = Path(args.sessions or cfg.data.test)
    data = _load_split(cfg, sessions_path)
    wanted = {s.session_id for s, _ in data} if args.session_id is None \
        else {args.session_id}
    out_dir = Path(args.heatmap_dir or cfg.out_dir / "heatmaps")
    by_id = {s.session_id: g for s, g in data}
    emitted = 0
    for result in infer_sessions(
        model, [(s, g) for s, g in data if s.session_id in wanted]
    ):
        emit_heatmap(by_id[result.session_id], result.patch_scores,
                     out_dir / f"{result.session_id}.png")
        emitted += 1
    if not emitted:
        raise StreamRiskError(f"session {args.session_id!r} not found")
    print(f"wrote {emitted} heatmap(s) -> {out_dir}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "warmup": cmd_warmup,
    "index": cmd_index,
    "reason": cmd_reason,
    "distill": cmd_distill,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablation": cmd_ablation,
    "heatmap": cmd_heatmap,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamrisk",
        description="Session-level live-streaming risk assessment pipeline",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="pipeline config JSON")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default=None, help="override the output dir")
        p.add_argument("--mock-llm", action="store_true",
                       help="force the deterministic mock teacher")
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--teachers", default=None)
        if name == "distill":
            p.add_argument("--out-checkpoint", default=None)
        if name in ("infer", "eval", "heatmap"):
            p.add_argument("--sessions", default=None)
        if name == "infer":
            p.add_argument("--scores", default=None)
        if name in ("infer", "heatmap"):
            p.add_argument("--heatmap-dir", default=None)
        if name == "heatmap":
            p.add_argument("--session-id", default=None)
        if name == "ablation":
            p.add_argument("--modes", default=",".join(
                ("full", "no_G", "no_R", "no_L", "no_D")))
            p.add_argument("--seeds", default="0,1,2")
    return parser


def _apply_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed,
                      synth=replace(cfg.synth, seed=args.seed),
                      train=replace(cfg.train, seed=args.seed))
    if args.out is not None:
        cfg = replace(cfg, out_dir=Path(args.out))
    if args.mock_llm:
        cfg = replace(cfg, llm=replace(cfg.llm, mock=True))
    return cfg


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_pipeline_config(args.config), args)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except StreamRiskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
