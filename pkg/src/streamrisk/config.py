"""Declarative pipeline configuration and run manifests.

One JSON file drives every subcommand; each run writes a manifest with
config and artifact hashes so results can be traced back to their inputs.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigurationError
from .losses import LossWeights
from .model import ModelConfig
from .sessions import DiscretizationConfig, PreprocessConfig
from .synth import SynthConfig
from .train import TrainConfig


@dataclass(frozen=True)
class DataPaths:
    train: Path
    val: Path
    test: Path
    truth: Path


@dataclass(frozen=True)
class LLMSettings:
    mock: bool = True
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "STREAMRISK_LLM_API_KEY"
    timeout: float = 60.0
    max_retries: int = 2


@dataclass
class PipelineConfig:
    seed: int
    out_dir: Path
    data: DataPaths
    splits: tuple[float, float, float]
    synth: SynthConfig
    discretization: DiscretizationConfig
    preprocess: PreprocessConfig
    model: ModelConfig
    train: TrainConfig
    loss_weights: LossWeights
    llm: LLMSettings
    select_threshold: float
    index_dir: Path
    source_digest: str = ""

    @property
    def cache_path(self) -> Path:
        return self.out_dir / "llm_cache.jsonl"


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigurationError(f"config section {name!r} must be an object")
    return dict(value)


def _build(cls, section: dict, **overrides):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigurationError(
            f"unknown keys for {cls.__name__}: {sorted(unknown)}"
        )
    merged = {**section, **overrides}
    for key, value in merged.items():
        if isinstance(value, list):
            merged[key] = tuple(value)
    return cls(**merged)


def load_pipeline_config(path: str | Path) -> PipelineConfig:
    """Load a config file; relative paths resolve against its directory."""
    path = Path(path)
    raw = json.loads(path.read_text("utf-8"))
    base = path.parent

    def resolve(p: str) -> Path:
        candidate = Path(p)
        return candidate if candidate.is_absolute() else base / candidate

    seed = int(raw.get("seed", 0))
    data_raw = _section(raw, "data")
    for key in ("train", "val", "test", "truth"):
        if key not in data_raw:
            raise ConfigurationError(f"config data section lacks {key!r}")
    data = DataPaths(**{k: resolve(v) for k, v in data_raw.items()})

    disc = _build(DiscretizationConfig, _section(raw, "discretization"))
    synth_section = _section(raw, "synth")
    synth_section.setdefault("horizon_seconds", disc.horizon_seconds)
    synth_section.setdefault("slot_seconds", disc.slot_seconds)
    synth = _build(SynthConfig, synth_section, seed=seed)

    pre_section = _section(raw, "preprocess")
    pre_section.setdefault("horizon_seconds", disc.horizon_seconds)
    preprocess = _build(PreprocessConfig, pre_section)

    model_section = _section(raw, "model")
    model_section.setdefault("d_text", synth.d_text)
    model = _build(ModelConfig, model_section)
    if model.d_text != synth.d_text:
        raise ConfigurationError(
            f"model.d_text={model.d_text} != synth.d_text={synth.d_text}"
        )

    train = _build(TrainConfig, _section(raw, "train"), seed=seed)
    weights = _build(LossWeights, _section(raw, "loss_weights"))
    llm = _build(LLMSettings, _section(raw, "llm"))

    splits = tuple(raw.get("splits", (0.6, 0.2, 0.2)))
    if len(splits) != 3:
        raise ConfigurationError("splits must hold three fractions")

    return PipelineConfig(
        seed=seed,
        out_dir=resolve(raw.get("out_dir", "runs")),
        data=data,
        splits=splits,
        synth=synth,
        discretization=disc,
        preprocess=preprocess,
        model=model,
        train=train,
        loss_weights=weights,
        llm=llm,
        select_threshold=float(raw.get("select_threshold", 0.5)),
        index_dir=resolve(raw.get("index_dir", str(Path(raw.get(
            "out_dir", "runs")) / "index"))),
        source_digest=hashlib.sha256(path.read_bytes()).hexdigest(),
    )


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(
    cfg: PipelineConfig,
    command: str,
    inputs: dict[str, Path],
    outputs: dict[str, Path],
    extra: dict | None = None,
) -> Path:
    """Record config hash, seed, and artifact hashes for one stage run."""

    def describe(paths: dict[str, Path]) -> dict:
        out = {}
        for name, p in paths.items():
            p = Path(p)
            if p.is_dir():
                files = sorted(q for q in p.rglob("*") if q.is_file())
                out[name] = {
                    "path": str(p),
                    "sha256": hashlib.sha256(
                        b"".join(sha256_file(q).encode() for q in files)
                    ).hexdigest(),
                }
            else:
                out[name] = {"path": str(p), "sha256": sha256_file(p)}
        return out

    manifest = {
        "command": command,
        "seed": cfg.seed,
        "config_sha256": cfg.source_digest,
        "inputs": describe(inputs),
        "outputs": describe(outputs),
        **({"extra": extra} if extra else {}),
    }
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.out_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2), "utf-8")
    return path
