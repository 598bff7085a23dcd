"""Run configuration: every pipeline hyperparameter in one flat record.

Configs load from a flat JSON file and are overridden field-by-field from CLI
flags; secrets (the scorer bearer token) come only from the environment.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

MODES = ("full", "relevance-only", "dpp-only")
TASKS = ("translation", "summarization", "xorqa", "xquad")


@dataclass(frozen=True)
class BankSpec:
    """Paths and language tag for one bank on disk."""

    path: str
    embeddings: str
    language: str
    query_embeddings: str | None = None

    @classmethod
    def from_dict(cls, obj: dict[str, Any], where: str) -> "BankSpec":
        unknown = set(obj) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"{where}: unknown field {sorted(unknown)[0]!r}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    target: BankSpec | None = None
    validation: BankSpec | None = None
    auxiliaries: tuple[BankSpec, ...] = field(default_factory=tuple)

    delta: float = 95.0              # auxiliary-selection percentile
    iterations: int = 10             # outer specialize/merge iterations
    epochs: int = 120                # relevance epochs per outer iteration
    dpp_epochs: int = 10             # diversity fine-tuning epochs
    batch_size: int = 64
    learning_rate: float = 1e-4
    candidates: int = 50             # mined candidate pool size F
    k: int = 16                      # in-context examples per prompt
    subsets: int = 8                 # DPP subsets per sample (1 positive + rest negatives)
    tradeoff: float = 1.0            # relevance exponent in the DPP kernel
    seed: int = 0
    mode: str = "full"
    task: str = "translation"
    endpoint: str | None = None      # HTTP scorer; None selects the offline oracle
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    candidates_by_embedding: bool = False
    dpp_pool: int = 100              # per-sample kernel pool during DPP training
    shortlist: int | None = None     # optional inference-time kernel shortlist
    validate_with_generation: bool = False

    def __post_init__(self):
        for name in ("iterations", "epochs", "dpp_epochs", "batch_size", "candidates", "k", "subsets", "dpp_pool"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not 0.0 <= self.delta <= 100.0:
            raise ConfigError("delta must lie in [0, 100]")
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate must be positive")
        if self.tradeoff <= 0.0:
            raise ConfigError("tradeoff must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.shortlist is not None and self.shortlist < 1:
            raise ConfigError("shortlist must be a positive integer when set")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def _coerce_banks(obj: dict[str, Any]) -> dict[str, Any]:
    out = dict(obj)
    if out.get("target") is not None:
        out["target"] = BankSpec.from_dict(out["target"], "target")
    if out.get("validation") is not None:
        out["validation"] = BankSpec.from_dict(out["validation"], "validation")
    aux = out.get("auxiliaries") or ()
    out["auxiliaries"] = tuple(
        BankSpec.from_dict(a, f"auxiliaries[{i}]") for i, a in enumerate(aux)
    )
    return out


def config_from_dict(obj: dict[str, Any]) -> RunConfig:
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown config field {sorted(unknown)[0]!r}")
    return RunConfig(**_coerce_banks(obj))


def load_config(path: str | Path) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_dict(obj)


def apply_overrides(config: RunConfig, **overrides: Any) -> RunConfig:
    """Replace fields whose override value is not None."""
    changes = {k: v for k, v in overrides.items() if v is not None}
    if not changes:
        return config
    return dataclasses.replace(config, **changes)
