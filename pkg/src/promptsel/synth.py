"""Synthetic multilingual benchmark generator for desk-scale runs.

Each "language" is a Gaussian cluster in embedding space. A cluster's center
is placed at a configured cosine to the target cluster's center, so
auxiliary relatedness is known ground truth and recorded in the manifest.

Embedding layout (three blocks): a signal block holding the cluster-centered
latent of each example, an answer block, and a query-noise block. Bank-role
rows carry signal + answer blocks; query-role rows carry signal + noise
blocks. The answer block of an example is a per-cluster linear map applied
to its latent, and that map is blended toward the target cluster's map in
proportion to the center cosine: training data from related clusters
therefore teaches (approximately) the same query-to-answer alignment the
target task needs, while unrelated clusters teach a different one. Ranking
candidates the way the embedding-distance oracle does is consequently not
achievable with the identity projection, but is learnable by one, and extra
related data genuinely helps.

Outputs are deterministic functions of the cluster id and a per-example key,
so oracle rankings are computable in closed form from the manifest.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Example, write_bank_jsonl, write_embeddings
from .errors import ParameterError

ANSWER_VOCAB = 17
TOPIC_WORDS = 6


@dataclass(frozen=True)
class SynthSpec:
    dim: int = 16
    aux_cosines: tuple[float, ...] = (0.9, 0.5, 0.1, -0.2, 0.05)
    target_size: int = 48
    aux_size: int = 96
    validation_size: int = 32
    queries_size: int = 24
    noise: float = 0.25
    answer_scale: float = 1.2
    answer_noise: float = 0.2
    query_noise: float = 0.3
    related_threshold: float = 0.8
    duplicates: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.dim < 8:
            raise ParameterError("synthetic benchmark needs dim >= 8")
        if not self.aux_cosines:
            raise ParameterError("at least one auxiliary cluster is required")
        if any(not -1.0 <= c <= 1.0 for c in self.aux_cosines):
            raise ParameterError("aux cosines must lie in [-1, 1]")
        if self.duplicates < 1:
            raise ParameterError("duplicates must be >= 1")

    @property
    def blocks(self) -> tuple[int, int, int]:
        signal = self.dim // 2
        answer = max(1, self.dim // 4)
        return signal, answer, self.dim - signal - answer


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _orthogonal_unit(rng: np.random.Generator, base: np.ndarray) -> np.ndarray:
    v = rng.standard_normal(base.shape[0])
    v -= (v @ base) * base
    return _unit(v)


class _ClusterFactory:
    """Shared geometry: centers, per-cluster answer maps, token vocabularies."""

    def __init__(self, spec: SynthSpec, rng: np.random.Generator):
        self.spec = spec
        signal, answer, _ = spec.blocks
        self.center0 = _unit(rng.standard_normal(signal))
        self.map0 = rng.standard_normal((answer, signal)) / np.sqrt(signal)
        self.centers = {0: self.center0}
        self.maps = {0: self.map0}
        for h, cos in enumerate(spec.aux_cosines, start=1):
            ortho = _orthogonal_unit(rng, self.center0)
            self.centers[h] = cos * self.center0 + np.sqrt(max(0.0, 1.0 - cos * cos)) * ortho
            blend = max(0.0, cos)
            indep = rng.standard_normal((answer, signal)) / np.sqrt(signal)
            self.maps[h] = blend * self.map0 + np.sqrt(1.0 - blend * blend) * indep

    def make_examples(
        self,
        cluster: int,
        language: str,
        count: int,
        id_prefix: str,
        rng: np.random.Generator,
        duplicates: int = 1,
    ) -> tuple[list[Example], np.ndarray, np.ndarray]:
        """Examples plus aligned (bank-role, query-role) embedding matrices."""
        spec = self.spec
        signal, answer, noise_dim = spec.blocks
        unique = count // duplicates
        if unique < 1:
            raise ParameterError(f"bank of {count} cannot hold {duplicates} copies each")
        examples: list[Example] = []
        bank_rows = np.zeros((unique * duplicates, spec.dim))
        query_rows = np.zeros((unique * duplicates, spec.dim))
        row = 0
        for i in range(unique):
            latent = self.centers[cluster] + spec.noise * rng.standard_normal(signal)
            ans = spec.answer_scale * (self.maps[cluster] @ latent)
            ans = ans + spec.answer_noise * rng.standard_normal(answer)
            zeta = spec.query_noise * rng.standard_normal(noise_dim)
            answer_key = (3 * i + 5 * cluster) % ANSWER_VOCAB
            topic_a = i % TOPIC_WORDS
            topic_b = (3 * i + 1) % TOPIC_WORDS
            for copy in range(duplicates):
                ex_id = f"{id_prefix}{row:04d}"
                examples.append(
                    Example(
                        id=ex_id,
                        input_text=(
                            f"{language} sample {ex_id} topic{cluster}x{topic_a} "
                            f"topic{cluster}x{topic_b} ask"
                        ),
                        output_text=f"{language} answer a{answer_key:02d}",
                        language=language,
                    )
                )
                bank_rows[row, :signal] = latent
                bank_rows[row, signal : signal + answer] = ans
                query_rows[row, :signal] = latent
                query_rows[row, signal + answer :] = zeta
                row += 1
        return examples, bank_rows, query_rows


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def generate_benchmark(spec: SynthSpec, out_dir: str | Path) -> dict:
    """Write bank, embedding, and query files plus the manifest; returns it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([spec.seed, 424243])
    factory = _ClusterFactory(spec, rng)

    def emit(name: str, examples, bank_rows, query_rows) -> dict:
        bank_path = out / f"{name}.jsonl"
        emb_path = out / f"{name}.emb"
        qemb_path = out / f"{name}.qemb"
        write_bank_jsonl(examples, bank_path)
        write_embeddings(emb_path, bank_rows)
        write_embeddings(qemb_path, query_rows)
        return {
            "bank": bank_path.name,
            "embeddings": emb_path.name,
            "query_embeddings": qemb_path.name,
            "sha256": {
                bank_path.name: _sha256(bank_path),
                emb_path.name: _sha256(emb_path),
                qemb_path.name: _sha256(qemb_path),
            },
        }

    files: dict[str, dict] = {}
    clusters: list[dict] = []

    tgt = factory.make_examples(
        0, "tgt", spec.target_size, "tgt-", np.random.default_rng([spec.seed, 1, 0]),
        duplicates=spec.duplicates,
    )
    files["target"] = emit("target", *tgt)
    clusters.append({"language": "tgt", "cluster": 0, "nominal_cosine": 1.0, "related": True})

    val = factory.make_examples(
        0, "tgt", spec.validation_size, "val-", np.random.default_rng([spec.seed, 2, 0])
    )
    files["validation"] = emit("validation", *val)

    qry = factory.make_examples(
        0, "tgt", spec.queries_size, "qry-", np.random.default_rng([spec.seed, 3, 0])
    )
    files["queries"] = emit("queries", *qry)

    for h, cos in enumerate(spec.aux_cosines, start=1):
        lang = f"aux{h}"
        bank = factory.make_examples(
            h, lang, spec.aux_size, f"{lang}-", np.random.default_rng([spec.seed, 4, h]),
            duplicates=spec.duplicates,
        )
        files[lang] = emit(lang, *bank)
        clusters.append(
            {
                "language": lang,
                "cluster": h,
                "nominal_cosine": cos,
                "related": cos >= spec.related_threshold,
            }
        )

    signal, answer, noise_dim = spec.blocks
    manifest = {
        "generator": "promptsel-synth",
        "seed": spec.seed,
        "spec": dataclasses.asdict(spec),
        "blocks": {"signal": signal, "answer": answer, "noise": noise_dim},
        "clusters": clusters,
        "related_languages": [c["language"] for c in clusters if c["related"] and c["cluster"] != 0],
        "files": files,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return manifest
