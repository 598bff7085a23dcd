"""Command-line surface: ingest, select-aux, train, retrieve, eval, synth.

Every command writes its artifact plus a manifest carrying the resolved
configuration hash and seed; given the same config and seed, reruns produce
byte-identical manifests. Relative paths inside a config file resolve
against the config file's directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import altmin, dpp, metrics, prompt, retriever, synth
from ._core import BACKEND
from .config import BankSpec, RunConfig, apply_overrides, load_config
from .corpus import (
    BankCollection,
    ExampleBank,
    attach_embeddings,
    concat_banks,
    ingest_bank,
)
from .errors import ConfigError, PromptselError
from .metrics import EvalRecord, evaluate_run
from .scorer import OracleScorer, RemoteScorer, Scorer

DPP_STREAM = 982451653


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_manifest(path: Path, obj: dict) -> None:
    path.write_text(canonical_json(obj) + "\n", encoding="utf-8")


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _resolve(path: str, base: Path | None) -> Path:
    p = Path(path)
    if not p.is_absolute() and base is not None:
        return base / p
    return p


def load_bank(spec: BankSpec, base: Path | None) -> ExampleBank:
    bank = ingest_bank(_resolve(spec.path, base), spec.language)
    bank = attach_embeddings(bank, _resolve(spec.embeddings, base), role="bank")
    if spec.query_embeddings:
        bank = attach_embeddings(bank, _resolve(spec.query_embeddings, base), role="query")
    return bank


def make_scorer(config: RunConfig, banks: list[ExampleBank]) -> Scorer:
    endpoint = config.endpoint or os.environ.get("SCORER_ENDPOINT")
    if endpoint:
        return RemoteScorer(endpoint, token=os.environ.get("SCORER_TOKEN"))
    return OracleScorer(banks)


def _config_base(args) -> Path | None:
    return Path(args.config).parent if args.config else None


def resolve_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {
        name: getattr(args, name, None)
        for name in (
            "delta",
            "iterations",
            "epochs",
            "dpp_epochs",
            "batch_size",
            "learning_rate",
            "candidates",
            "k",
            "subsets",
            "tradeoff",
            "seed",
            "mode",
            "task",
            "endpoint",
            "bm25_k1",
            "bm25_b",
            "candidates_by_embedding",
            "dpp_pool",
            "shortlist",
            "validate_with_generation",
        )
    }
    return apply_overrides(config, **overrides)


def _require(config: RunConfig, *fields: str) -> None:
    for name in fields:
        if getattr(config, name) is None:
            raise ConfigError(f"config field {name!r} is required for this command")


def cmd_ingest(args) -> int:
    config = resolve_config(args)
    bank = ingest_bank(args.bank, args.lang)
    report: dict = {
        "command": "ingest",
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "language": args.lang,
        "examples": len(bank),
        "files": {},
    }
    report["files"][str(args.bank)] = sha256_file(Path(args.bank))
    if args.embeddings:
        bank = attach_embeddings(bank, args.embeddings, role="bank")
        report["dim"] = bank.dim
        report["files"][str(args.embeddings)] = sha256_file(Path(args.embeddings))
    if args.query_embeddings:
        bank = attach_embeddings(bank, args.query_embeddings, role="query")
        report["files"][str(args.query_embeddings)] = sha256_file(Path(args.query_embeddings))
    write_manifest(Path(args.out), report)
    print(f"ingested {len(bank)} examples ({args.lang}) -> {args.out}")
    return 0


def cmd_select_aux(args) -> int:
    config = resolve_config(args)
    _require(config, "target")
    if not config.auxiliaries:
        raise ConfigError("config field 'auxiliaries' must list candidate banks")
    base = _config_base(args)
    target = load_bank(config.target, base)
    candidates = [load_bank(spec, base) for spec in config.auxiliaries]
    selection = altmin.select_auxiliary(target, candidates, config.delta)
    report = {
        "command": "select-aux",
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "delta": config.delta,
        "similarities": selection.similarities,
        "threshold": selection.threshold,
        "selected": list(selection.selected),
    }
    write_manifest(Path(args.out), report)
    print(f"selected {len(selection.selected)}/{len(candidates)} auxiliaries -> {args.out}")
    return 0


def _generation_validator(collection, scorer, config, template):
    metric = metrics.PRIMARY_METRIC.get(config.task, "chrf1")
    k = min(config.k, len(collection.target))

    def score(params) -> float:
        total = 0.0
        for i, ex in enumerate(collection.validation.examples):
            result = dpp.retrieve(
                params,
                collection.target,
                collection.validation.query_row(i),
                k,
                tradeoff=config.tradeoff,
                shortlist=config.shortlist,
                query_id=ex.id,
            )
            text = scorer.generate(prompt.render(template, result.examples, ex))
            value = metrics.chrf1(text, ex.output_text) if metric == "chrf1" else metrics.token_f1(text, ex.output_text)
            total += value
        return total / len(collection.validation.examples)

    return score


def cmd_train(args) -> int:
    config = resolve_config(args)
    _require(config, "target", "validation")
    base = _config_base(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    target = load_bank(config.target, base)
    validation = load_bank(config.validation, base)
    aux_banks = [load_bank(spec, base) for spec in config.auxiliaries]
    scorer = make_scorer(config, [target, validation, *aux_banks])

    selection = None
    selected_banks: list[ExampleBank] = []
    if aux_banks:
        selection = altmin.select_auxiliary(target, aux_banks, config.delta)
        selected_banks = [b for b in aux_banks if b.language in selection.selected]
    collection = BankCollection(target, validation, tuple(selected_banks))

    manifest: dict = {
        "command": "train",
        "mode": config.mode,
        "seed": config.seed,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "greedy_backend": BACKEND,
        "selected_auxiliaries": list(selection.selected) if selection else [],
        "aux_similarities": selection.similarities if selection else {},
        "alpha": [],
        "checkpoints": {},
    }

    if config.mode in ("full", "relevance-only"):
        validator = None
        if config.validate_with_generation:
            template = _template_for(args, config)
            validator = _generation_validator(collection, scorer, config, template)
        state = altmin.run_alternating_minimization(
            collection, scorer, config, validator=validator
        )
        rho_star = state.best_params
        manifest["alpha"] = state.trace
        manifest["best_iteration"] = state.best_iteration
        for it, ckpt in enumerate(state.checkpoints, start=1):
            name = f"iter_{it:03d}.rtv"
            retriever.save_params(ckpt, out_dir / name)
            manifest["checkpoints"][name] = sha256_file(out_dir / name)
    else:  # dpp-only skips the alternating loop entirely
        rho_star = retriever.identity_params(target.dim)

    retriever.save_params(rho_star, out_dir / "rho_star.rtv")
    manifest["checkpoints"]["rho_star.rtv"] = sha256_file(out_dir / "rho_star.rtv")
    final_name = "rho_star.rtv"

    if config.mode in ("full", "dpp-only"):
        merged = concat_banks([target, *selected_banks])
        result = dpp.train_dpp(
            rho_star, merged, config, np.random.default_rng([config.seed, DPP_STREAM])
        )
        retriever.save_params(result.params, out_dir / "rho_bar.rtv")
        manifest["checkpoints"]["rho_bar.rtv"] = sha256_file(out_dir / "rho_bar.rtv")
        manifest["dpp_diagnostics"] = result.diagnostics
        final_name = "rho_bar.rtv"

    manifest["final_checkpoint"] = final_name
    write_manifest(out_dir / "manifest.json", manifest)
    print(f"trained mode={config.mode} -> {out_dir / final_name}")
    if manifest["alpha"]:
        print("validation trace: " + ", ".join(f"{a:.4f}" for a in manifest["alpha"]))
    return 0


def _template_for(args, config: RunConfig):
    templates = (
        prompt.load_templates(args.templates)
        if getattr(args, "templates", None)
        else prompt.BUILTIN_TEMPLATES
    )
    try:
        return templates[config.task]
    except KeyError:
        raise ConfigError(f"no template defined for task {config.task!r}") from None


def _load_queries(args, config: RunConfig, base: Path | None) -> ExampleBank:
    lang = args.queries_lang or (config.target.language if config.target else "und")
    queries = ingest_bank(args.queries, lang)
    queries = attach_embeddings(queries, args.query_embeddings, role="query")
    if getattr(args, "queries_embeddings", None):
        queries = attach_embeddings(queries, args.queries_embeddings, role="bank")
    return queries


def _retrieval_pool(config: RunConfig, base: Path | None, train_manifest: str | None):
    target = load_bank(config.target, base)
    aux_banks = [load_bank(spec, base) for spec in config.auxiliaries]
    if train_manifest:
        selected = json.loads(Path(train_manifest).read_text(encoding="utf-8")).get(
            "selected_auxiliaries", []
        )
        aux_banks = [b for b in aux_banks if b.language in selected]
    return [target, *aux_banks]


def cmd_retrieve(args) -> int:
    config = resolve_config(args)
    _require(config, "target")
    base = _config_base(args)
    params = retriever.load_params(args.checkpoint)
    pool = concat_banks(_retrieval_pool(config, base, args.train_manifest))
    queries = _load_queries(args, config, base)
    out_path = Path(args.out)
    template = _template_for(args, config)
    prompts_fh = open(args.prompts_out, "w", encoding="utf-8") if args.prompts_out else None
    with out_path.open("w", encoding="utf-8") as fh:
        for i, ex in enumerate(queries.examples):
            result = dpp.retrieve(
                params,
                pool,
                queries.query_row(i),
                min(config.k, len(pool)),
                tradeoff=config.tradeoff,
                shortlist=config.shortlist,
                query_id=ex.id,
            )
            fh.write(
                json.dumps(
                    {
                        "query_id": ex.id,
                        "selected": list(result.ids),
                        "log_det": result.log_det,
                        "similarities": list(result.similarities),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
            if prompts_fh:
                prompts_fh.write(
                    json.dumps(
                        {"query_id": ex.id, "prompt": prompt.render(template, result.examples, ex)},
                        sort_keys=True,
                    )
                    + "\n"
                )
    if prompts_fh:
        prompts_fh.close()
    manifest = {
        "command": "retrieve",
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "checkpoint": sha256_file(Path(args.checkpoint)),
        "output": sha256_file(out_path),
        "greedy_backend": BACKEND,
        "queries": len(queries),
    }
    write_manifest(out_path.with_suffix(out_path.suffix + ".manifest.json"), manifest)
    print(f"retrieved for {len(queries)} queries -> {out_path}")
    return 0


def _records_from_predictions(path: Path) -> list[EvalRecord]:
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            try:
                records.append(
                    EvalRecord(
                        query_id=str(obj["query_id"]),
                        hypothesis=str(obj["hypothesis"]),
                        reference=str(obj["reference"]),
                    )
                )
            except KeyError as exc:
                raise ConfigError(f"{path}:{lineno}: missing key {exc.args[0]!r}") from exc
    return records


def cmd_eval(args) -> int:
    config = resolve_config(args)
    if args.predictions:
        records = _records_from_predictions(Path(args.predictions))
    else:
        if not (args.checkpoint and args.queries and args.query_embeddings):
            raise ConfigError(
                "eval needs either --predictions or --checkpoint/--queries/--query-embeddings"
            )
        _require(config, "target")
        base = _config_base(args)
        params = retriever.load_params(args.checkpoint)
        pool_banks = _retrieval_pool(config, base, args.train_manifest)
        pool = concat_banks(pool_banks)
        queries = _load_queries(args, config, base)
        scorer = make_scorer(config, [*pool_banks, queries])
        template = _template_for(args, config)
        records = []
        for i, ex in enumerate(queries.examples):
            result = dpp.retrieve(
                params,
                pool,
                queries.query_row(i),
                min(config.k, len(pool)),
                tradeoff=config.tradeoff,
                shortlist=config.shortlist,
                query_id=ex.id,
            )
            text = scorer.generate(prompt.render(template, result.examples, ex))
            records.append(EvalRecord(query_id=ex.id, hypothesis=text, reference=ex.output_text))
        if args.predictions_out:
            with Path(args.predictions_out).open("w", encoding="utf-8") as fh:
                for rec in records:
                    fh.write(
                        json.dumps(
                            {
                                "query_id": rec.query_id,
                                "hypothesis": rec.hypothesis,
                                "reference": rec.reference,
                            },
                            sort_keys=True,
                        )
                        + "\n"
                    )
    summary = evaluate_run(records, config.task)
    summary["config_hash"] = config.config_hash()
    summary["seed"] = config.seed
    write_manifest(Path(args.out), summary)
    means = summary["means"]
    print(
        f"evaluated {summary['count']} records: chrf1={means['chrf1']:.2f} "
        f"token_f1={means['token_f1']:.4f} -> {args.out}"
    )
    return 0


def cmd_synth(args) -> int:
    spec = synth.SynthSpec(
        dim=args.dim,
        aux_cosines=tuple(args.aux_cosines),
        target_size=args.target_size,
        aux_size=args.aux_size,
        validation_size=args.validation_size,
        queries_size=args.queries_size,
        noise=args.noise,
        answer_scale=args.answer_scale,
        answer_noise=args.answer_noise,
        query_noise=args.query_noise,
        related_threshold=args.related_threshold,
        duplicates=args.duplicates,
        seed=args.seed if args.seed is not None else 0,
    )
    manifest = synth.generate_benchmark(spec, args.out_dir)
    out = Path(args.out_dir)
    run_config = {
        "target": {
            "path": manifest["files"]["target"]["bank"],
            "embeddings": manifest["files"]["target"]["embeddings"],
            "query_embeddings": manifest["files"]["target"]["query_embeddings"],
            "language": "tgt",
        },
        "validation": {
            "path": manifest["files"]["validation"]["bank"],
            "embeddings": manifest["files"]["validation"]["embeddings"],
            "query_embeddings": manifest["files"]["validation"]["query_embeddings"],
            "language": "tgt",
        },
        "auxiliaries": [
            {
                "path": manifest["files"][c["language"]]["bank"],
                "embeddings": manifest["files"][c["language"]]["embeddings"],
                "query_embeddings": manifest["files"][c["language"]]["query_embeddings"],
                "language": c["language"],
            }
            for c in manifest["clusters"]
            if c["cluster"] != 0
        ],
        "seed": spec.seed,
    }
    (out / "run_config.json").write_text(
        canonical_json(run_config) + "\n", encoding="utf-8"
    )
    print(f"synthetic benchmark ({len(manifest['clusters'])} clusters) -> {args.out_dir}")
    return 0


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat JSON run configuration")
    parser.add_argument("--delta", type=float, help="auxiliary-selection percentile")
    parser.add_argument("--iterations", type=int, help="outer specialize/merge iterations")
    parser.add_argument("--epochs", type=int, help="relevance epochs per outer iteration")
    parser.add_argument("--dpp-epochs", dest="dpp_epochs", type=int, help="diversity fine-tuning epochs")
    parser.add_argument("--batch", dest="batch_size", type=int, help="minibatch size")
    parser.add_argument("--lr", dest="learning_rate", type=float, help="learning rate")
    parser.add_argument("--candidates", type=int, help="mined candidates per sample (F)")
    parser.add_argument("--k", type=int, help="in-context examples per prompt")
    parser.add_argument("--subsets", type=int, help="DPP subsets per sample")
    parser.add_argument("--tradeoff", type=float, help="relevance weight in the DPP kernel")
    parser.add_argument("--seed", type=int, help="global RNG seed")
    parser.add_argument("--mode", choices=["full", "relevance-only", "dpp-only"])
    parser.add_argument("--task", choices=["translation", "summarization", "xorqa", "xquad"])
    parser.add_argument("--endpoint", help="scoring endpoint URL (default: offline oracle)")
    parser.add_argument("--bm25-k1", dest="bm25_k1", type=float, help="BM25 k1")
    parser.add_argument("--bm25-b", dest="bm25_b", type=float, help="BM25 b")
    parser.add_argument(
        "--candidates-by-embedding",
        dest="candidates_by_embedding",
        action="store_const",
        const=True,
        default=None,
        help="mine candidates by base-embedding cosine instead of BM25",
    )
    parser.add_argument("--dpp-pool", dest="dpp_pool", type=int, help="kernel pool size in DPP training")
    parser.add_argument("--shortlist", type=int, help="inference-time kernel shortlist size")
    parser.add_argument(
        "--validate-with-generation",
        dest="validate_with_generation",
        action="store_const",
        const=True,
        default=None,
        help="validate via generation + metrics instead of retrieval MRR",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptsel",
        description="Cross-lingual in-context example selection pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a bank file and its embeddings")
    _add_config_flags(p)
    p.add_argument("--bank", required=True)
    p.add_argument("--lang", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--query-embeddings", dest="query_embeddings")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("select-aux", help="pick auxiliary banks by mean-embedding cosine")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select_aux)

    p = sub.add_parser("train", help="run the training pipeline for the configured mode")
    _add_config_flags(p)
    p.add_argument("--templates", help="JSON file overriding the built-in prompt templates")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("retrieve", help="select diverse demonstrations for query inputs")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--query-embeddings", dest="query_embeddings", required=True)
    p.add_argument("--queries-lang", dest="queries_lang")
    p.add_argument("--train-manifest", dest="train_manifest")
    p.add_argument("--prompts-out", dest="prompts_out")
    p.add_argument("--templates", help="JSON file overriding the built-in prompt templates")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", help="score predictions (or generate them first)")
    _add_config_flags(p)
    p.add_argument("--predictions")
    p.add_argument("--checkpoint")
    p.add_argument("--queries")
    p.add_argument("--query-embeddings", dest="query_embeddings")
    p.add_argument("--queries-embeddings", dest="queries_embeddings",
                   help="bank-role rows for the queries (needed by the offline oracle)")
    p.add_argument("--queries-lang", dest="queries_lang")
    p.add_argument("--train-manifest", dest="train_manifest")
    p.add_argument("--predictions-out", dest="predictions_out")
    p.add_argument("--templates", help="JSON file overriding the built-in prompt templates")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate the synthetic desk-scale benchmark")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument(
        "--aux-cosines",
        dest="aux_cosines",
        type=float,
        nargs="+",
        default=[0.9, 0.5, 0.1, -0.2, 0.05],
    )
    p.add_argument("--target-size", dest="target_size", type=int, default=48)
    p.add_argument("--aux-size", dest="aux_size", type=int, default=96)
    p.add_argument("--validation-size", dest="validation_size", type=int, default=32)
    p.add_argument("--queries-size", dest="queries_size", type=int, default=24)
    p.add_argument("--noise", type=float, default=0.25)
    p.add_argument("--answer-scale", dest="answer_scale", type=float, default=1.2)
    p.add_argument("--answer-noise", dest="answer_noise", type=float, default=0.2)
    p.add_argument("--query-noise", dest="query_noise", type=float, default=0.3)
    p.add_argument("--related-threshold", dest="related_threshold", type=float, default=0.8)
    p.add_argument("--duplicates", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PromptselError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
