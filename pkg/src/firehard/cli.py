"""Command-line interface: train, attack, harden-fact, eval, search, analyze, run."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

from . import attacker as attacker_mod
from . import embedstore, fact, harness, switch, textcore
from ._seeds import derive_seed
from .attacker import AttackParams, build_adversarial_set
from .harness import AttackReport, evaluate, filter_correct, make_defense_fn
from .model import (
    ToyClassifier,
    TrainParams,
    load_checkpoint,
    save_checkpoint,
    save_loss_history,
    train,
)
from .switch import SwitchEngine, SwitchParams


def resolve_seed(cli_seed: Optional[int], fallback: int = 0) -> int:
    """--seed wins; FIREHARD_SEED next; fallback last."""
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get("FIREHARD_SEED")
    if env is not None:
        return int(env)
    return fallback


def _add_embedding_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--embeddings", help="GloVe-style text embedding file")
    g.add_argument(
        "--fixture", action="store_true", help="use the built-in fixture embeddings"
    )
    p.add_argument("--fixture-seed", type=int, default=0)
    p.add_argument("--fixture-dim", type=int, default=16)
    p.add_argument("--index", help="prebuilt .fbni neighbor index (else built fresh)")
    p.add_argument("--k", type=int, default=30, help="neighbors per word when building")


def _load_store_index(args) -> tuple[embedstore.EmbeddingStore, embedstore.NeighborIndex]:
    if args.fixture:
        store = embedstore.make_fixture_store(seed=args.fixture_seed, d=args.fixture_dim)
    else:
        store = embedstore.load_embeddings(args.embeddings)
    if args.index:
        index = embedstore.load_index(args.index)
    else:
        index = embedstore.build_neighbor_index(store, k=args.k)
    return store, index


def _add_dataset_args(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--dataset", help="TSV dataset (label<TAB>text_a[<TAB>text_b])")
    g.add_argument(
        "--synthetic", choices=["sentiment", "entailment"], help="generate a desk corpus"
    )
    p.add_argument("--size", type=int, default=1000, help="synthetic corpus size")
    p.add_argument("--schema", choices=["single", "pair"], default="single")
    p.add_argument("--class-names", help="comma-separated label names for TSV input")
    p.add_argument("--dataset-seed", type=int, default=None)


def _load_dataset(args, seed: int) -> textcore.Dataset:
    if args.synthetic:
        ds_seed = args.dataset_seed if args.dataset_seed is not None else seed
        return textcore.make_synthetic_dataset(ds_seed, args.size, args.synthetic)
    if not args.class_names:
        raise SystemExit("--class-names is required with --dataset")
    return textcore.load_tsv(
        args.dataset, args.schema, args.class_names.split(",")
    )


def cmd_train(args) -> int:
    seed = resolve_seed(args.seed)
    store, _ = _load_store_index(args)
    dataset = _load_dataset(args, derive_seed(seed, 1))
    params = TrainParams(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        weight_decay=args.weight_decay,
        adam_epsilon=args.adam_epsilon,
        seed=derive_seed(seed, 2),
    )
    model = ToyClassifier.init(
        store,
        num_classes=dataset.num_classes,
        hidden_dim=args.hidden_dim,
        is_pair=dataset.is_pair,
        seed=derive_seed(seed, 3),
    )
    trained, history = train(model, dataset, params)
    save_checkpoint(trained, args.out)
    if args.loss_csv:
        save_loss_history(history, args.loss_csv)
    metrics = evaluate(trained.forward, dataset)
    print(f"saved {args.out}  train-accuracy={metrics.accuracy:.4f}")
    return 0


def _defense_config(args, seed: int) -> dict:
    extra = json.loads(args.defense_json) if args.defense_json else {}
    if args.defense == "fuse":
        return {
            "type": "fuse",
            "switch": {**extra.get("switch", {}), "seed": derive_seed(seed, 8)},
            "vote_mode": extra.get("vote_mode", "logit_average"),
        }
    return {
        "type": "five",
        "params": {**extra.get("params", {}), "seed": derive_seed(seed, 8)},
        "rotate_per_query": extra.get("rotate_per_query", False),
    }


def cmd_attack(args) -> int:
    seed = resolve_seed(args.seed)
    store, index = _load_store_index(args)
    model = load_checkpoint(args.model)
    if args.defense == "none":
        fn = model.forward
    else:
        engine = SwitchEngine(model=model, store=store, index=index)
        fn = make_defense_fn(model, engine, _defense_config(args, seed))
    dataset = _load_dataset(args, derive_seed(seed, 1))
    if args.only_correct:
        dataset = filter_correct(fn, dataset, workers=args.workers)
    params = AttackParams(
        neighbors_per_word=args.neighbors_per_word,
        min_sentence_similarity=args.min_sentence_similarity,
        pos_match=args.pos_match,
        max_positions=args.max_positions,
        seed=derive_seed(seed, 4),
        mask_mode=args.mask_mode,
    )
    adv, results = build_adversarial_set(
        fn, store, index, switch.PosLexicon.default(), dataset, params,
        workers=args.workers,
    )
    textcore.save_tsv(adv, args.out_tsv)
    attacker_mod.save_attack_results(results, args.out_results)
    report = AttackReport.from_results(results, len(dataset), str(args.out_results))
    print(json.dumps(report.payload(), indent=2, sort_keys=True))
    return 0


def cmd_harden_fact(args) -> int:
    seed = resolve_seed(args.seed)
    store, index = _load_store_index(args)
    dataset = _load_dataset(args, derive_seed(seed, 1))
    if args.model:
        model = load_checkpoint(args.model)
    else:
        model = ToyClassifier.init(
            store,
            num_classes=dataset.num_classes,
            hidden_dim=args.hidden_dim,
            is_pair=dataset.is_pair,
            seed=derive_seed(seed, 3),
        )
    sw = SwitchParams(**{**json.loads(args.switch), "seed": derive_seed(seed, 5)})
    tp = TrainParams(**{**json.loads(args.train), "seed": derive_seed(seed, 6)})
    engine = SwitchEngine(model=model, store=store, index=index)
    hardened, history = fact.fact_train(
        model, dataset, fact.FactParams(sw, tp), engine
    )
    save_checkpoint(hardened, args.out)
    if args.loss_csv:
        save_loss_history(history, args.loss_csv)
    print(f"saved {args.out}")
    return 0


def cmd_eval(args) -> int:
    seed = resolve_seed(args.seed)
    model = load_checkpoint(args.model)
    dataset = _load_dataset(args, derive_seed(seed, 1))
    if args.defense == "none":
        fn = model.forward
        config: dict = {"type": "none"}
    else:
        if not args.fixture and not args.embeddings:
            raise SystemExit("--embeddings or --fixture is required with a defense")
        store, index = _load_store_index(args)
        engine = SwitchEngine(model=model, store=store, index=index)
        config = _defense_config(args, seed)
        fn = make_defense_fn(model, engine, config)
    metrics = evaluate(fn, dataset, workers=args.workers)
    payload = {
        "defense": config,
        "accuracy": metrics.accuracy,
        "macro_f1": metrics.macro_f1,
        "per_class": [s.to_dict() for s in metrics.per_class],
        "seed": seed,
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_search(args) -> int:
    manifest = harness.load_manifest(args.manifest)
    manifest["stages"] = ["search"]
    harness.run_experiment(
        manifest,
        output_dir=args.output_dir,
        workers=args.workers,
        seed=resolve_seed(args.seed, manifest["seed"]),
    )
    print(f"search finished under {args.output_dir or manifest['output_dir']}")
    return 0


def cmd_analyze(args) -> int:
    seed = resolve_seed(args.seed)
    store, index = _load_store_index(args)
    model = load_checkpoint(args.model)
    sample = textcore.make_sample(args.text, args.text_b, id="analyze")
    params = harness.AnalysisParams(
        top=args.top, draws=args.draws, sigma=args.sigma, seed=seed
    )
    header, rows = harness.emit_neighborhood_analysis(
        model, store, index, sample, args.position, args.mode, params
    )
    harness.write_analysis_csv(header, rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_run(args) -> int:
    manifest = harness.load_manifest(args.manifest)
    if args.stages:
        manifest["stages"] = args.stages.split(",")
    summary = harness.run_experiment(
        manifest,
        output_dir=args.output_dir,
        workers=args.workers,
        seed=args.seed if args.seed is not None else resolve_seed(None, manifest["seed"]),
    )
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="firehard",
        description="Desk-scale hardening toolkit for word-substitution attacks",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=None,
                       help="overrides the FIREHARD_SEED environment variable")
        p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("train", help="train a baseline classifier")
    _add_embedding_args(p)
    _add_dataset_args(p)
    p.add_argument("--hidden-dim", type=int, default=32)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=1e-2)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--adam-epsilon", type=float, default=1e-8)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack", help="build an adversarial set against a checkpoint")
    _add_embedding_args(p)
    _add_dataset_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--defense", choices=["none", "fuse", "five"], default="none",
                   help="attack the classifier behind this defense (active attack)")
    p.add_argument("--defense-json", help="defense parameters as JSON")
    p.add_argument("--neighbors-per-word", type=int, default=15)
    p.add_argument("--min-sentence-similarity", type=float, default=0.5)
    p.add_argument("--pos-match", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--max-positions", type=int, default=None)
    p.add_argument("--mask-mode", choices=["placeholder", "delete"], default="placeholder")
    p.add_argument("--only-correct", action=argparse.BooleanOptionalAction, default=True,
                   help="attack only currently-correct predictions")
    p.add_argument("--out-tsv", required=True)
    p.add_argument("--out-results", required=True)
    common(p)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("harden-fact", help="co-tune a classifier with injected alternatives")
    _add_embedding_args(p)
    _add_dataset_args(p)
    p.add_argument("--model", help="starting checkpoint (omit to start fresh)")
    p.add_argument("--hidden-dim", type=int, default=32)
    p.add_argument("--switch", default="{}", help="SwitchParams overrides as JSON")
    p.add_argument("--train", default="{}", help="TrainParams overrides as JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv")
    common(p)
    p.set_defaults(fn=cmd_harden_fact)

    p = sub.add_parser("eval", help="evaluate a checkpoint, optionally behind a defense")
    _add_embedding_args(p, required=False)
    _add_dataset_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--defense", choices=["none", "fuse", "five"], default="none")
    p.add_argument("--defense-json", help="defense parameters as JSON")
    p.add_argument("--report", help="write the JSON report here")
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("search", help="run the manifest's random hyperparameter search")
    p.add_argument("--manifest", required=True)
    p.add_argument("--output-dir")
    common(p)
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("analyze", help="emit neighborhood-classification analysis CSV")
    _add_embedding_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--text-b")
    p.add_argument("--position", type=int, required=True)
    p.add_argument("--mode", choices=["word_neighbors", "vector_cloud"], required=True)
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--draws", type=int, default=100)
    p.add_argument("--sigma", type=float, default=0.25)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("run", help="execute an experiment manifest end to end")
    p.add_argument("--manifest", required=True)
    p.add_argument("--output-dir")
    p.add_argument("--stages", help="comma-separated stage subset")
    common(p)
    p.set_defaults(fn=cmd_run)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
