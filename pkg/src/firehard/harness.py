"""Experiment orchestration: metrics, random search, analysis tables, pipelines.

Every experiment fans a single top-level seed out to per-stage sub-seeds and
writes all artifacts under one output directory. Reports are deterministic
byte-for-byte given (manifest, seed); wall-clock timings go to a separate
timings.json that carries no reproducibility promise.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import jsonschema
import numpy as np

from . import attacker as attacker_mod
from . import embedstore, fact, model as model_mod, switch, textcore
from ._seeds import content_key, derive_seed
from .attacker import AttackParams, AttackResult, ClassifierFn, build_adversarial_set
from .ensemble import FiveParams, five_classify, fuse_classify
from .model import ToyClassifier, TrainParams, load_checkpoint, save_checkpoint, train
from .switch import SwitchEngine, SwitchParams
from .textcore import Dataset, LabeledSample, Sample

MANIFEST_VERSION = 1


class MissingArtifactError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassStats:
    name: str
    precision: float
    recall: float
    f1: float
    support: int
    predicted: int

    def to_dict(self) -> dict:
        return {
            "class": self.name,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "support": self.support,
            "predicted": self.predicted,
        }


@dataclass(frozen=True)
class EvalMetrics:
    accuracy: float
    macro_f1: float
    per_class: tuple[ClassStats, ...]
    confusion: np.ndarray  # rows = gold, cols = predicted
    predictions: tuple[int, ...]


def evaluate(
    classifier_fn: ClassifierFn, dataset: Dataset, workers: int = 1
) -> EvalMetrics:
    """Accuracy, macro-F1, and per-class stats over the dataset.

    Macro-F1 averages per-class F1 over classes that occur in the gold
    labels; a gold class that is never predicted contributes F1 = 0.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")

    def one(ls: LabeledSample) -> int:
        return int(np.argmax(classifier_fn(ls.sample)))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(one, dataset.samples))
    else:
        preds = [one(ls) for ls in dataset.samples]

    c = dataset.num_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    for ls, p in zip(dataset.samples, preds):
        confusion[ls.label, p] += 1
    accuracy = float(np.trace(confusion) / len(dataset))

    stats = []
    f1s = []
    for k in range(c):
        tp = int(confusion[k, k])
        support = int(confusion[k].sum())
        predicted = int(confusion[:, k].sum())
        precision = tp / predicted if predicted else 0.0
        recall = tp / support if support else 0.0
        f1 = (
            2 * precision * recall / (precision + recall)
            if precision + recall
            else 0.0
        )
        stats.append(
            ClassStats(dataset.class_names[k], precision, recall, f1, support, predicted)
        )
        if support:
            f1s.append(f1)
    macro_f1 = float(np.mean(f1s)) if f1s else 0.0
    confusion.setflags(write=False)
    return EvalMetrics(accuracy, macro_f1, tuple(stats), confusion, tuple(preds))


@dataclass(frozen=True)
class EvalReport:
    model_name: str
    dataset_name: str
    accuracy: float
    macro_f1: float
    adv_accuracy: Optional[float]
    adv_macro_f1: Optional[float]
    per_class: tuple[ClassStats, ...]
    config_snapshot: dict
    seed: int
    wall_time: float

    def payload(self) -> dict:
        """Deterministic report body (wall_time deliberately excluded)."""
        return {
            "model_name": self.model_name,
            "dataset_name": self.dataset_name,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "adv_accuracy": self.adv_accuracy,
            "adv_macro_f1": self.adv_macro_f1,
            "per_class": [s.to_dict() for s in self.per_class],
            "config": self.config_snapshot,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class AttackReport:
    after_attack_accuracy: float
    mean_queries: float
    mean_perturbation_rate: float
    success_rate: float
    attacked: int
    successes: int
    total: int
    results_path: str

    @classmethod
    def from_results(
        cls, results: Sequence[AttackResult], total: int, results_path: str
    ) -> "AttackReport":
        successes = [r for r in results if r.success]
        survivors = len(results) - len(successes)
        return cls(
            after_attack_accuracy=survivors / total if total else 0.0,
            mean_queries=float(np.mean([r.queries for r in results])) if results else 0.0,
            mean_perturbation_rate=(
                float(np.mean([r.perturbation_rate for r in successes]))
                if successes
                else 0.0
            ),
            success_rate=len(successes) / len(results) if results else 0.0,
            attacked=len(results),
            successes=len(successes),
            total=total,
            results_path=results_path,
        )

    def payload(self) -> dict:
        return {
            "after_attack_accuracy": self.after_attack_accuracy,
            "mean_queries": self.mean_queries,
            "mean_perturbation_rate": self.mean_perturbation_rate,
            "success_rate": self.success_rate,
            "attacked": self.attacked,
            "successes": self.successes,
            "total": self.total,
            "results": self.results_path,
        }


def filter_correct(
    classifier_fn: ClassifierFn, dataset: Dataset, workers: int = 1
) -> Dataset:
    """Subset of samples the classifier currently gets right."""
    metrics = evaluate(classifier_fn, dataset, workers=workers)
    kept = tuple(
        ls for ls, p in zip(dataset.samples, metrics.predictions) if p == ls.label
    )
    return Dataset(kept, dataset.num_classes, dataset.class_names, dataset.is_pair)


# --------------------------------------------------------------------------
# Random hyperparameter search
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class IntRange:
    lo: int
    hi: int  # inclusive

    def sample(self, rng: np.random.Generator):
        return int(rng.integers(self.lo, self.hi + 1))

    def contains(self, v) -> bool:
        return isinstance(v, int) and self.lo <= v <= self.hi


@dataclass(frozen=True)
class LogRange:
    lo: float
    hi: float

    def sample(self, rng: np.random.Generator):
        return float(np.exp(rng.uniform(np.log(self.lo), np.log(self.hi))))

    def contains(self, v) -> bool:
        return self.lo <= float(v) <= self.hi


@dataclass(frozen=True)
class Choice:
    options: tuple

    def sample(self, rng: np.random.Generator):
        return self.options[int(rng.integers(len(self.options)))]

    def contains(self, v) -> bool:
        return v in self.options


ParamSpec = Union[IntRange, LogRange, Choice]


@dataclass(frozen=True)
class SearchSpace:
    params: dict[str, ParamSpec]
    time_budget_seconds: float
    objective: dict = field(
        default_factory=lambda: {"kind": "adv_accuracy", "min_orig_drop": 0.05}
    )
    max_trials: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.params:
            raise ValueError("search space must be non-empty")
        if self.time_budget_seconds <= 0:
            raise ValueError("time budget must be positive")

    def sample(self, rng: np.random.Generator) -> dict:
        return {k: spec.sample(rng) for k, spec in sorted(self.params.items())}

    def contains(self, config: Mapping) -> bool:
        return all(k in config and spec.contains(config[k]) for k, spec in self.params.items())


@dataclass(frozen=True)
class Trial:
    index: int
    config: dict
    objective: Optional[float]
    error: Optional[str]


@dataclass(frozen=True)
class SearchResult:
    best_config: Optional[dict]
    best_objective: Optional[float]
    trials: tuple[Trial, ...]

    def payload(self) -> dict:
        return {
            "best_config": self.best_config,
            "best_objective": self.best_objective,
            "trials": [
                {
                    "index": t.index,
                    "config": t.config,
                    "objective": t.objective,
                    "error": t.error,
                }
                for t in self.trials
            ],
        }


def random_search(
    space: SearchSpace, trial_fn: Callable[[dict], float], seed: int
) -> SearchResult:
    """Sample configs i.i.d. until the time box expires; at least one trial runs.

    The trial sequence is deterministic per seed; the wall-clock cutoff decides
    how far into it the search gets. Failing trials are logged and skipped.
    """
    rng = np.random.default_rng([int(seed), 13])
    start = time.monotonic()
    trials: list[Trial] = []
    best: Optional[Trial] = None
    i = 0
    while True:
        config = space.sample(rng)
        try:
            objective = float(trial_fn(config))
            trial = Trial(i, config, objective, None)
            if best is None or best.objective is None or (
                trial.objective is not None and trial.objective > best.objective
            ):
                best = trial
        except Exception as exc:  # noqa: BLE001 - a failing trial never aborts the search
            trial = Trial(i, config, None, f"{type(exc).__name__}: {exc}")
        trials.append(trial)
        i += 1
        if space.max_trials is not None and i >= space.max_trials:
            break
        if time.monotonic() - start >= space.time_budget_seconds:
            break
    if best is not None and best.objective is None:
        best = None
    return SearchResult(
        best_config=best.config if best else None,
        best_objective=best.objective if best else None,
        trials=tuple(trials),
    )


# --------------------------------------------------------------------------
# Neighborhood analysis (data behind projection plots)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AnalysisParams:
    top: int = 10
    draws: int = 100
    sigma: float = 0.25
    seed: int = 0


def emit_neighborhood_analysis(
    model: ToyClassifier,
    store: embedstore.EmbeddingStore,
    index: embedstore.NeighborIndex,
    sample: Sample,
    word_position: int,
    mode: str,
    params: AnalysisParams,
) -> tuple[list[str], list[tuple]]:
    """Tabulate classification outcomes around one word, in context.

    word_neighbors: substitute each of the top-k neighbors and classify.
    vector_cloud: Gaussian-perturb the word's embedding row and classify.
    Returns (header, rows) ready for CSV emission.
    """
    tokens = sample.tokens()
    if not 0 <= word_position < len(tokens):
        raise IndexError(f"word_position {word_position} out of range")
    if mode == "word_neighbors":
        word = tokens[word_position].surface
        wid = store.word_id(word)
        if wid is None:
            raise ValueError(f"word {word!r} not in the embedding vocabulary")
        header = ["neighbor", "similarity", "predicted_class"]
        rows = []
        for nid, sim in embedstore.neighbors(store, index, wid, params.top):
            neighbor = store.words[nid]
            swapped = sample.with_token(
                word_position, textcore.Token(neighbor, nid)
            )
            rows.append((neighbor, sim, int(np.argmax(model.forward(swapped)))))
        return header, rows
    if mode == "vector_cloud":
        rows_emb, len_a = model.embed(sample)
        header = ["draw", *[f"v{j}" for j in range(model.d)], "predicted_class"]
        rng = np.random.default_rng([int(params.seed), 17])
        out = []
        for i in range(params.draws):
            perturbed = rows_emb.copy()
            perturbed[word_position] = perturbed[word_position] + rng.normal(
                0.0, params.sigma, size=model.d
            )
            pred = int(np.argmax(model.forward_embeddings(perturbed, len_a)))
            out.append((i, *perturbed[word_position].tolist(), pred))
        return header, out
    raise ValueError(f"mode must be 'word_neighbors' or 'vector_cloud', got {mode!r}")


def write_analysis_csv(
    header: Sequence[str], rows: Sequence[tuple], path: str | Path
) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(
            ",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in row)
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# Defense wrappers
# --------------------------------------------------------------------------


def make_defense_fn(
    base_model: ToyClassifier,
    engine: SwitchEngine,
    defense: Optional[dict],
) -> ClassifierFn:
    """sample -> logits closure for a defense config (None = plain forward)."""
    if defense is None or defense.get("type", "none") == "none":
        return base_model.forward
    kind = defense["type"]
    rotate = bool(defense.get("rotate_per_query", False))
    if kind == "fuse":
        params = SwitchParams(**defense["switch"])
        mode = defense.get("vote_mode", "logit_average")

        def fuse_fn(sample: Sample) -> np.ndarray:
            p = params
            if rotate:
                p = SwitchParams(
                    **{
                        **defense["switch"],
                        "seed": derive_seed(
                            params.seed, content_key(*sample.surfaces())
                        ),
                    }
                )
            return fuse_classify(base_model, engine, sample, p, mode).final_logits

        return fuse_fn
    if kind == "five":
        params = FiveParams(**defense["params"])

        def five_fn(sample: Sample) -> np.ndarray:
            p = params
            if rotate:
                p = FiveParams(
                    embeddings_to_perturb=params.embeddings_to_perturb,
                    samples_per_original=params.samples_per_original,
                    sigma=params.sigma,
                    vote_mode=params.vote_mode,
                    seed=derive_seed(params.seed, content_key(*sample.surfaces())),
                )
            return five_classify(base_model, engine, sample, p).final_logits

        return five_fn
    raise ValueError(f"unknown defense type {kind!r}")


# --------------------------------------------------------------------------
# Manifest-driven experiments
# --------------------------------------------------------------------------


def manifest_schema() -> dict:
    text = (resources.files("firehard") / "data" / "manifest.schema.json").read_text(
        "utf-8"
    )
    return json.loads(text)


def validate_manifest(manifest: dict) -> None:
    jsonschema.validate(manifest, manifest_schema())
    if manifest["version"] != MANIFEST_VERSION:
        raise ValueError(
            f"manifest version {manifest['version']} unsupported "
            f"(expected {MANIFEST_VERSION})"
        )


def load_manifest(path: str | Path) -> dict:
    manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    validate_manifest(manifest)
    return manifest


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def format_results_table(rows: Sequence[dict]) -> str:
    """Aligned text table with the original/adversarial metric columns."""
    header = ("model", "acc", "f1", "adv_acc", "adv_f1")
    table = [header]
    for r in rows:
        table.append(
            (
                r["model_name"],
                f"{r['accuracy']:.4f}",
                f"{r['macro_f1']:.4f}",
                "-" if r.get("adv_accuracy") is None else f"{r['adv_accuracy']:.4f}",
                "-" if r.get("adv_macro_f1") is None else f"{r['adv_macro_f1']:.4f}",
            )
        )
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


class ExperimentRunner:
    """Executes the manifest's pipeline stage by stage under one output dir.

    Later stages consume earlier stages' artifacts from disk, so a manifest can
    be re-run with a stage subset against an existing directory; missing inputs
    fail with the artifact named.
    """

    def __init__(
        self,
        manifest: dict,
        output_dir: Optional[str | Path] = None,
        workers: Optional[int] = None,
        seed: Optional[int] = None,
    ):
        validate_manifest(manifest)
        self.manifest = manifest
        self.root = Path(output_dir or manifest["output_dir"])
        self.workers = int(workers or manifest.get("workers", 1))
        self.seed = int(manifest["seed"] if seed is None else seed)
        self.timings: dict[str, float] = {}
        self._engine: Optional[SwitchEngine] = None

    # -- artifact helpers ---------------------------------------------------

    def path(self, name: str) -> Path:
        return self.root / name

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifactError(
                f"missing artifact {name!r} under {self.root} "
                "(run the producing stage first)"
            )
        return p

    # -- shared context -------------------------------------------------------

    def _dataset_cfg(self) -> dict:
        return self.manifest["dataset"]

    def _class_names(self) -> tuple[str, ...]:
        cfg = self._dataset_cfg()
        if "synthetic" in cfg:
            task = cfg["synthetic"]["task"]
            return (
                textcore.SENTIMENT_CLASS_NAMES
                if task == "sentiment"
                else textcore.ENTAILMENT_CLASS_NAMES
            )
        return tuple(cfg["tsv"]["class_names"])

    def _schema_kind(self) -> str:
        cfg = self._dataset_cfg()
        if "synthetic" in cfg:
            return "pair" if cfg["synthetic"]["task"] == "entailment" else "single"
        return cfg["tsv"]["schema"]

    def load_split(self, split: str) -> Dataset:
        return textcore.load_tsv(
            self.require(f"data/{split}.tsv"), self._schema_kind(), self._class_names()
        )

    def store_and_index(self) -> tuple[embedstore.EmbeddingStore, embedstore.NeighborIndex]:
        store = embedstore.load_embeddings(self.require("embeddings.txt"))
        index = embedstore.load_index(self.require("index.fbni"))
        return store, index

    def engine(self, model: ToyClassifier) -> SwitchEngine:
        store, index = self.store_and_index()
        return SwitchEngine(model=model, store=store, index=index)

    # -- stages ---------------------------------------------------------------

    def run(self) -> dict:
        stages = self.manifest.get(
            "stages", ["train", "attack", "defenses", "search", "report"]
        )
        summary: dict = {"seed": self.seed, "stages": list(stages)}
        for stage in stages:
            t0 = time.perf_counter()
            getattr(self, f"stage_{stage}")()
            self.timings[stage] = time.perf_counter() - t0
        _write_json(self.path("timings.json"), {"seconds": self.timings})
        return summary

    def stage_train(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "data").mkdir(exist_ok=True)
        (self.root / "reports").mkdir(exist_ok=True)
        _write_json(self.path("manifest.json"), self.manifest)

        emb_cfg = self.manifest["embeddings"]
        if "fixture" in emb_cfg:
            store = embedstore.make_fixture_store(
                seed=emb_cfg["fixture"].get("seed", 0),
                d=emb_cfg["fixture"].get("dim", 16),
            )
        else:
            store = embedstore.load_embeddings(emb_cfg["path"])
        embedstore.save_embeddings(store, self.path("embeddings.txt"))
        index = embedstore.build_neighbor_index(
            store, k=self.manifest.get("index", {}).get("k", embedstore.DEFAULT_K)
        )
        embedstore.save_index(index, self.path("index.fbni"))

        cfg = self._dataset_cfg()
        if "synthetic" in cfg:
            syn = cfg["synthetic"]
            for i, split in enumerate(("train", "validation", "test")):
                ds = textcore.make_synthetic_dataset(
                    derive_seed(self.seed, 1, i), syn[split], syn["task"]
                )
                textcore.save_tsv(ds, self.path(f"data/{split}.tsv"))
        else:
            for split in ("train", "validation", "test"):
                src = Path(cfg["tsv"][split])
                ds = textcore.load_tsv(src, self._schema_kind(), self._class_names())
                textcore.save_tsv(ds, self.path(f"data/{split}.tsv"))

        train_ds = self.load_split("train")
        params = TrainParams(
            **{**self.manifest.get("train", {}), "seed": derive_seed(self.seed, 2)}
        )
        base = ToyClassifier.init(
            store,
            num_classes=train_ds.num_classes,
            hidden_dim=self.manifest.get("model", {}).get("hidden_dim", 32),
            is_pair=train_ds.is_pair,
            seed=derive_seed(self.seed, 3),
        )
        trained, history = train(base, train_ds, params)
        save_checkpoint(trained, self.path("baseline.fbtc"))
        model_mod.save_loss_history(history, self.path("loss_history.csv"))

    def _baseline(self) -> ToyClassifier:
        return load_checkpoint(self.require("baseline.fbtc"))

    def stage_attack(self) -> None:
        base = self._baseline()
        store, index = self.store_and_index()
        lexicon = switch.PosLexicon.default()
        cfg = dict(self.manifest.get("attack", {}))
        splits = cfg.pop("splits", ["validation", "test"])
        params = AttackParams(**{**cfg, "seed": derive_seed(self.seed, 4)})
        for split in splits:
            ds = self.load_split(split)
            correct = filter_correct(base.forward, ds, workers=self.workers)
            adv, results = build_adversarial_set(
                base.forward, store, index, lexicon, correct, params,
                workers=self.workers,
            )
            textcore.save_tsv(adv, self.path(f"adv_{split}.tsv"))
            attacker_mod.save_attack_results(
                results, self.path(f"adv_{split}.results.json")
            )
            report = AttackReport.from_results(
                results, total=len(ds), results_path=f"adv_{split}.results.json"
            )
            _write_json(
                self.path(f"reports/attack_baseline_{split}.json"), report.payload()
            )

    def _adv_split(self, split: str) -> Optional[Dataset]:
        p = self.path(f"adv_{split}.tsv")
        if not p.exists():
            return None
        ds = textcore.load_tsv(p, self._schema_kind(), self._class_names())
        return ds if len(ds) else None

    def _eval_report(
        self,
        name: str,
        fn: ClassifierFn,
        config: dict,
    ) -> EvalReport:
        t0 = time.perf_counter()
        test = self.load_split("test")
        metrics = evaluate(fn, test, workers=self.workers)
        adv = self._adv_split("test")
        adv_acc = adv_f1 = None
        if adv is not None:
            adv_metrics = evaluate(fn, adv, workers=self.workers)
            adv_acc, adv_f1 = adv_metrics.accuracy, adv_metrics.macro_f1
        return EvalReport(
            model_name=name,
            dataset_name="test",
            accuracy=metrics.accuracy,
            macro_f1=metrics.macro_f1,
            adv_accuracy=adv_acc,
            adv_macro_f1=adv_f1,
            per_class=metrics.per_class,
            config_snapshot=config,
            seed=self.seed,
            wall_time=time.perf_counter() - t0,
        )

    def stage_defenses(self) -> None:
        base = self._baseline()
        engine = self.engine(base)
        report = self._eval_report("baseline", base.forward, {"type": "none"})
        _write_json(self.path("reports/eval_baseline.json"), report.payload())
        self.timings["eval_baseline"] = report.wall_time

        for i, defense in enumerate(self.manifest.get("defenses", [])):
            name = defense["name"]
            defense = json.loads(json.dumps(defense))  # private copy
            if defense["type"] == "fact":
                sub_seed = derive_seed(self.seed, 5, i)
                sw = SwitchParams(**{**defense["switch"], "seed": sub_seed})
                tp = TrainParams(
                    **{**defense.get("train", {}), "seed": derive_seed(self.seed, 6, i)}
                )
                start = base if defense.get("from_baseline", True) else ToyClassifier.init(
                    engine.store,
                    base.num_classes,
                    hidden_dim=base.h,
                    is_pair=base.is_pair,
                    seed=derive_seed(self.seed, 7, i),
                )
                hardened, _ = fact.fact_train(
                    start, self.load_split("train"), fact.FactParams(sw, tp), engine
                )
                save_checkpoint(hardened, self.path(f"{name}.fbtc"))
                fn: ClassifierFn = hardened.forward
                snapshot = dict(defense, seed=sub_seed)
            else:
                defense = self._seeded_defense(defense, i)
                fn = make_defense_fn(base, engine, defense)
                snapshot = defense
            report = self._eval_report(name, fn, snapshot)
            _write_json(self.path(f"reports/eval_{name}.json"), report.payload())
            self.timings[f"eval_{name}"] = report.wall_time

    def _seeded_defense(self, defense: dict, index: int) -> dict:
        defense = json.loads(json.dumps(defense))
        sub_seed = derive_seed(self.seed, 8, index)
        if defense["type"] == "five":
            defense["params"] = {**defense.get("params", {}), "seed": sub_seed}
        elif defense["type"] == "fuse":
            defense["switch"] = {**defense.get("switch", {}), "seed": sub_seed}
        return defense

    def stage_search(self) -> None:
        cfg = self.manifest.get("search")
        if cfg is None:
            return
        base = self._baseline()
        engine = self.engine(base)
        val = self.load_split("validation")
        adv_path = self.path("adv_validation.tsv")
        if not adv_path.exists():
            raise MissingArtifactError(
                "missing artifact 'adv_validation.tsv' (search objectives are "
                "computed on the validation split; run the attack stage first)"
            )
        adv_val = textcore.load_tsv(adv_path, self._schema_kind(), self._class_names())
        baseline_val_acc = evaluate(base.forward, val, workers=self.workers).accuracy

        space = parse_search_space(cfg)
        defense_type = cfg["defense"]
        objective_cfg = space.objective
        defense_seed = derive_seed(self.seed, 10)

        def trial_fn(config: dict) -> float:
            defense = _search_config_to_defense(defense_type, config, cfg, defense_seed)
            fn = make_defense_fn(base, engine, defense)
            orig_acc = evaluate(fn, val, workers=self.workers).accuracy
            adv_acc = (
                evaluate(fn, adv_val, workers=self.workers).accuracy
                if len(adv_val)
                else 0.0
            )
            if objective_cfg["kind"] == "weighted_sum":
                w = float(objective_cfg.get("weight", 0.5))
                return w * orig_acc + (1 - w) * adv_acc
            min_drop = objective_cfg.get("min_orig_drop")
            if min_drop is not None and orig_acc < baseline_val_acc - float(min_drop):
                return float("-inf")
            return adv_acc

        result = random_search(space, trial_fn, seed=derive_seed(self.seed, 9))
        _write_json(
            self.path(f"search_{defense_type}.json"),
            {"defense": defense_type, **result.payload()},
        )
        if result.best_config is not None:
            defense = _search_config_to_defense(
                defense_type, result.best_config, cfg, defense_seed
            )
            fn = make_defense_fn(base, engine, defense)
            report = self._eval_report(f"searched_{defense_type}", fn, defense)
            _write_json(
                self.path(f"reports/eval_searched_{defense_type}.json"),
                report.payload(),
            )

    def stage_report(self) -> None:
        reports_dir = self.require("reports")
        rows = []
        merged: dict[str, dict] = {}
        order = ["eval_baseline.json"]
        order += sorted(
            p.name
            for p in reports_dir.glob("eval_*.json")
            if p.name != "eval_baseline.json"
        )
        for name in order:
            p = reports_dir / name
            if not p.exists():
                raise MissingArtifactError(f"missing artifact reports/{name}")
            payload = json.loads(p.read_text(encoding="utf-8"))
            merged[payload["model_name"]] = payload
            rows.append(payload)
        attack_reports = {}
        for p in sorted(reports_dir.glob("attack_baseline_*.json")):
            attack_reports[p.stem.replace("attack_baseline_", "")] = json.loads(
                p.read_text(encoding="utf-8")
            )
        bundle = {
            "name": self.manifest.get("name", "experiment"),
            "seed": self.seed,
            "models": merged,
            "attacks": attack_reports,
        }
        _write_json(self.path("report.json"), bundle)
        self.path("tables.txt").write_text(
            format_results_table(rows), encoding="utf-8"
        )
        csv_lines = ["model,accuracy,macro_f1,adv_accuracy,adv_macro_f1"]
        for r in rows:
            csv_lines.append(
                ",".join(
                    [r["model_name"]]
                    + [
                        "" if r.get(k) is None else repr(float(r[k]))
                        for k in ("accuracy", "macro_f1", "adv_accuracy", "adv_macro_f1")
                    ]
                )
            )
        self.path("report.csv").write_text(
            "\n".join(csv_lines) + "\n", encoding="utf-8"
        )


def parse_search_space(cfg: dict) -> SearchSpace:
    specs: dict[str, ParamSpec] = {}
    for name, raw in cfg["space"].items():
        if "int_range" in raw:
            lo, hi = raw["int_range"]
            specs[name] = IntRange(int(lo), int(hi))
        elif "log_range" in raw:
            lo, hi = raw["log_range"]
            specs[name] = LogRange(float(lo), float(hi))
        elif "choice" in raw:
            specs[name] = Choice(tuple(raw["choice"]))
        else:
            raise ValueError(f"search space entry {name!r} needs int_range, "
                             "log_range, or choice")
    return SearchSpace(
        params=specs,
        time_budget_seconds=float(cfg["time_budget_seconds"]),
        objective=cfg.get("objective", {"kind": "adv_accuracy", "min_orig_drop": 0.05}),
        max_trials=cfg.get("max_trials"),
    )


def _search_config_to_defense(
    defense_type: str, config: dict, cfg: dict, seed: int = 0
) -> dict:
    """Merge a sampled config into a defense dict for make_defense_fn."""
    config = dict(config)
    if defense_type == "five":
        params = {"seed": seed, **cfg.get("base_params", {})}
        params.update(config)
        return {"name": "searched_five", "type": "five", "params": params}
    if defense_type == "fuse":
        sw = {"seed": seed, **cfg.get("base_switch", {})}
        vote = config.pop("vote_mode", cfg.get("vote_mode", "logit_average"))
        sw.update(config)
        return {"name": "searched_fuse", "type": "fuse", "switch": sw, "vote_mode": vote}
    raise ValueError(f"search supports five/fuse defenses, got {defense_type!r}")


def run_experiment(
    manifest: dict | str | Path,
    output_dir: Optional[str | Path] = None,
    workers: Optional[int] = None,
    seed: Optional[int] = None,
) -> dict:
    """Execute a manifest end to end; returns a small summary dict."""
    if not isinstance(manifest, dict):
        manifest = load_manifest(manifest)
    runner = ExperimentRunner(manifest, output_dir=output_dir, workers=workers, seed=seed)
    return runner.run()
