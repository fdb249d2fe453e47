"""Command-line entry point.

Commands: ``build-lexicon``, ``synth``, ``train``, ``eval``, ``cv``,
``ablate``, ``predict``, ``gradcheck``.  Runs are driven by a YAML
config (strictly validated: unknown keys are rejected) with flag
overrides; every command writes its outputs into the run directory
together with a manifest of file hashes, and training-style commands
echo the effective configuration for provenance.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .data import (
    Dataset,
    SynthSpec,
    dataset_stats,
    generate_synthetic,
    generate_synthetic_vectors,
    load_dataset,
    save_dataset,
)
from .embedding import EmbeddingTable, load_embedding_table
from .encoder import EncoderConfig
from .harness import (
    evaluate,
    format_metrics_table,
    run_ablation,
    run_cv,
    stratified_kfold,
    write_ablation_csv,
)
from .lexicon import (
    DictionaryConfig,
    build_dictionary,
    build_trie,
    export_dictionary,
    read_phrase_file,
)
from .pipeline import (
    TrainConfig,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
    save_history,
    train,
)

__all__ = ["main", "RunConfig", "ConfigError"]


class ConfigError(ValueError):
    """Raised for invalid or unknown run-configuration values."""


def _take(mapping: dict, allowed: set, where: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


@dataclass
class RunConfig:
    """Declarative description of one experiment run."""

    dataset_path: str | None = None
    dataset_format: str = "jsonl"
    lexicon_path: str | None = None
    embeddings_path: str | None = None
    output_dir: str = "lexfuse-out"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    dev_fraction: float = 0.2
    cv_folds: int = 5

    @classmethod
    def from_dict(cls, raw: dict, base: Path | None = None) -> "RunConfig":
        _take(
            raw,
            {
                "dataset", "lexicon", "embeddings", "output_dir",
                "encoder", "training", "dev_fraction", "cv_folds",
            },
            "config",
        )
        kwargs: dict = {}
        ds = raw.get("dataset")
        if ds is not None:
            if not isinstance(ds, dict):
                raise ConfigError("dataset must be a mapping with 'path' and optional 'format'")
            _take(ds, {"path", "format"}, "dataset")
            kwargs["dataset_path"] = ds.get("path")
            kwargs["dataset_format"] = ds.get("format", "jsonl")
            if kwargs["dataset_format"] not in ("jsonl", "csv"):
                raise ConfigError(f"dataset.format must be jsonl or csv, got {kwargs['dataset_format']!r}")
        kwargs["lexicon_path"] = raw.get("lexicon")
        kwargs["embeddings_path"] = raw.get("embeddings")
        if "output_dir" in raw:
            kwargs["output_dir"] = raw["output_dir"]
        try:
            enc = dict(raw.get("encoder", {}))
            _take(
                enc,
                {"d_model", "n_heads", "d_ff", "n_layers", "fusion_layer", "dropout_rate"},
                "encoder",
            )
            kwargs["encoder"] = EncoderConfig(**enc)
            tr = dict(raw.get("training", {}))
            _take(
                tr,
                {
                    "learning_rate", "batch_size", "epochs", "dropout_rate", "gamma",
                    "h_max", "fusion_layer", "seed", "loss_kind", "enable_keywords",
                    "enable_synonyms", "keyword_scope", "max_len", "min_freq",
                },
                "training",
            )
            kwargs["training"] = TrainConfig(**tr)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        if "dev_fraction" in raw:
            kwargs["dev_fraction"] = float(raw["dev_fraction"])
            if not (0.0 <= kwargs["dev_fraction"] < 1.0):
                raise ConfigError(f"dev_fraction must be in [0, 1), got {kwargs['dev_fraction']}")
        if "cv_folds" in raw:
            kwargs["cv_folds"] = int(raw["cv_folds"])
            if kwargs["cv_folds"] < 2:
                raise ConfigError(f"cv_folds must be >= 2, got {kwargs['cv_folds']}")
        cfg = cls(**kwargs)
        if base is not None:
            for attr in ("dataset_path", "lexicon_path", "embeddings_path"):
                value = getattr(cfg, attr)
                if value is not None and not Path(value).is_absolute():
                    setattr(cfg, attr, str(base / value))
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML ({e})") from e
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        return cls.from_dict(raw, base=path.parent)

    def validate_paths(self, need_dataset: bool = True) -> None:
        if need_dataset:
            if self.dataset_path is None:
                raise ConfigError("config has no dataset.path")
            if not Path(self.dataset_path).exists():
                raise ConfigError(f"dataset path does not exist: {self.dataset_path}")
        for label, p in (("lexicon", self.lexicon_path), ("embeddings", self.embeddings_path)):
            if p is not None and not Path(p).exists():
                raise ConfigError(f"{label} path does not exist: {p}")

    def as_dict(self) -> dict:
        return {
            "dataset": {"path": self.dataset_path, "format": self.dataset_format},
            "lexicon": self.lexicon_path,
            "embeddings": self.embeddings_path,
            "output_dir": self.output_dir,
            "encoder": asdict(self.encoder),
            "training": asdict(self.training),
            "dev_fraction": self.dev_fraction,
            "cv_folds": self.cv_folds,
        }


class _RunDir:
    """Output directory that records a sha256 manifest of written files."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.files: dict = {}

    def register(self, name: str) -> Path:
        self.files[name] = None
        return self.path / name

    def finalize(self) -> None:
        manifest = {}
        for name in sorted(self.files):
            digest = hashlib.sha256((self.path / name).read_bytes()).hexdigest()
            manifest[name] = digest
        (self.path / "manifest.json").write_text(
            json.dumps({"files": manifest}, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


def _echo_config(cfg: RunConfig, rundir: _RunDir) -> None:
    path = rundir.register("effective_config.yaml")
    path.write_text(yaml.safe_dump(cfg.as_dict(), sort_keys=True), encoding="utf-8")


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    tr = cfg.training
    if getattr(args, "seed", None) is not None:
        tr = replace(tr, seed=args.seed)
    if getattr(args, "loss", None) is not None:
        tr = replace(tr, loss_kind=args.loss)
    if getattr(args, "epochs", None) is not None:
        tr = replace(tr, epochs=args.epochs)
    if getattr(args, "no_keywords", False):
        tr = replace(tr, enable_keywords=False)
    if getattr(args, "no_synonyms", False):
        tr = replace(tr, enable_synonyms=False)
    cfg.training = tr
    if getattr(args, "out_dir", None) is not None:
        cfg.output_dir = args.out_dir
    return cfg


def _load_assets(cfg: RunConfig):
    trie = None
    if cfg.lexicon_path:
        words = build_dictionary(read_phrase_file(cfg.lexicon_path))
        trie = build_trie(words)
    table: EmbeddingTable | None = None
    if cfg.embeddings_path:
        table = load_embedding_table(cfg.embeddings_path)
    return trie, table


def _stratified_dev_split(dataset: Dataset, fraction: float, seed: int):
    if fraction <= 0.0:
        return dataset, None
    labels = dataset.labels()
    rng = np.random.default_rng(seed)
    dev_idx: list = []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        n_dev = int(round(fraction * len(idx)))
        if len(idx) > 1:
            n_dev = min(max(n_dev, 1), len(idx) - 1)
        else:
            n_dev = 0
        dev_idx.extend(idx[:n_dev])
    dev_idx = sorted(dev_idx)
    train_idx = sorted(set(range(len(dataset))) - set(dev_idx))
    return dataset.subset(train_idx, dataset.name + "-train"), (
        dataset.subset(dev_idx, dataset.name + "-dev") if dev_idx else None
    )


# -- commands ------------------------------------------------------------


def cmd_build_lexicon(args) -> int:
    path = Path(args.phrases)
    if not path.exists():
        print(f"error: phrase file not found: {path}", file=sys.stderr)
        return 2
    cfg = DictionaryConfig(min_word_length=args.min_word_length, strip_digits=not args.keep_digits)
    words = build_dictionary(read_phrase_file(path), cfg)
    if not words:
        print("warning: dictionary is empty", file=sys.stderr)
    export_dictionary(words, args.out)
    print(f"{len(words)} words")
    return 0


def cmd_synth(args) -> int:
    spec = SynthSpec(
        n_pos=args.n_pos,
        n_neg=args.n_neg,
        vocab_size=args.vocab_size,
        keyword_signal=args.keyword_signal,
        seed=args.seed if args.seed is not None else 0,
    )
    dataset, lexicon = generate_synthetic(spec)
    rundir = _RunDir(args.out_dir or "lexfuse-out")
    save_dataset(dataset, rundir.register("dataset.jsonl"))
    export_dictionary(lexicon, rundir.register("lexicon.txt"))
    if args.vectors:
        table = generate_synthetic_vectors(lexicon, dim=args.dim, seed=spec.seed)
        table.save(rundir.register("vectors.txt"))
    rundir.finalize()
    stats = dataset_stats(dataset)
    print(f"wrote {len(dataset)} examples to {rundir.path} "
          f"(positive {stats.positive}, negative {stats.negative}, ratio {stats.ratio})")
    return 0


def cmd_train(args) -> int:
    cfg = _apply_overrides(RunConfig.from_file(args.config), args)
    cfg.validate_paths()
    rundir = _RunDir(cfg.output_dir)
    _echo_config(cfg, rundir)
    dataset = load_dataset(cfg.dataset_path, cfg.dataset_format)
    trie, table = _load_assets(cfg)
    train_ds, dev_ds = _stratified_dev_split(dataset, cfg.dev_fraction, cfg.training.seed)
    result = train(cfg.training, cfg.encoder, train_ds, dev_ds, trie=trie, table=table)
    save_checkpoint(result.model, rundir.register("checkpoint.bin"))
    save_history(result.history, rundir.register("history.jsonl"))
    rundir.finalize()
    last = result.history[-1]
    print(f"trained {cfg.training.epochs} epochs; final train_loss={last['train_loss']:.4f} "
          f"dev_f1={last['dev_f1']:.4f}")
    print(f"outputs in {rundir.path}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset, args.format)
    if len(dataset) == 0:
        print("error: evaluation dataset is empty", file=sys.stderr)
        return 2
    metrics = evaluate(model, dataset)
    rundir = _RunDir(args.out_dir or "lexfuse-out")
    rundir.register("metrics.json").write_text(
        json.dumps(metrics.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    table = format_metrics_table(
        [metrics.as_dict()], ["tp", "fp", "fn", "tn", "precision", "recall", "f1"]
    )
    rundir.register("metrics.txt").write_text(table + "\n", encoding="utf-8")
    rundir.finalize()
    print(table)
    return 0


def cmd_cv(args) -> int:
    cfg = _apply_overrides(RunConfig.from_file(args.config), args)
    cfg.validate_paths()
    rundir = _RunDir(cfg.output_dir)
    _echo_config(cfg, rundir)
    dataset = load_dataset(cfg.dataset_path, cfg.dataset_format)
    trie, table = _load_assets(cfg)
    result = run_cv(
        cfg.training, cfg.encoder, dataset, cfg.cv_folds,
        trie=trie, table=table, jobs=args.jobs,
    )
    rundir.register("cv_metrics.json").write_text(
        json.dumps(result.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    rows = [dict(fold=i, **m.as_dict()) for i, m in enumerate(result.fold_metrics)]
    rows.append(
        dict(fold="mean", tp="-", fp="-", fn="-", tn="-",
             precision=result.mean_precision, recall=result.mean_recall, f1=result.mean_f1)
    )
    table_txt = format_metrics_table(rows, ["fold", "precision", "recall", "f1"])
    rundir.register("cv_metrics.txt").write_text(table_txt + "\n", encoding="utf-8")
    rundir.finalize()
    print(table_txt)
    return 0


def cmd_ablate(args) -> int:
    cfg = _apply_overrides(RunConfig.from_file(args.config), args)
    cfg.validate_paths()
    rundir = _RunDir(cfg.output_dir)
    _echo_config(cfg, rundir)
    dataset = load_dataset(cfg.dataset_path, cfg.dataset_format)
    trie, table = _load_assets(cfg)
    rows = run_ablation(
        cfg.training, cfg.encoder, dataset, cfg.cv_folds,
        trie=trie, table=table, jobs=args.jobs,
    )
    write_ablation_csv(rows, rundir.register("ablation.csv"))
    rundir.register("ablation.json").write_text(
        json.dumps([r.as_dict() for r in rows], indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    table_txt = format_metrics_table(
        [r.as_dict() for r in rows], ["variant", "precision", "recall", "f1", "delta_f1"]
    )
    rundir.register("ablation.txt").write_text(table_txt + "\n", encoding="utf-8")
    rundir.finalize()
    print(table_txt)
    return 0


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    result = model.predict(args.text)
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    kinds = ("focal", "cross_entropy") if args.loss == "both" else (args.loss,)
    ok = True
    for kind in kinds:
        report = gradient_check(
            loss_kind=kind,
            gamma=2.0 if kind == "focal" else 0.0,
            tolerance=args.tolerance,
            eps_fd=args.eps,
            inject_fault=args.inject_fault,
        )
        print(report.format())
        ok = ok and report.passed
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lexfuse",
        description="Lexicon-fused transformer for ADR text classification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-lexicon", help="compile a phrase file into a domain dictionary")
    p.add_argument("phrases", help="UTF-8 phrase file, one phrase per line")
    p.add_argument("out", help="output path for the sorted one-word-per-line dictionary")
    p.add_argument("--min-word-length", type=int, default=3)
    p.add_argument("--keep-digits", action="store_true", help="keep tokens containing digits")
    p.set_defaults(func=cmd_build_lexicon)

    p = sub.add_parser("synth", help="generate a synthetic dataset, lexicon, and word vectors")
    p.add_argument("--n-pos", type=int, default=8)
    p.add_argument("--n-neg", type=int, default=64)
    p.add_argument("--vocab-size", type=int, default=30)
    p.add_argument("--keyword-signal", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--vectors", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--dim", type=int, default=12, help="word-vector dimension")
    p.set_defaults(func=cmd_synth)

    def training_flags(p):
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default=None)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--loss", choices=["focal", "cross_entropy"], default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--no-keywords", action="store_true")
        p.add_argument("--no-synonyms", action="store_true")

    p = sub.add_parser("train", help="train a model from a run config")
    training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="stratified cross-validation")
    training_flags(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("ablate", help="run the six-variant ablation grid")
    training_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--format", choices=["jsonl", "csv"], default="jsonl")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one raw text")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    p.add_argument("--loss", choices=["both", "focal", "cross_entropy"], default="both")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--inject-fault", default=None, help="corrupt this tensor's gradient (self-test)")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # surface runtime failures with a clean message
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
