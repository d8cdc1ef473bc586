"""
rsa-rank command line
Train, evaluate and inspect listwise rankers with (regularized) self-attention.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

import argparse
import io
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from dotenv import load_dotenv

from attention_export import export_attention
from checkpoint import CheckpointError, load_checkpoint_with_extras, save_checkpoint
from config import (
    NORMALIZATIONS,
    VARIANT_NAMES,
    ConfigError,
    RunConfig,
    build_config,
    dump_config,
    env_log_level,
)
from file_lock import atomic_write_text
from letor_data import (
    Dataset,
    align_feature_dims,
    dataset_stats,
    format_stats_table,
    normalize_query_minmax,
    read_letor_files,
    serialize_letor,
)
from metrics import SELECTION_METRIC, MetricReport, compare_systems, evaluate, read_per_query, significance_table
from model import RsaModel, init_params, score_group
from run_history import RunHistory
from synthetic import synthetic_splits
from trainer import train, write_history

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "model.ckpt"
HISTORY_FILE = "history.tsv"
METRICS_FILE = "metrics.tsv"
PER_QUERY_FILE = "per_query.tsv"
PREDICTIONS_FILE = "predictions.tsv"
SPLIT_FILES = {"train": "train.txt", "valid": "vali.txt", "test": "test.txt"}

# Flags that map one-to-one onto RunConfig keys
CONFIG_FLAGS = (
    "train", "valid", "test", "model", "out", "variant", "encoders", "hidden",
    "attention_weight", "seed", "learning_rate", "optimizer", "batch_size",
    "max_epochs", "patience", "workers", "progress", "normalize", "k_max",
    "train_queries", "valid_queries", "test_queries", "docs_per_query", "num_features",
)


def _out_dir(config: RunConfig, default: str = ".") -> Path:
    path = Path(config.out or default)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _prepare(datasets: Sequence[Dataset], normalize: str, k: int) -> List[Dataset]:
    prepared = [ds.with_k_max(max(k, ds.k_max)) for ds in datasets]
    if normalize == "query-minmax":
        prepared = [normalize_query_minmax(ds) for ds in prepared]
    return prepared


def load_splits(config: RunConfig, names: Sequence[str]) -> Dict[str, Dataset]:
    """Parse the named split files concurrently and pad them to one feature dimension."""
    paths = [getattr(config, name) for name in names]
    datasets = align_feature_dims(read_letor_files(paths, k_max_floor=config.k_max_floor))
    return dict(zip(names, datasets))


def _load_for_model(config: RunConfig) -> Tuple[RsaModel, Dict, Dataset]:
    """Checkpoint plus the --test dataset prepared the way the model was trained."""
    model, extras = load_checkpoint_with_extras(config.model)
    (dataset,) = read_letor_files([config.test], k_max_floor=config.k_max_floor)
    d = model.config.d
    if dataset.feature_dim > d:
        raise CheckpointError(f"dataset has {dataset.feature_dim} features but the checkpoint expects {d}")
    dataset = dataset.with_feature_dim(d)
    normalize = extras.get("normalize", config.normalize)
    if normalize != config.normalize:
        logger.info(f"Using the checkpoint's normalization {normalize!r}")
    (dataset,) = _prepare([dataset], normalize, int(extras.get("k_max", dataset.k_max)))
    return model, extras, dataset


def _write_report(report: MetricReport, out_dir: Path, system: str) -> None:
    atomic_write_text(out_dir / METRICS_FILE, report.format_table(system))
    atomic_write_text(out_dir / PER_QUERY_FILE, report.format_per_query())


def cmd_train(config: RunConfig, args: argparse.Namespace) -> int:
    started_at = datetime.now().isoformat()
    names = ["train", "valid"] + (["test"] if config.test else [])
    splits = load_splits(config, names)
    k = max(ds.k_max for ds in splits.values())
    splits = dict(zip(names, _prepare([splits[n] for n in names], config.normalize, k)))

    model = init_params(config.to_model_config(splits["train"].feature_dim))
    best, history = train(model, splits["train"], splits["valid"], config.to_train_config(),
                          k=k, show_progress=config.progress)

    out_dir = _out_dir(config)
    save_checkpoint(best, out_dir / CHECKPOINT_FILE, extras={"normalize": config.normalize, "k_max": k})
    write_history(history, out_dir / HISTORY_FILE)
    artifacts = {"checkpoint": CHECKPOINT_FILE, "history": HISTORY_FILE}
    if "test" in splits:
        report = evaluate(best, splits["test"])
        _write_report(report, out_dir, config.model_variant)
        artifacts.update({"metrics": METRICS_FILE, "per_query": PER_QUERY_FILE})
        print(report.format_table(config.model_variant), end="")
    RunHistory(out_dir.parent).save_run(out_dir, config.to_dict(), history, started_at, artifacts)

    print(f"best_epoch\t{history.best_epoch}")
    print(f"valid_{SELECTION_METRIC}\t{history.best_valid_ndcg10!r}")
    return 0


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> int:
    model, _, dataset = _load_for_model(config)
    report = evaluate(model, dataset)
    _write_report(report, _out_dir(config), model.config.variant)
    print(report.format_table(model.config.variant), end="")
    print(f"{SELECTION_METRIC}\t{report.mean(SELECTION_METRIC)!r}")
    return 0


def cmd_predict(config: RunConfig, args: argparse.Namespace) -> int:
    model, _, dataset = _load_for_model(config)
    lines = ["qid\tdoc_index\tscore"]
    for group in dataset.groups:
        for i, score in enumerate(score_group(model, group)):
            lines.append(f"{group.qid}\t{i}\t{float(score)!r}")
    path = atomic_write_text(_out_dir(config) / PREDICTIONS_FILE, "\n".join(lines) + "\n")
    logger.info(f"Wrote {len(lines) - 1} predictions to {path}")
    return 0


def cmd_attention(config: RunConfig, args: argparse.Namespace) -> int:
    if not args.qid:
        raise ConfigError("attention requires --qid")
    model, extras, dataset = _load_for_model(config)
    group = dataset.group(args.qid)
    k = int(extras.get("k_max", dataset.k_max))
    exports = export_attention(model, group, k, _out_dir(config) / "attention")
    for e in exports:
        print(f"{e.kind}\t{e.mean_bce!r}")
    return 0


def cmd_significance(config: RunConfig, args: argparse.Namespace) -> int:
    if not (args.a and args.b):
        raise ConfigError("significance requires --a and --b per-query files")
    table = significance_table(read_per_query(args.a), read_per_query(args.b))
    if config.out:
        atomic_write_text(_out_dir(config) / "significance.tsv", table)
    print(table, end="")
    return 0


def _parse_systems(specs: Sequence[str]) -> Dict[str, str]:
    systems: Dict[str, str] = {}
    for entry in specs:
        name, sep, path = entry.partition("=")
        if not sep or not name or not path:
            raise ConfigError(f"--system expects NAME=PATH, got {entry!r}")
        systems[name] = path
    return systems


def cmd_compare(config: RunConfig, args: argparse.Namespace) -> int:
    systems = _parse_systems(args.system or [])
    if len(systems) < 2:
        raise ConfigError("compare needs at least two --system NAME=PATH entries")
    reference = args.reference or next(iter(systems))
    if reference not in systems:
        raise ConfigError(f"--reference {reference!r} is not one of the given systems")
    table = compare_systems({name: read_per_query(path) for name, path in systems.items()}, reference)
    if config.out:
        atomic_write_text(_out_dir(config) / "comparison.tsv", table)
    print(table, end="")
    return 0


def cmd_synth(config: RunConfig, args: argparse.Namespace) -> int:
    splits = synthetic_splits(config.seed, config.train_queries, config.valid_queries,
                              config.test_queries, config.docs_per_query, config.num_features)
    out_dir = _out_dir(config)
    for name, dataset in zip(SPLIT_FILES, splits):
        buffer = io.StringIO()
        serialize_letor(dataset, buffer)
        path = atomic_write_text(out_dir / SPLIT_FILES[name], buffer.getvalue())
        logger.info(f"Wrote {len(dataset)} synthetic queries to {path}")
    return 0


def cmd_stats(config: RunConfig, args: argparse.Namespace) -> int:
    names = [n for n in ("train", "valid", "test") if getattr(config, n)]
    if not names:
        raise ConfigError("stats requires at least one of --train, --valid, --test")
    datasets = read_letor_files([getattr(config, n) for n in names], k_max_floor=config.k_max_floor)
    print(format_stats_table({n: dataset_stats(ds) for n, ds in zip(names, datasets)}), end="")
    return 0


def cmd_runs(config: RunConfig, args: argparse.Namespace) -> int:
    print(RunHistory(config.out or "runs").format_runs(), end="")
    return 0


def cmd_config_dump(config: RunConfig, args: argparse.Namespace) -> int:
    print(dump_config(config), end="")
    return 0


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace], int]] = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "attention": cmd_attention,
    "significance": cmd_significance,
    "compare": cmd_compare,
    "synth": cmd_synth,
    "stats": cmd_stats,
    "runs": cmd_runs,
    "config-dump": cmd_config_dump,
}


def _add_common(parser: argparse.ArgumentParser) -> None:
    # Defaults stay None so unset flags never override the config file
    paths = parser.add_argument_group("paths")
    for name in ("train", "valid", "test"):
        paths.add_argument(f"--{name}", metavar="PATH", help=f"LETOR file of the {name} split")
    paths.add_argument("--model", metavar="PATH", help="checkpoint file")
    paths.add_argument("--out", metavar="DIR", help="output directory")
    paths.add_argument("--config", metavar="PATH", help="flat YAML configuration file")

    model = parser.add_argument_group("model")
    model.add_argument("--variant", choices=sorted(VARIANT_NAMES))
    model.add_argument("--encoders", metavar="KINDS", help="subset of the encoder kinds + > - <, e.g. '+<'")
    model.add_argument("--hidden", type=int, metavar="D_H")
    model.add_argument("--attention-weight", dest="attention_weight", type=float)
    model.add_argument("--seed", type=int)

    training = parser.add_argument_group("training")
    training.add_argument("--learning-rate", dest="learning_rate", type=float)
    training.add_argument("--optimizer", choices=("adam", "sgd"))
    training.add_argument("--batch-size", dest="batch_size", type=int)
    training.add_argument("--max-epochs", dest="max_epochs", type=int)
    training.add_argument("--patience", type=int)
    training.add_argument("--workers", type=int)
    training.add_argument("--progress", action="store_const", const=True, default=None)

    data = parser.add_argument_group("data")
    data.add_argument("--normalize", choices=NORMALIZATIONS)
    data.add_argument("--k-max", dest="k_max", type=int, help="minimum grade scale; 0 takes it from the data")
    data.add_argument("--train-queries", dest="train_queries", type=int)
    data.add_argument("--valid-queries", dest="valid_queries", type=int)
    data.add_argument("--test-queries", dest="test_queries", type=int)
    data.add_argument("--docs-per-query", dest="docs_per_query", type=int)
    data.add_argument("--num-features", dest="num_features", type=int)

    parser.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING or ERROR")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsa_rank", description=__doc__.strip().splitlines()[1])
    subparsers = parser.add_subparsers(dest="command", required=True)
    help_text = {
        "train": "train a model and keep the best validation checkpoint",
        "eval": "ERR/NDCG at 1, 3, 5, 10 of a checkpoint on --test",
        "predict": "per-document scores of a checkpoint on --test",
        "attention": "export learned and ideal attention matrices for one query",
        "significance": "paired t-tests between two per-query metric files",
        "compare": "results table of several systems with significance markers",
        "synth": "write seeded synthetic train/valid/test files",
        "stats": "dataset characteristics table",
        "runs": "list recorded training runs, newest first",
        "config-dump": "print the merged configuration as YAML",
    }
    for name, text in help_text.items():
        sub = subparsers.add_parser(name, help=text, description=text)
        _add_common(sub)
        if name == "attention":
            sub.add_argument("--qid", help="query to export")
        elif name == "significance":
            sub.add_argument("--a", metavar="PATH", help="per-query metrics of system a")
            sub.add_argument("--b", metavar="PATH", help="per-query metrics of system b")
        elif name == "compare":
            sub.add_argument("--system", action="append", metavar="NAME=PATH",
                             help="per-query metrics of one system (repeatable)")
            sub.add_argument("--reference", metavar="NAME", help="system the others are tested against")
    return parser


def _setup_logging(level_name: Optional[str]) -> None:
    level_name = (level_name or env_log_level()).upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        raise ConfigError(f"unknown log level {level_name!r}")
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        _setup_logging(args.log_level)
        overrides = {key: getattr(args, key) for key in CONFIG_FLAGS}
        config = build_config(args.command, overrides, args.config)
        config.validate_for(args.command)
        return COMMANDS[args.command](config, args)
    except ConfigError as e:
        print(f"rsa_rank {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError, KeyError, MemoryError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"rsa_rank {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
