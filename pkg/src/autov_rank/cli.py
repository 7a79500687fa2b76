"""Command line front end for the full pipeline.

One executable, six subcommands:

    gen     write a synthetic train/test dataset
    filter  drop low-variance and outlier groups
    pairs   rank groups and expand preference pairs
    train   fit the scoring head on a pairs file
    rank    batch retrieval over a dataset with a checkpoint
    bench   selection-strategy comparison and pool-size sweep

Configuration is layered: dataclass defaults, then an INI config file
(one section per module), then command line flags. Flags are generated
from the config dataclasses, so `--help` lists every key with the
default that the code actually uses. Every subcommand is a pure
function of its inputs, the effective config, and the seed; output
files never embed wall-clock time, so reruns are byte-identical.

Outputs land under `--out` with fixed names (train.jsonl, kept.jsonl,
pairs.jsonl, checkpoint/, results.tsv, strategy_table.tsv, ...). The
env var AUTOV_RANK_LOG sets log verbosity (debug/info/warning/error);
reports go to stdout regardless.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from .core import Rng
from .errors import AutovRankError, EmptyGroupError, MissingBlobError, UsageError
from .evalbench.bench import (
    TRAINED_STRATEGIES,
    comparison_records,
    format_sweep_table,
    pool_size_sweep,
    run_strategy_comparison,
)
from .evalbench.synthetic import SyntheticConfig, generate_synthetic
from .interaction import save_interaction_weights, seed_interaction_weights
from .pipeline import (
    FilterConfig,
    expand_pairs,
    filter_groups,
    load_dataset,
    load_pairs,
    rank_group,
    save_dataset,
    save_pairs,
)
from .retrieval import RetrievalConfig, batch_retrieve
from .training import TrainConfig, save_checkpoint, train

log = logging.getLogger("autov_rank.cli")


@dataclass
class InteractionSeedConfig:
    """Shape of the frozen interaction layer seeded before training."""

    heads: int = 8
    d_ff: int = 0   # 0 derives 4 * d_model once the dataset width is known


CONFIG_SECTIONS = {
    "synthetic": SyntheticConfig,
    "filter": FilterConfig,
    "train": TrainConfig,
    "retrieval": RetrievalConfig,
    "interaction": InteractionSeedConfig,
}

# Which config sections each subcommand consumes. A shared config file
# may carry all sections; the rest are ignored by that subcommand.
SUBCOMMAND_SECTIONS = {
    "gen": ("synthetic",),
    "filter": ("filter",),
    "pairs": (),
    "train": ("train", "interaction"),
    "rank": ("retrieval",),
    "bench": ("synthetic", "train"),
}

_FLAG_NOTES = {
    "d_model": "feature width",
    "h_true": "planted map rank",
    "l_v": "visual tokens per candidate",
    "l_t": "text tokens per query",
    "n": "candidates per group",
    "train_groups": "training groups to generate",
    "test_groups": "heldout groups to generate",
    "noise_std": "per-candidate loss noise scale",
    "group_offset_std": "per-group loss shift scale",
    "slot_shuffle": "shuffle candidate slots",
    "min_loss_std": "drop groups with loss std below this",
    "max_mean_loss_quantile": "drop groups above this mean-loss quantile",
    "learning_rate": "Adam step size",
    "batch_size": "pairs per optimizer step",
    "epochs": "training epochs",
    "beta1": "Adam first-moment decay",
    "beta2": "Adam second-moment decay",
    "eps": "Adam denominator floor",
    "grad_accum_steps": "micro-batches per optimizer step",
    "score_variant": "scoring head output (attended or logits)",
    "prefilter_enabled": "remove the most dissimilar candidate first",
    "prefilter_min_pool": "skip prefilter below this pool size",
    "report_scores": "include per-candidate scores in results",
    "text_mode": "text conditioning (aggregate or per-candidate)",
    "prefilter_features": "prefilter feature space (raw or interacted)",
    "heads": "attention heads in the frozen layer",
    "d_ff": "frozen layer feed-forward width, 0 for 4x d_model",
}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as err:
        raise UsageError(f"not a comma-separated integer list: {text!r}") from err


def _coerce(raw: str, default):
    if isinstance(default, bool):
        return _parse_bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def add_config_flags(parser: argparse.ArgumentParser, section: str) -> None:
    """One flag per dataclass field, help text carrying the code default."""
    cls = CONFIG_SECTIONS[section]
    proto = cls()
    for f in fields(cls):
        if f.name == "seed":
            continue    # owned by the global --seed flag
        default = getattr(proto, f.name)
        if isinstance(default, bool):
            typ, metavar = _parse_bool, "BOOL"
        elif isinstance(default, int):
            typ, metavar = int, "N"
        elif isinstance(default, float):
            typ, metavar = float, "X"
        else:
            typ, metavar = str, "S"
        parser.add_argument(
            "--" + f.name.replace("_", "-"),
            dest=f.name, type=typ, metavar=metavar, default=None,
            help=f"{_FLAG_NOTES[f.name]} (default: {default})",
        )


def load_config_file(path) -> configparser.ConfigParser:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    with path.open(encoding="utf-8") as fh:
        parser.read_file(fh)
    for section in parser.sections():
        if section not in CONFIG_SECTIONS:
            raise UsageError(
                f"unknown config section [{section}]; valid sections: "
                + ", ".join(CONFIG_SECTIONS)
            )
        valid = {f.name for f in fields(CONFIG_SECTIONS[section])}
        for key in parser[section]:
            if key not in valid:
                raise UsageError(
                    f"unknown key {key!r} in [{section}]; valid keys: "
                    + ", ".join(sorted(valid))
                )
    return parser


def build_config(section: str, file_conf, args):
    """Merge defaults, file section, and flags into one config object."""
    cls = CONFIG_SECTIONS[section]
    proto = cls()
    values = {}
    if file_conf is not None and file_conf.has_section(section):
        for key, raw in file_conf.items(section):
            try:
                values[key] = _coerce(raw, getattr(proto, key))
            except ValueError as err:
                raise UsageError(f"[{section}] {key}: {err}") from err
    for f in fields(cls):
        if f.name == "seed":
            if getattr(args, "seed", None) is not None:
                values["seed"] = args.seed
            continue
        flag_value = getattr(args, f.name, None)
        if flag_value is not None:
            values[f.name] = flag_value
    try:
        return cls(**values)
    except ValueError as err:
        raise UsageError(str(err)) from err


def _ensure_out(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, kind: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{kind} {path} does not exist")
    return path


# ------------------------------------------------------------------ commands

def cmd_gen(args, file_conf) -> int:
    cfg = build_config("synthetic", file_conf, args)
    out = _ensure_out(args.out)
    data = generate_synthetic(cfg)
    save_dataset(data.train, out / "train.jsonl")
    save_dataset(data.test, out / "test.jsonl")
    print("# command: gen")
    print(f"# seed: {cfg.seed}")
    print(f"dims: d_model={cfg.d_model} l_v={cfg.l_v} l_t={cfg.l_t} n={cfg.n}")
    print(f"train groups: {len(data.train)} -> {out / 'train.jsonl'}")
    print(f"test groups: {len(data.test)} -> {out / 'test.jsonl'}")
    return 0


def cmd_filter(args, file_conf) -> int:
    cfg = build_config("filter", file_conf, args)
    dataset = _require(args.dataset, "dataset file")
    out = _ensure_out(args.out)
    groups = load_dataset(dataset)
    result = filter_groups(groups, cfg)
    save_dataset(result.kept, out / "kept.jsonl")
    lines = ["group_id\treason"]
    lines += [f"{d.group.group_id}\t{d.reason}" for d in result.dropped]
    (out / "dropped.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("# command: filter")
    print(f"kept: {len(result.kept)} -> {out / 'kept.jsonl'}")
    print(f"dropped: {len(result.dropped)} -> {out / 'dropped.tsv'}")
    print(f"mean loss threshold: {result.mean_loss_threshold:.6f}")
    return 0


def cmd_pairs(args, file_conf) -> int:
    dataset = _require(args.dataset, "dataset file")
    out = _ensure_out(args.out)
    groups = load_dataset(dataset)
    pairs = [p for g in groups for p in expand_pairs(rank_group(g))]
    save_pairs(pairs, out / "pairs.jsonl")
    print("# command: pairs")
    print(f"groups: {len(groups)}")
    print(f"pairs: {len(pairs)} -> {out / 'pairs.jsonl'}")
    return 0


def cmd_train(args, file_conf) -> int:
    cfg = build_config("train", file_conf, args)
    icfg = build_config("interaction", file_conf, args)
    pairs_path = _require(args.pairs, "pairs file")
    dataset = _require(args.dataset, "dataset file")
    out = _ensure_out(args.out)
    groups = load_dataset(dataset)
    if not groups:
        raise EmptyGroupError(f"{dataset}: dataset has no groups")
    pairs = load_pairs(pairs_path)
    d_model = int(groups[0].query.shape[1])
    weights = seed_interaction_weights(
        Rng(cfg.seed).child("interaction"), d_model, icfg.heads, icfg.d_ff or None
    )
    print("# command: train")
    print(f"# seed: {cfg.seed}")
    print(f"pairs: {len(pairs)} over {len(groups)} groups")

    log_rows = []

    def log_fn(line):
        # epoch, loss, accuracy, seconds; the file keeps the first three
        # so reruns produce identical bytes.
        log_rows.append("\t".join(line.split("\t")[:3]))
        log.info("epoch %s", line)

    params, opt_state, report = train(
        pairs, groups, weights, cfg,
        h=args.h, text_mode=args.text_mode, log_fn=log_fn,
    )
    ckpt = out / "checkpoint"
    save_checkpoint(params, opt_state, cfg, ckpt)
    save_interaction_weights(weights, ckpt / "interaction")
    header = ["epoch\tloss\taccuracy"]
    (out / "train_log.tsv").write_text("\n".join(header + log_rows) + "\n",
                                       encoding="utf-8")
    print(f"epochs: {report.epochs_completed}")
    if report.epoch_losses:
        print(f"final loss: {report.epoch_losses[-1]:.6f}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_rank(args, file_conf) -> int:
    cfg = build_config("retrieval", file_conf, args)
    dataset = _require(args.dataset, "dataset file")
    checkpoint = _require(args.checkpoint, "checkpoint directory")
    out = _ensure_out(args.out)
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    summary = batch_retrieve(dataset, checkpoint, cfg, out / "results.tsv",
                             weights_path=args.weights, threads=threads)
    print("# command: rank")
    print(f"groups: {summary.n_groups}")
    print(f"errors: {len(summary.errors)}")
    for slot in sorted(summary.histogram):
        print(f"slot {slot}: {summary.histogram[slot]}")
    print(f"results: {out / 'results.tsv'}")
    return 0


def cmd_bench(args, file_conf) -> int:
    base_cfg = build_config("synthetic", file_conf, args)
    train_cfg = build_config("train", file_conf, args)
    seeds = _parse_int_list(args.seeds)
    out = _ensure_out(args.out)
    print("# command: bench")
    print(f"# seeds: {','.join(str(s) for s in seeds)}")
    report = run_strategy_comparison(
        base_cfg, train_cfg, seeds, h=args.h,
        include_baselines=args.include_baselines,
        log_fn=lambda line: log.info("%s", line),
    )
    names = [n for n in (*TRAINED_STRATEGIES, "fixed(0)", "random")
             if n in report.mean_regret]
    lines = ["strategy\tagreement\tmean_regret"]
    for n in names:
        lines.append(f"{n}\t{report.mean_agreement[n]:.6f}"
                     f"\t{report.mean_regret[n]:.6f}")
    table = "\n".join(lines) + "\n"
    (out / "strategy_table.tsv").write_text(table, encoding="utf-8")
    records = comparison_records(report)
    (out / "comparison.jsonl").write_text("\n".join(records) + "\n",
                                          encoding="utf-8")
    sys.stdout.write(table)
    if report.pairwise_vs_regression is not None:
        t = report.pairwise_vs_regression
        print(f"regression minus pairwise regret: t={t.t:.4f} p={t.p:.6g}")
    print(f"regret ordering ok: {report.regret_ordering_ok}")
    if args.sweep:
        rows = pool_size_sweep(base_cfg, train_cfg, _parse_int_list(args.sweep),
                               h=args.h)
        sweep = format_sweep_table(rows)
        (out / "sweep.tsv").write_text(sweep, encoding="utf-8")
        sys.stdout.write(sweep)
    return 0


# ------------------------------------------------------------------ wiring

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=None,
                        help="INI config file; flags override file values")
    common.add_argument("--seed", type=int, metavar="N", default=None,
                        help="seed for randomized subcommands (default: 0)")
    common.add_argument("--threads", type=int, metavar="N", default=None,
                        help="worker cap for batch retrieval "
                             "(default: machine parallelism)")
    common.add_argument("--out", metavar="DIR", default="out",
                        help="output directory (default: out)")

    parser = argparse.ArgumentParser(
        prog="autov-rank",
        description="loss-oriented pairwise ranking over visual prompt pools",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen", parents=[common],
                       help="write a synthetic train/test dataset")
    add_config_flags(p, "synthetic")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("filter", parents=[common],
                       help="drop low-variance and outlier groups")
    p.add_argument("--dataset", metavar="PATH", required=True,
                   help="input dataset file")
    add_config_flags(p, "filter")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("pairs", parents=[common],
                       help="rank groups and expand preference pairs")
    p.add_argument("--dataset", metavar="PATH", required=True,
                   help="input dataset file")
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("train", parents=[common],
                       help="fit the scoring head on preference pairs")
    p.add_argument("--pairs", metavar="PATH", required=True,
                   help="preference pairs file")
    p.add_argument("--dataset", metavar="PATH", required=True,
                   help="dataset file the pairs reference")
    p.add_argument("--h", type=int, metavar="N", default=16,
                   help="scoring head width (default: 16)")
    p.add_argument("--text-mode", metavar="S", default="aggregate",
                   help="text conditioning (default: aggregate)")
    add_config_flags(p, "train")
    add_config_flags(p, "interaction")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rank", parents=[common],
                       help="batch retrieval with a trained checkpoint")
    p.add_argument("--dataset", metavar="PATH", required=True,
                   help="input dataset file")
    p.add_argument("--checkpoint", metavar="DIR", required=True,
                   help="training checkpoint directory")
    p.add_argument("--weights", metavar="DIR", default=None,
                   help="interaction weights directory when not bundled")
    add_config_flags(p, "retrieval")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("bench", parents=[common],
                       help="strategy comparison and pool-size sweep")
    p.add_argument("--seeds", metavar="LIST", default="0",
                   help="comma-separated benchmark seeds (default: 0)")
    p.add_argument("--sweep", metavar="LIST", default=None,
                   help="pool sizes for an additional sweep report")
    p.add_argument("--include-baselines", type=_parse_bool, metavar="BOOL",
                   default=True,
                   help="evaluate fixed/random baselines too (default: True)")
    p.add_argument("--h", type=int, metavar="N", default=16,
                   help="scoring head width (default: 16)")
    p.add_argument("--text-mode", metavar="S", default="aggregate",
                   help="text conditioning (default: aggregate)")
    add_config_flags(p, "synthetic")
    add_config_flags(p, "train")
    p.set_defaults(func=cmd_bench)

    return parser


def _init_logging() -> None:
    name = os.environ.get("AUTOV_RANK_LOG", "warning").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        raise UsageError(f"AUTOV_RANK_LOG: unknown level {name!r}")
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(level)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _init_logging()
        file_conf = load_config_file(args.config) if args.config else None
        return args.func(args, file_conf)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 2
    except (MissingBlobError, OSError) as err:
        print(f"path error: {err}", file=sys.stderr)
        return 1
    except AutovRankError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
