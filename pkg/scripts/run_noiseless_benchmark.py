"""Train the pairwise ranker on the noiseless planted benchmark.

Reports top-1 oracle agreement and mean regret against the fixed and
random baselines, optionally followed by a pool-size sweep. With stock
settings the pairwise row should clear 0.95 agreement.
"""

import argparse
import logging
import sys

from autov_rank.core import Rng
from autov_rank.evalbench.bench import format_strategy_table, format_sweep_table, pool_size_sweep
from autov_rank.evalbench.metrics import evaluate
from autov_rank.evalbench.strategies import (
    strategy_fixed,
    strategy_pairwise,
    strategy_random,
)
from autov_rank.evalbench.synthetic import SyntheticConfig, generate_synthetic
from autov_rank.interaction import seed_interaction_weights
from autov_rank.pipeline import expand_pairs, rank_group
from autov_rank.training import TrainConfig, prepare_features, train

log = logging.getLogger("run_noiseless_benchmark")


def parse_args(argv):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--train-groups", type=int, default=2000)
    ap.add_argument("--test-groups", type=int, default=500)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--h", type=int, default=16)
    ap.add_argument("--sweep", default=None,
                    help="comma-separated pool sizes for an extra sweep")
    return ap.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = SyntheticConfig(train_groups=args.train_groups,
                          test_groups=args.test_groups, seed=args.seed)
    train_cfg = TrainConfig(epochs=args.epochs, seed=args.seed)
    log.info("# seed: %d", args.seed)

    data = generate_synthetic(cfg)
    weights = seed_interaction_weights(Rng(cfg.seed).child("interaction"),
                                       cfg.d_model)
    features = prepare_features(data.train + data.test, weights)
    pairs = [p for g in data.train for p in expand_pairs(rank_group(g))]
    log.info("training on %d pairs from %d groups", len(pairs), len(data.train))
    params, _, report = train(
        pairs, data.train, weights, train_cfg, features=features, h=args.h,
        log_fn=lambda line: log.info("epoch %s", line),
    )
    log.info("final train loss %.6f", report.epoch_losses[-1])

    selectors = [
        strategy_pairwise(params, weights),
        strategy_fixed(0),
        strategy_random(args.seed),
    ]
    results = [evaluate(s, data.test) for s in selectors]
    sys.stdout.write(format_strategy_table(results))

    if args.sweep:
        sizes = [int(s) for s in args.sweep.split(",")]
        rows = pool_size_sweep(cfg, train_cfg, sizes, h=args.h,
                               log_fn=lambda line: log.info("%s", line))
        sys.stdout.write(format_sweep_table(rows))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
