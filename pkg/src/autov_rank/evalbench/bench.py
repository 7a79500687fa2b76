"""Strategy comparison and pool-size sweep runners.

One comparison run trains the four trainable baselines on the same
dataset and judges every strategy on the held-out split. Multi-seed runs
feed the paired t-test; the report keeps per-seed values so significance
is computed from runs, never from a single split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from ..core import Rng
from ..errors import ValidationError
from ..interaction import seed_interaction_weights
from ..pipeline import expand_pairs, rank_group
from ..training import TrainConfig, prepare_features, train
from .metrics import StrategyResult, evaluate, histogram_entropy
from .stats import TTestReport, paired_ttest
from .strategies import (
    strategy_fixed,
    strategy_gate,
    strategy_listwise,
    strategy_pairwise,
    strategy_random,
    strategy_regression,
    train_gate,
    train_listwise,
    train_regression,
)
from .synthetic import SyntheticConfig, generate_synthetic

TRAINED_STRATEGIES = ("pairwise", "listwise", "gate", "regression")


@dataclass
class ComparisonReport:
    seeds: list[int]
    per_seed: list[dict[str, StrategyResult]]   # one dict per seed, keyed by strategy
    mean_agreement: dict[str, float]
    mean_regret: dict[str, float]
    pairwise_vs_regression: TTestReport | None  # None with a single seed
    regret_ordering_ok: bool


def _train_all(data, train_cfg: TrainConfig, h: int):
    cfg = data.config
    weights = seed_interaction_weights(Rng(cfg.seed).child("interaction"), cfg.d_model)
    features = prepare_features(data.train + data.test, weights)
    pairs = [p for g in data.train for p in expand_pairs(rank_group(g))]
    pw_params, _, _ = train(pairs, data.train, weights, train_cfg,
                            features=features, h=h)
    lw_params, _ = train_listwise(data.train, weights, train_cfg,
                                  features=features, h=h)
    rg_params, _ = train_regression(data.train, weights, train_cfg,
                                    features=features, h=h)
    gate_params, _ = train_gate(data.train, weights, train_cfg, features=features)
    return weights, {
        "pairwise": strategy_pairwise(pw_params, weights, variant=train_cfg.score_variant),
        "listwise": strategy_listwise(lw_params, weights, variant=train_cfg.score_variant),
        "regression": strategy_regression(rg_params, weights, variant=train_cfg.score_variant),
        "gate": strategy_gate(gate_params, weights),
    }


def run_strategy_comparison(base_cfg: SyntheticConfig, train_cfg: TrainConfig,
                            seeds: list[int], h: int = 16,
                            include_baselines: bool = True,
                            log_fn=None) -> ComparisonReport:
    """Train and evaluate every strategy once per seed.

    The regret ordering flag checks the mean regrets of the trained
    strategies from best to worst expectation: pairwise, list-wise, gate,
    regression.
    """
    if not seeds:
        raise ValidationError("need at least one seed")
    per_seed = []
    for seed in seeds:
        cfg = replace(base_cfg, seed=seed)
        data = generate_synthetic(cfg)
        selectors = {}
        weights, trained = _train_all(data, replace(train_cfg, seed=seed), h)
        selectors.update(trained)
        if include_baselines:
            selectors["fixed(0)"] = strategy_fixed(0)
            selectors["random"] = strategy_random(seed)
        results = {name: evaluate(sel, data.test) for name, sel in selectors.items()}
        per_seed.append(results)
        if log_fn is not None:
            regrets = " ".join(f"{n}={results[n].mean_regret:.4f}" for n in TRAINED_STRATEGIES)
            log_fn(f"seed {seed}\t{regrets}")
    names = list(per_seed[0])
    mean_agreement = {n: sum(r[n].agreement for r in per_seed) / len(seeds) for n in names}
    mean_regret = {n: sum(r[n].mean_regret for r in per_seed) / len(seeds) for n in names}
    ttest = None
    if len(seeds) >= 2:
        ttest = paired_ttest([r["regression"].mean_regret for r in per_seed],
                             [r["pairwise"].mean_regret for r in per_seed])
    ordered = [mean_regret[n] for n in TRAINED_STRATEGIES]
    ordering_ok = all(ordered[i] <= ordered[i + 1] for i in range(len(ordered) - 1))
    return ComparisonReport(
        seeds=list(seeds), per_seed=per_seed,
        mean_agreement=mean_agreement, mean_regret=mean_regret,
        pairwise_vs_regression=ttest, regret_ordering_ok=ordering_ok,
    )


@dataclass
class SweepRow:
    n: int
    agreement: float
    mean_regret: float
    groups: int


def pool_size_sweep(base_cfg: SyntheticConfig, train_cfg: TrainConfig,
                    ns: list[int], h: int = 16, log_fn=None) -> list[SweepRow]:
    """Pairwise strategy trained and evaluated per pool size, ascending.

    n = 1 is the degenerate pool: the only candidate is the oracle best,
    so the row is emitted without training.
    """
    if not ns:
        raise ValidationError("need at least one pool size")
    for n in ns:
        if not 1 <= n <= 16:
            raise ValidationError(f"pool size {n} outside [1, 16]")
    rows = []
    for n in sorted(set(ns)):
        if n == 1:
            rows.append(SweepRow(n=1, agreement=1.0, mean_regret=0.0,
                                 groups=base_cfg.test_groups))
            continue
        cfg = replace(base_cfg, n=n)
        data = generate_synthetic(cfg)
        weights = seed_interaction_weights(Rng(cfg.seed).child("interaction"), cfg.d_model)
        features = prepare_features(data.train + data.test, weights)
        pairs = [p for g in data.train for p in expand_pairs(rank_group(g))]
        params, _, _ = train(pairs, data.train, weights, train_cfg,
                             features=features, h=h)
        result = evaluate(strategy_pairwise(params, weights,
                                            variant=train_cfg.score_variant), data.test)
        rows.append(SweepRow(n=n, agreement=result.agreement,
                             mean_regret=result.mean_regret, groups=len(data.test)))
        if log_fn is not None:
            log_fn(f"n {n}\tagreement {result.agreement:.4f}\tregret {result.mean_regret:.4f}")
    return rows


def format_strategy_table(results: list[StrategyResult]) -> str:
    """Tab-separated table: strategy, agreement, regret, histogram entropy."""
    lines = ["strategy\tagreement\tmean_regret\thistogram_entropy"]
    for r in results:
        lines.append(f"{r.strategy}\t{r.agreement:.6f}\t{r.mean_regret:.6f}"
                     f"\t{histogram_entropy(r.histogram):.6f}")
    return "\n".join(lines) + "\n"


def format_sweep_table(rows: list[SweepRow]) -> str:
    lines = ["n\tagreement\tmean_regret\tgroups"]
    for r in rows:
        lines.append(f"{r.n}\t{r.agreement:.6f}\t{r.mean_regret:.6f}\t{r.groups}")
    return "\n".join(lines) + "\n"


def comparison_records(report: ComparisonReport) -> list[str]:
    """Line-delimited JSON records, one per (seed, strategy) evaluation."""
    records = []
    for seed, results in zip(report.seeds, report.per_seed):
        for name, r in sorted(results.items()):
            records.append(json.dumps({
                "seed": seed, "strategy": name, "agreement": r.agreement,
                "mean_regret": r.mean_regret, "histogram": r.histogram,
            }, sort_keys=True))
    if report.pairwise_vs_regression is not None:
        t = report.pairwise_vs_regression
        records.append(json.dumps({
            "ttest": "regression-minus-pairwise/mean_regret",
            "differences": t.differences, "mean": t.mean, "std": t.std,
            "t": t.t, "p": t.p, "dof": t.dof,
        }, sort_keys=True))
    return records
