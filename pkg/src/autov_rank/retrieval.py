"""Inference: prefilter a candidate pool, score survivors, pick the argmax.

The prefilter guards against off-distribution candidates: the one farthest
from the rest of the pool (mean cosine distance between mean-pooled visual
features) is dropped before any scoring, provided the pool is large enough
for "farthest from the others" to be meaningful. By default distances are
taken on raw token features, so the decision is independent of the trained
scorer and of the query.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import cosine_distance, mean_pool
from .errors import (
    DatasetParseError,
    DegenerateInputError,
    FormatError,
    MissingBlobError,
    StateError,
    ValidationError,
)
from .interaction import (
    InteractionWeights,
    aggregate_text,
    interact,
    load_interaction_weights,
)
from .pipeline import CandidateGroup, dataset_record_lines, parse_dataset_record
from .ranker import RankerParams, batched_forward, load_ranker_params
from .training import load_checkpoint

TEXT_MODES = ("aggregate", "per-candidate")
PREFILTER_FEATURES = ("raw", "interacted")


@dataclass
class RetrievalConfig:
    prefilter_enabled: bool = True
    prefilter_min_pool: int = 3
    report_scores: bool = True
    text_mode: str = "aggregate"
    prefilter_features: str = "raw"
    score_variant: str = "attended"

    def __post_init__(self):
        if self.prefilter_min_pool < 3:
            raise ValueError("prefilter_min_pool must be >= 3")
        if self.text_mode not in TEXT_MODES:
            raise ValueError(f"text_mode must be one of {TEXT_MODES}")
        if self.prefilter_features not in PREFILTER_FEATURES:
            raise ValueError(f"prefilter_features must be one of {PREFILTER_FEATURES}")


@dataclass
class RetrievalResult:
    group_id: str
    selected_id: str
    selected_index: int          # slot in the original candidate list
    survivor_ids: list[str]
    scores: list[float]          # aligned with survivor_ids
    removed_id: str | None = None


def pooled_features(group: CandidateGroup, cfg: RetrievalConfig,
                    weights: InteractionWeights | None = None) -> list[np.ndarray]:
    """Mean-pooled per-candidate features used for prefilter distances."""
    if cfg.prefilter_features == "interacted":
        if weights is None:
            raise StateError("interacted prefilter features require interaction weights")
        out = []
        for c in group.candidates:
            v_tilde, _ = interact(weights, c.tokens, group.query)
            out.append(mean_pool(v_tilde))
        return out
    return [mean_pool(c.tokens) for c in group.candidates]


def prefilter(group: CandidateGroup, cfg: RetrievalConfig = RetrievalConfig(),
              weights: InteractionWeights | None = None) -> tuple[list[int], int | None]:
    """Drop the candidate farthest from the rest of the pool.

    Returns (surviving indices in original order, removed index or None).
    Pools below prefilter_min_pool pass through untouched. Among tied
    maxima the lowest index is removed.
    """
    n = len(group.candidates)
    if n < cfg.prefilter_min_pool:
        return list(range(n)), None
    pooled = pooled_features(group, cfg, weights)
    for c, p in zip(group.candidates, pooled):
        if not np.linalg.norm(p) > 0.0:
            raise DegenerateInputError(
                f"group {group.group_id}: candidate {c.candidate_id} has "
                f"zero-norm pooled features"
            )
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = cosine_distance(pooled[i], pooled[j])
    mean_dist = dist.sum(axis=1) / (n - 1)
    removed = int(np.argmax(mean_dist))
    return [i for i in range(n) if i != removed], removed


def retrieve(group: CandidateGroup, params: RankerParams,
             weights: InteractionWeights,
             cfg: RetrievalConfig = RetrievalConfig()) -> RetrievalResult:
    """Score the (possibly prefiltered) pool and select the top candidate.

    Survivors keep their original order, so argmax ties resolve toward the
    lowest candidate index.
    """
    if cfg.prefilter_enabled:
        survivors, removed = prefilter(group, cfg, weights)
    else:
        survivors, removed = list(range(len(group.candidates))), None

    v_slices, t_slices = [], []
    for i in survivors:
        v_tilde, t_tilde = interact(weights, group.candidates[i].tokens, group.query)
        v_slices.append(v_tilde)
        t_slices.append(t_tilde)
    v_stack = np.stack(v_slices)
    if cfg.text_mode == "per-candidate":
        t_stack = np.stack(t_slices)
    else:
        t_agg = aggregate_text(t_slices)
        t_stack = np.broadcast_to(t_agg, (len(survivors),) + t_agg.shape)
    scores, _ = batched_forward(params, v_stack, t_stack, cfg.score_variant)

    best = int(np.argmax(scores))
    return RetrievalResult(
        group_id=group.group_id,
        selected_id=group.candidates[survivors[best]].candidate_id,
        selected_index=survivors[best],
        survivor_ids=[group.candidates[i].candidate_id for i in survivors],
        scores=[float(s) for s in scores],
        removed_id=None if removed is None else group.candidates[removed].candidate_id,
    )


# ------------------------------------------------------------------ batch run

@dataclass
class BatchRetrieveSummary:
    n_groups: int = 0
    histogram: dict[int, int] = field(default_factory=dict)
    errors: list[tuple[str, str]] = field(default_factory=list)


def _result_line(res: RetrievalResult, report_scores: bool) -> str:
    cols = [res.group_id, res.selected_id, res.removed_id or "-"]
    if report_scores:
        cols.append(",".join(f"{s:.6f}" for s in res.scores))
    return "\t".join(cols)


def load_scorer(checkpoint_path) -> RankerParams:
    """Load ranker params from either a training checkpoint or a bare save."""
    header_path = Path(checkpoint_path) / "header.json"
    if not header_path.exists():
        raise FormatError(f"{checkpoint_path}: no header.json")
    header = json.loads(header_path.read_text())
    if header.get("format") == "autov-rank-train":
        params, _, _ = load_checkpoint(checkpoint_path)
        return params
    return load_ranker_params(checkpoint_path)


def batch_retrieve(dataset_path, checkpoint_path, cfg: RetrievalConfig = RetrievalConfig(),
                   out_path=None, weights_path=None,
                   threads: int = 1) -> BatchRetrieveSummary:
    """Retrieve over every group in a dataset file and write a results file.

    Groups that fail to parse or score become error lines; the run continues
    and the summary collects them. Output order follows input order, so
    reruns on identical inputs are byte-identical.
    """
    dataset_path = Path(dataset_path)
    checkpoint_path = Path(checkpoint_path)
    params = load_scorer(checkpoint_path)
    if weights_path is None:
        weights_path = checkpoint_path / "interaction"
        if not (weights_path / "weights.json").exists():
            raise StateError(
                f"{checkpoint_path}: no bundled interaction weights, pass weights_path"
            )
    weights = load_interaction_weights(weights_path)

    records = dataset_record_lines(dataset_path)
    summary = BatchRetrieveSummary()

    def run_one(item):
        lineno, line = item
        try:
            group_id = str(json.loads(line).get("group_id", f"line-{lineno}"))
        except (json.JSONDecodeError, AttributeError):
            group_id = f"line-{lineno}"
        try:
            group = parse_dataset_record(line, lineno, dataset_path.parent)
            return retrieve(group, params, weights, cfg), group.group_id, None
        except (DatasetParseError, ValidationError, MissingBlobError,
                FormatError, DegenerateInputError, StateError) as err:
            return None, group_id, str(err)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run_one, records))
    else:
        outcomes = [run_one(item) for item in records]

    lines = []
    for res, group_id, err in outcomes:
        if err is not None:
            summary.errors.append((group_id, err))
            lines.append(f"{group_id}\tERROR\t-\t{err}")
            continue
        summary.n_groups += 1
        summary.histogram[res.selected_index] = (
            summary.histogram.get(res.selected_index, 0) + 1
        )
        lines.append(_result_line(res, cfg.report_scores))

    lines.append(f"# groups: {summary.n_groups}")
    lines.append(f"# errors: {len(summary.errors)}")
    for slot in sorted(summary.histogram):
        lines.append(f"# slot {slot}: {summary.histogram[slot]}")
    text = "\n".join(lines) + "\n"
    if out_path is not None:
        Path(out_path).write_text(text, encoding="utf-8")
    return summary
