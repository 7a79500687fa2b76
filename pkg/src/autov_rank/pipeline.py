"""Candidate groups, loss-based ranking, quality filters, and dataset files.

A dataset is UTF-8 line-delimited JSON: a manifest line first (format name,
version, dims), then one record per group naming the query blob, the
candidate blobs, their combination losses, and optionally a precomputed
rank. Token matrices live in AVT1 blobs referenced by paths relative to the
dataset file.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import as_matrix, read_tensor, write_tensor
from .errors import (
    DatasetParseError,
    DegenerateGroupError,
    FormatError,
    IncompleteGroupError,
    MissingBlobError,
    ValidationError,
)

DATASET_FORMAT = "autov-rank-dataset"
DATASET_VERSION = 1

REASON_LOW_VARIANCE = "low-variance"
REASON_OUTLIER = "outlier"


@dataclass
class Candidate:
    """One visual prompt variant: its tokens and, when known, its combination loss."""

    candidate_id: str
    tokens: np.ndarray
    loss: float | None = None

    def __post_init__(self):
        self.tokens = as_matrix(self.tokens, f"candidate {self.candidate_id} tokens")
        if self.loss is not None:
            self.loss = float(self.loss)
            if not math.isfinite(self.loss) or self.loss < 0.0:
                raise ValidationError(
                    f"candidate {self.candidate_id}: loss must be a finite nonnegative real, got {self.loss}"
                )


@dataclass
class CandidateGroup:
    """One query with its pool of candidate visual prompts (at least two)."""

    group_id: str
    query: np.ndarray
    candidates: list[Candidate]

    def __post_init__(self):
        self.query = as_matrix(self.query, f"group {self.group_id} query")
        if len(self.candidates) < 2:
            raise DegenerateGroupError(
                f"group {self.group_id}: needs at least 2 candidates, got {len(self.candidates)}"
            )
        ids = [c.candidate_id for c in self.candidates]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"group {self.group_id}: duplicate candidate ids")

    def losses(self) -> list[float]:
        out = []
        for c in self.candidates:
            if c.loss is None:
                raise IncompleteGroupError(
                    f"group {self.group_id}: candidate {c.candidate_id} has no loss"
                )
            out.append(c.loss)
        return out


@dataclass
class Quadruple:
    """A group joined with its loss-ascending rank: rank[i] is candidate i's position."""

    group: CandidateGroup
    losses: list[float]
    rank: list[int]


@dataclass
class PreferencePair:
    """Indices into a group's candidate list; chosen has the lower loss."""

    group_id: str
    chosen: int
    rejected: int


@dataclass
class FilterConfig:
    min_loss_std: float = 0.05
    max_mean_loss_quantile: float = 0.95


@dataclass
class DroppedGroup:
    group: CandidateGroup
    reason: str


@dataclass
class FilterResult:
    kept: list[CandidateGroup]
    dropped: list[DroppedGroup]
    mean_loss_threshold: float


def rank_group(group: CandidateGroup) -> Quadruple:
    """Rank candidates by ascending loss; ties keep their original order."""
    losses = group.losses()
    order = sorted(range(len(losses)), key=lambda i: (losses[i], i))
    rank = [0] * len(losses)
    for position, idx in enumerate(order):
        rank[idx] = position
    return Quadruple(group=group, losses=losses, rank=rank)


def expand_pairs(quad: Quadruple) -> list[PreferencePair]:
    """All n(n-1)/2 ordered preference pairs; the lower-loss side is chosen.

    Exact loss ties resolve to the lower index as chosen, matching the
    stable rank order.
    """
    n = len(quad.losses)
    if n < 2:
        raise DegenerateGroupError(f"group {quad.group.group_id}: cannot pair {n} candidate(s)")
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            if quad.losses[j] < quad.losses[i]:
                chosen, rejected = j, i
            else:
                chosen, rejected = i, j
            pairs.append(PreferencePair(quad.group.group_id, chosen, rejected))
    return pairs


def filter_groups(groups: list[CandidateGroup], cfg: FilterConfig = FilterConfig(),
                  quantile_base: list[float] | None = None) -> FilterResult:
    """Drop uninformative and outlier groups.

    A group is dropped as "low-variance" when the population std of its
    losses falls below cfg.min_loss_std, else as "outlier" when its mean
    loss exceeds the cfg.max_mean_loss_quantile quantile of the batch's
    group means. The quantile base defaults to the incoming batch; pass the
    returned threshold base back in to re-filter against the original batch
    (the kept set is idempotent under that).
    """
    means = [float(np.mean(g.losses())) for g in groups]
    base = [float(m) for m in (quantile_base if quantile_base is not None else means)]
    threshold = float(np.quantile(base, cfg.max_mean_loss_quantile)) if base else math.inf
    kept, dropped = [], []
    for g, mean in zip(groups, means):
        if float(np.std(g.losses())) < cfg.min_loss_std:
            dropped.append(DroppedGroup(g, REASON_LOW_VARIANCE))
        elif mean > threshold:
            dropped.append(DroppedGroup(g, REASON_OUTLIER))
        else:
            kept.append(g)
    return FilterResult(kept=kept, dropped=dropped, mean_loss_threshold=threshold)


# ------------------------------------------------------------------ dataset io

def save_dataset(groups: list[CandidateGroup], path) -> None:
    """Write groups as a JSONL dataset plus an adjacent `<stem>_blobs/` directory.

    Blob names derive from record order, so equal inputs produce identical
    bytes on disk.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_dir_name = path.stem + "_blobs"
    blob_dir = path.parent / blob_dir_name
    blob_dir.mkdir(exist_ok=True)
    dims = {}
    if groups:
        first = groups[0]
        dims = {
            "d_model": int(first.query.shape[1]),
            "l_v": int(first.candidates[0].tokens.shape[0]),
            "l_t": int(first.query.shape[0]),
        }
    lines = [json.dumps({"format": DATASET_FORMAT, "version": DATASET_VERSION, "dims": dims})]
    for i, g in enumerate(groups):
        qblob = f"{blob_dir_name}/{i:05d}_q.avt1"
        write_tensor(path.parent / qblob, g.query)
        cands = []
        for j, c in enumerate(g.candidates):
            cblob = f"{blob_dir_name}/{i:05d}_c{j}.avt1"
            write_tensor(path.parent / cblob, c.tokens)
            entry = {"id": c.candidate_id, "tokens": cblob}
            if c.loss is not None:
                entry["loss"] = c.loss
            cands.append(entry)
        record = {"group_id": g.group_id, "query": qblob, "candidates": cands}
        lines.append(json.dumps(record))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_manifest(line: str) -> dict:
    try:
        manifest = json.loads(line)
    except json.JSONDecodeError as err:
        raise DatasetParseError(f"line 1: unparseable manifest: {err}") from err
    if not isinstance(manifest, dict) or manifest.get("format") != DATASET_FORMAT:
        raise FormatError(f"line 1: manifest format is not {DATASET_FORMAT!r}")
    if manifest.get("version") != DATASET_VERSION:
        raise FormatError(f"line 1: unsupported dataset version {manifest.get('version')!r}")
    return manifest


def dataset_record_lines(path) -> list[tuple[int, str]]:
    """Validate the manifest and return the (lineno, text) record lines."""
    path = Path(path)
    if not path.exists():
        raise MissingBlobError(f"dataset file {path} does not exist")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file, expected a manifest line")
    _parse_manifest(lines[0])
    return [
        (lineno, line)
        for lineno, line in enumerate(lines[1:], start=2)
        if line.strip()
    ]


def parse_dataset_record(line: str, lineno: int, base_dir) -> CandidateGroup:
    """Parse one record line, resolving blob references under base_dir."""
    base_dir = Path(base_dir)

    def blob(ref: str) -> np.ndarray:
        blob_path = base_dir / ref
        if not blob_path.exists():
            raise MissingBlobError(f"line {lineno}: blob {ref!r} not found under {base_dir}")
        return read_tensor(blob_path)

    try:
        record = json.loads(line)
    except json.JSONDecodeError as err:
        raise DatasetParseError(f"line {lineno}: unparseable record: {err}") from err
    for key in ("group_id", "query", "candidates"):
        if key not in record:
            raise DatasetParseError(f"line {lineno}: missing field {key!r}")
    if not isinstance(record["candidates"], list) or not record["candidates"]:
        raise DatasetParseError(f"line {lineno}: field 'candidates' must be a non-empty list")
    cands = []
    for entry in record["candidates"]:
        for key in ("id", "tokens"):
            if key not in entry:
                raise DatasetParseError(f"line {lineno}: candidate missing field {key!r}")
        loss = entry.get("loss")
        if loss is not None:
            if not isinstance(loss, (int, float)) or not math.isfinite(loss):
                raise ValidationError(f"line {lineno}: loss field {loss!r} is not a finite number")
            if loss < 0:
                raise ValidationError(f"line {lineno}: loss field {loss!r} is negative")
        cands.append(Candidate(entry["id"], blob(entry["tokens"]), loss))
    try:
        return CandidateGroup(record["group_id"], blob(record["query"]), cands)
    except DegenerateGroupError as err:
        raise DatasetParseError(f"line {lineno}: {err}") from err


def load_dataset(path) -> list[CandidateGroup]:
    """Load a dataset file, resolving blob references relative to it.

    Raises DatasetParseError with the offending line number for structural
    problems, ValidationError for bad field values, and MissingBlobError
    for dangling tensor references.
    """
    path = Path(path)
    return [
        parse_dataset_record(line, lineno, path.parent)
        for lineno, line in dataset_record_lines(path)
    ]


def save_pairs(pairs: list[PreferencePair], path) -> None:
    """Write preference pairs as JSONL with a manifest line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"format": "autov-rank-pairs", "version": 1, "count": len(pairs)})]
    for p in pairs:
        lines.append(json.dumps({"group_id": p.group_id, "chosen": p.chosen, "rejected": p.rejected}))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_pairs(path) -> list[PreferencePair]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError(f"{path}: empty pairs file")
    try:
        manifest = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise DatasetParseError(f"line 1: unparseable manifest: {err}") from err
    if manifest.get("format") != "autov-rank-pairs":
        raise FormatError(f"{path}: not a pairs file")
    pairs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            pairs.append(PreferencePair(rec["group_id"], int(rec["chosen"]), int(rec["rejected"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
            raise DatasetParseError(f"line {lineno}: bad pair record: {err}") from err
    return pairs
