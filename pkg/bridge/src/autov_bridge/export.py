"""Export operations: embeddings, candidate losses, and layer weights.

Every operation ends the same way: the files just written are read back
through the format layer before the manifest is reported, so a bridge
that claims success has already proven the engine can load its output.
Each manifest records the model identity, tokenizer and preprocessing
fingerprints, a sha256 for every file written, and per-item error
records for inputs that could not be exported.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .adapter import LvlmAdapter
from .errors import ExportError, PreprocessError, TruncationError


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class ExportItem:
    """One retrieval group on the model side: a query over raw images."""

    group_id: str
    query: str
    candidates: list[tuple[str, np.ndarray]]
    answer: str | None = None


@dataclass
class ExportManifest:
    """What an export produced, with enough detail to audit it later."""

    kind: str
    model_id: str
    d_model: int
    tokenizer_fingerprint: str
    preprocess_fingerprint: str
    blobs: dict[str, str]
    errors: list[dict] = field(default_factory=list)
    layer_index: int | None = None

    def write(self, path) -> None:
        Path(path).write_text(
            json.dumps(asdict(self), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path) -> "ExportManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _checksums(base_dir: Path, rel_paths: list[str]) -> dict[str, str]:
    return {rel: sha256_file(base_dir / rel) for rel in sorted(rel_paths)}


def _manifest_path(dataset_path: Path) -> Path:
    return dataset_path.parent / (dataset_path.stem + "_manifest.json")


def _meta_path(dataset_path: Path) -> Path:
    return dataset_path.parent / (dataset_path.stem + "_meta.json")


def export_embeddings(adapter: LvlmAdapter, items: list[ExportItem], dataset_path) -> ExportManifest:
    """Embed queries and candidate images into a dataset file.

    Items whose images fail preprocessing, or that offer fewer than two
    candidates, are skipped and recorded in the manifest's error list;
    the export fails outright only when nothing survives. Query text and
    ground-truth answers land in a sidecar meta file next to the dataset
    so the loss pass can find them; the engine never reads it.
    """
    dataset_path = Path(dataset_path)
    records = []
    meta = {}
    errors = []
    for item in items:
        if len(item.candidates) < 2:
            errors.append({
                "group_id": item.group_id,
                "stage": "embed",
                "error": f"group needs at least 2 candidates, got {len(item.candidates)}",
            })
            continue
        try:
            query = adapter.text_tokens(item.query)
            cands = [(cid, adapter.visual_tokens(img)) for cid, img in item.candidates]
        except PreprocessError as err:
            errors.append({"group_id": item.group_id, "stage": "embed", "error": str(err)})
            continue
        records.append(formats.ExportRecord(item.group_id, query, cands))
        meta[item.group_id] = {"query": item.query, "answer": item.answer}
    if not records:
        raise ExportError(f"no exportable groups among {len(items)} items")
    written = formats.write_dataset(records, dataset_path)
    written.append(dataset_path.name)
    meta_path = _meta_path(dataset_path)
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(meta_path.name)
    _validate_dataset(dataset_path, expected_groups=len(records))
    manifest = ExportManifest(
        kind="embeddings",
        model_id=adapter.model_id,
        d_model=adapter.d_model,
        tokenizer_fingerprint=adapter.tokenizer_fingerprint(),
        preprocess_fingerprint=adapter.preprocess_fingerprint(),
        blobs=_checksums(dataset_path.parent, written),
        errors=errors,
    )
    manifest.write(_manifest_path(dataset_path))
    return manifest


def _validate_dataset(dataset_path: Path, expected_groups: int, losses_required: bool = False) -> None:
    records = formats.read_dataset(dataset_path)
    if len(records) != expected_groups:
        raise ExportError(
            f"{dataset_path}: round trip returned {len(records)} groups, expected {expected_groups}"
        )
    if losses_required:
        for rec in records:
            missing = [cid for cid, _ in rec.candidates if cid not in rec.losses]
            if missing:
                raise ExportError(f"{dataset_path}: group {rec.group_id} lost losses for {missing}")


def compute_combination_losses(adapter: LvlmAdapter, dataset_path, out_path,
                               answers: dict[str, tuple[str, str]] | None = None) -> ExportManifest:
    """Score every candidate and write a loss-annotated copy of a dataset.

    answers maps group_id to (query, answer) text; when omitted it is
    read from the sidecar meta file written by export_embeddings. Groups
    whose answers overflow the context window are dropped with an error
    record carrying both lengths, since a group with partial losses
    cannot train anything.
    """
    dataset_path = Path(dataset_path)
    out_path = Path(out_path)
    if answers is None:
        meta_path = _meta_path(dataset_path)
        if not meta_path.exists():
            raise ExportError(f"no answers given and no meta file at {meta_path}")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        answers = {
            gid: (entry["query"], entry["answer"])
            for gid, entry in meta.items()
            if entry.get("answer") is not None
        }
    records = formats.read_dataset(dataset_path)
    scored = []
    errors = []
    for rec in records:
        if rec.group_id not in answers:
            errors.append({
                "group_id": rec.group_id,
                "stage": "loss",
                "error": "no ground-truth answer for this group",
            })
            continue
        query, answer = answers[rec.group_id]
        losses = {}
        try:
            for cand_id, tokens in rec.candidates:
                losses[cand_id] = adapter.answer_nll(tokens, query, answer)
        except TruncationError as err:
            errors.append({
                "group_id": rec.group_id,
                "stage": "loss",
                "error": str(err),
                "sequence_length": err.sequence_length,
                "context_length": err.context_length,
            })
            continue
        scored.append(formats.ExportRecord(rec.group_id, rec.query, rec.candidates, losses))
    if not scored:
        raise ExportError(f"no scorable groups among {len(records)}")
    written = formats.write_dataset(scored, out_path)
    written.append(out_path.name)
    _validate_dataset(out_path, expected_groups=len(scored), losses_required=True)
    manifest = ExportManifest(
        kind="losses",
        model_id=adapter.model_id,
        d_model=adapter.d_model,
        tokenizer_fingerprint=adapter.tokenizer_fingerprint(),
        preprocess_fingerprint=adapter.preprocess_fingerprint(),
        blobs=_checksums(out_path.parent, written),
        errors=errors,
    )
    manifest.write(_manifest_path(out_path))
    return manifest


def export_interaction_layer(adapter: LvlmAdapter, layer_index: int, out_dir) -> ExportManifest:
    """Copy one frozen decoder block into the engine's weights layout."""
    out_dir = Path(out_dir)
    tensors = adapter.decoder_layer(layer_index)
    dims = {
        "d_model": adapter.d_model,
        "n_heads": adapter.n_heads,
        "d_ff": int(tensors["w_ff1"].shape[1]),
    }
    written = formats.write_interaction_dir(tensors, dims, out_dir)
    for name, is_vector in formats.INTERACTION_TENSORS:
        value = formats.read_tensor(out_dir / f"{name}.avt1")
        expected = tensors[name].reshape(1, -1) if is_vector else tensors[name]
        if value.shape != expected.shape:
            raise ExportError(f"{name}: round trip shape {value.shape} != {expected.shape}")
    manifest = ExportManifest(
        kind="interaction-layer",
        model_id=adapter.model_id,
        d_model=adapter.d_model,
        tokenizer_fingerprint=adapter.tokenizer_fingerprint(),
        preprocess_fingerprint=adapter.preprocess_fingerprint(),
        blobs=_checksums(out_dir, written),
        layer_index=layer_index,
    )
    manifest.write(out_dir / "manifest.json")
    return manifest
