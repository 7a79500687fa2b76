"""Writers and readers for the ranking engine's on-disk formats.

The bridge produces files the engine consumes, so the byte layouts here
are the contract: a 12-byte AVT1 header (magic, u32 rows, u32 cols,
little endian) followed by a row-major f32 payload; a dataset as one
JSONL file whose first line is a manifest and whose records reference
tensor blobs relative to the dataset file; an interaction layer as a
directory with a weights.json header next to one blob per tensor.

These are implemented from the format contract rather than imported
from the engine, so the bridge installs and runs without it. The test
suite loads every artifact through the engine's own readers to keep the
two sides honest.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BridgeFormatError

AVT1_MAGIC = b"AVT1"
_AVT1_HEADER = struct.Struct("<4sII")

DATASET_FORMAT = "autov-rank-dataset"
DATASET_VERSION = 1

WEIGHTS_FORMAT = "autov-rank-interaction"
WEIGHTS_VERSION = 1

# Serialization order matches the engine's writer so directories diff
# cleanly. Entries marked True are 1-d and stored as a single row.
INTERACTION_TENSORS = (
    ("wq", False),
    ("wk", False),
    ("wv", False),
    ("wo", False),
    ("w_ff1", False),
    ("b_ff1", True),
    ("w_ff2", False),
    ("b_ff2", True),
    ("norm1_gain", True),
    ("norm2_gain", True),
)


def write_tensor(path, matrix: np.ndarray) -> None:
    """Write a 2-d float array as an AVT1 blob."""
    m = np.asarray(matrix, dtype=np.float32)
    if m.ndim != 2:
        raise BridgeFormatError(f"expected a 2-d array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise BridgeFormatError(f"{path}: refusing to write non-finite values")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _AVT1_HEADER.pack(AVT1_MAGIC, m.shape[0], m.shape[1])
    path.write_bytes(header + np.ascontiguousarray(m, dtype="<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    """Read an AVT1 blob back into a float32 array."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _AVT1_HEADER.size:
        raise BridgeFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, rows, cols = _AVT1_HEADER.unpack_from(raw)
    if magic != AVT1_MAGIC:
        raise BridgeFormatError(f"{path}: bad magic {magic!r}")
    if rows < 1 or cols < 1:
        raise BridgeFormatError(f"{path}: invalid shape ({rows}, {cols})")
    payload = raw[_AVT1_HEADER.size:]
    expected = rows * cols * 4
    if len(payload) != expected:
        raise BridgeFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    m = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    if not np.all(np.isfinite(m)):
        raise BridgeFormatError(f"{path}: payload contains non-finite values")
    return m.astype(np.float32)


@dataclass
class ExportRecord:
    """One query with its candidate pool, ready for serialization."""

    group_id: str
    query: np.ndarray
    candidates: list[tuple[str, np.ndarray]]
    losses: dict[str, float] = field(default_factory=dict)


def write_dataset(records: list[ExportRecord], path) -> list[str]:
    """Write records as a dataset file plus a blob directory.

    Blob names derive from record order, matching the engine's writer,
    so equal inputs produce identical bytes. Returns the relative paths
    of every file written (dataset line file excluded) for checksum
    manifests.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_dir_name = path.stem + "_blobs"
    (path.parent / blob_dir_name).mkdir(exist_ok=True)
    dims = {}
    if records:
        first = records[0]
        dims = {
            "d_model": int(first.query.shape[1]),
            "l_v": int(first.candidates[0][1].shape[0]),
            "l_t": int(first.query.shape[0]),
        }
    written = []
    lines = [json.dumps({"format": DATASET_FORMAT, "version": DATASET_VERSION, "dims": dims})]
    for i, rec in enumerate(records):
        qblob = f"{blob_dir_name}/{i:05d}_q.avt1"
        write_tensor(path.parent / qblob, rec.query)
        written.append(qblob)
        cands = []
        for j, (cand_id, tokens) in enumerate(rec.candidates):
            cblob = f"{blob_dir_name}/{i:05d}_c{j}.avt1"
            write_tensor(path.parent / cblob, tokens)
            written.append(cblob)
            entry = {"id": cand_id, "tokens": cblob}
            if cand_id in rec.losses:
                entry["loss"] = float(rec.losses[cand_id])
            cands.append(entry)
        lines.append(json.dumps({"group_id": rec.group_id, "query": qblob, "candidates": cands}))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return written


def read_dataset(path) -> list[ExportRecord]:
    """Read a dataset file written by write_dataset (or the engine)."""
    path = Path(path)
    if not path.exists():
        raise BridgeFormatError(f"dataset file {path} does not exist")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise BridgeFormatError(f"{path}: empty file, expected a manifest line")
    try:
        manifest = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise BridgeFormatError(f"{path}: unparseable manifest: {err}") from err
    if not isinstance(manifest, dict) or manifest.get("format") != DATASET_FORMAT:
        raise BridgeFormatError(f"{path}: manifest format is not {DATASET_FORMAT!r}")
    if manifest.get("version") != DATASET_VERSION:
        raise BridgeFormatError(f"{path}: unsupported version {manifest.get('version')!r}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as err:
            raise BridgeFormatError(f"{path}: line {lineno}: {err}") from err
        for key in ("group_id", "query", "candidates"):
            if key not in rec:
                raise BridgeFormatError(f"{path}: line {lineno}: missing field {key!r}")
        query = read_tensor(path.parent / rec["query"])
        cands = []
        losses = {}
        for entry in rec["candidates"]:
            tokens = read_tensor(path.parent / entry["tokens"])
            cands.append((entry["id"], tokens))
            if entry.get("loss") is not None:
                losses[entry["id"]] = float(entry["loss"])
        records.append(ExportRecord(rec["group_id"], query, cands, losses))
    return records


def write_interaction_dir(tensors: dict[str, np.ndarray], dims: dict[str, int], out_dir) -> list[str]:
    """Write a frozen interaction layer in the engine's directory layout.

    tensors maps the ten canonical names to arrays; dims carries d_model,
    n_heads, and d_ff. Returns relative paths of the files written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    missing = [name for name, _ in INTERACTION_TENSORS if name not in tensors]
    if missing:
        raise BridgeFormatError(f"interaction export missing tensors: {missing}")
    manifest = {}
    written = []
    for name, is_vector in INTERACTION_TENSORS:
        value = np.asarray(tensors[name], dtype=np.float32)
        if is_vector:
            value = value.reshape(1, -1)
        blob = f"{name}.avt1"
        write_tensor(out_dir / blob, value)
        manifest[name] = blob
        written.append(blob)
    header = {
        "format": WEIGHTS_FORMAT,
        "version": WEIGHTS_VERSION,
        "d_model": int(dims["d_model"]),
        "n_heads": int(dims["n_heads"]),
        "d_ff": int(dims["d_ff"]),
        "tensors": manifest,
    }
    (out_dir / "weights.json").write_text(
        json.dumps(header, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    written.append("weights.json")
    return written
