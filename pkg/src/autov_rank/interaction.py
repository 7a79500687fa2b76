"""Frozen decoder-style layer that mixes visual and text token streams.

One pre-norm block: causally masked multi-head self-attention over the
concatenated [visual; text] sequence, then a two-matrix feed-forward, both
with residual connections. Norms are RMS with a learned gain only. The
layer is a fixed feature extractor: weights are never updated, and the
arrays are marked read-only to enforce that.

Token order puts visual rows first, so under the causal mask visual rows
never see text rows, while text rows attend across both modalities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Rng, as_matrix, read_tensor, round_to_f32, write_tensor
from .errors import EmptyGroupError, FormatError, ShapeError

RMS_EPS = 1e-6

WEIGHTS_FORMAT = "autov-rank-interaction"
WEIGHTS_VERSION = 1


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class InteractionWeights:
    """Parameters of the frozen layer. All arrays are read-only float64."""

    d_model: int
    n_heads: int
    d_ff: int
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_ff1: np.ndarray
    b_ff1: np.ndarray
    w_ff2: np.ndarray
    b_ff2: np.ndarray
    norm1_gain: np.ndarray
    norm2_gain: np.ndarray

    def __post_init__(self):
        d, f = self.d_model, self.d_ff
        if d < 1 or f < 1 or self.n_heads < 1:
            raise ShapeError("interaction dims must be positive")
        if d % self.n_heads != 0:
            raise ShapeError(f"n_heads {self.n_heads} must divide d_model {d}")
        shapes = {
            "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
            "w_ff1": (d, f), "b_ff1": (f,), "w_ff2": (f, d), "b_ff2": (d,),
            "norm1_gain": (d,), "norm2_gain": (d,),
        }
        for name, want in shapes.items():
            arr = getattr(self, name)
            if arr.shape != want:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {want}")
            object.__setattr__(self, name, _freeze(arr))

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def tensor_items(self):
        for name in ("wq", "wk", "wv", "wo", "w_ff1", "b_ff1", "w_ff2", "b_ff2",
                     "norm1_gain", "norm2_gain"):
            yield name, getattr(self, name)


def seed_interaction_weights(rng: Rng, d_model: int, n_heads: int = 8,
                             d_ff: int | None = None) -> InteractionWeights:
    """Draw a frozen layer from a seeded stream.

    Matrices are uniform on (-1/sqrt(d_model), 1/sqrt(d_model)), biases are
    zero, norm gains are one. Draw order is fixed (wq, wk, wv, wo, w_ff1,
    w_ff2) so a seed pins the layer exactly. Values are rounded to float32
    so saved weights reload bit-exactly.
    """
    if d_ff is None:
        d_ff = 4 * d_model
    bound = 1.0 / np.sqrt(d_model)
    draw = lambda shape: round_to_f32(rng.uniform(-bound, bound, shape))
    return InteractionWeights(
        d_model=d_model, n_heads=n_heads, d_ff=d_ff,
        wq=draw((d_model, d_model)),
        wk=draw((d_model, d_model)),
        wv=draw((d_model, d_model)),
        wo=draw((d_model, d_model)),
        w_ff1=draw((d_model, d_ff)),
        b_ff1=np.zeros(d_ff),
        w_ff2=draw((d_ff, d_model)),
        b_ff2=np.zeros(d_model),
        norm1_gain=np.ones(d_model),
        norm2_gain=np.ones(d_model),
    )


def _rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    scale = 1.0 / np.sqrt((x * x).mean(axis=1, keepdims=True) + RMS_EPS)
    return x * scale * gain


def _silu(x: np.ndarray) -> np.ndarray:
    # x * sigmoid(x), with the sigmoid split by sign for stability
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = x[pos] / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = x[~pos] * ex / (1.0 + ex)
    return out


def _causal_attention(w: InteractionWeights, xn: np.ndarray) -> np.ndarray:
    n = xn.shape[0]
    hd = w.head_dim
    q = (xn @ w.wq).reshape(n, w.n_heads, hd)
    k = (xn @ w.wk).reshape(n, w.n_heads, hd)
    v = (xn @ w.wv).reshape(n, w.n_heads, hd)
    # (heads, n, n) attention logits with future positions masked off
    logits = np.einsum("ihd,jhd->hij", q, k) / np.sqrt(hd)
    logits = logits + np.triu(np.full((n, n), -np.inf), k=1)
    logits -= logits.max(axis=2, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=2, keepdims=True)
    ctx = np.einsum("hij,jhd->ihd", weights, v).reshape(n, w.d_model)
    return ctx @ w.wo


def interact(w: InteractionWeights, visual, text) -> tuple[np.ndarray, np.ndarray]:
    """Run one candidate's visual tokens and the query text through the layer.

    Returns (interacted_visual, interacted_text): the first l_v and last l_t
    rows of the block output. Pure function of its inputs; candidates never
    see each other.
    """
    visual = as_matrix(visual, "visual tokens")
    text = as_matrix(text, "text tokens")
    if visual.shape[1] != w.d_model or text.shape[1] != w.d_model:
        raise ShapeError(
            f"token width mismatch: visual {visual.shape}, text {text.shape}, "
            f"d_model {w.d_model}"
        )
    l_v = visual.shape[0]
    x = np.vstack([visual, text])
    h1 = x + _causal_attention(w, _rms_norm(x, w.norm1_gain))
    h2 = _rms_norm(h1, w.norm2_gain)
    ffn = _silu(h2 @ w.w_ff1 + w.b_ff1) @ w.w_ff2 + w.b_ff2
    out = h1 + ffn
    return out[:l_v], out[l_v:]


def aggregate_text(slices: list[np.ndarray], mode: str = "mean") -> np.ndarray:
    """Combine per-candidate interacted text slices into one query matrix.

    "mean" averages elementwise across candidates (the default); "product"
    multiplies elementwise instead. All slices must share one shape.
    """
    if len(slices) == 0:
        raise EmptyGroupError("aggregate_text: no text slices given")
    mats = [as_matrix(s, f"text slice {i}") for i, s in enumerate(slices)]
    shape = mats[0].shape
    for i, m in enumerate(mats):
        if m.shape != shape:
            raise ShapeError(f"text slice {i} has shape {m.shape}, expected {shape}")
    stack = np.stack(mats)
    if mode == "mean":
        return stack.mean(axis=0)
    if mode == "product":
        return stack.prod(axis=0)
    raise ValueError(f"unknown aggregation mode {mode!r}")


def save_interaction_weights(w: InteractionWeights, path) -> None:
    """Write the layer as a directory: weights.json header + one AVT1 blob per tensor."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, arr in w.tensor_items():
        blob = f"{name}.avt1"
        write_tensor(path / blob, arr.reshape(1, -1) if arr.ndim == 1 else arr)
        manifest[name] = blob
    header = {
        "format": WEIGHTS_FORMAT,
        "version": WEIGHTS_VERSION,
        "d_model": w.d_model,
        "n_heads": w.n_heads,
        "d_ff": w.d_ff,
        "tensors": manifest,
    }
    (path / "weights.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_interaction_weights(path) -> InteractionWeights:
    path = Path(path)
    header_path = path / "weights.json"
    if not header_path.exists():
        raise FormatError(f"{path}: no weights.json header")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as err:
        raise FormatError(f"{header_path}: unparseable header: {err}") from err
    if header.get("format") != WEIGHTS_FORMAT:
        raise FormatError(f"{header_path}: format {header.get('format')!r} is not {WEIGHTS_FORMAT!r}")
    if header.get("version") != WEIGHTS_VERSION:
        raise FormatError(f"{header_path}: unsupported version {header.get('version')!r}")
    d, f = header["d_model"], header["d_ff"]
    vector_shapes = {"b_ff1": f, "b_ff2": d, "norm1_gain": d, "norm2_gain": d}
    tensors = {}
    for name, blob in header["tensors"].items():
        arr = read_tensor(path / blob)
        if name in vector_shapes:
            arr = arr.reshape(-1)
            if arr.shape[0] != vector_shapes[name]:
                raise FormatError(f"{path}: {name} has length {arr.shape[0]}, expected {vector_shapes[name]}")
        tensors[name] = arr
    try:
        return InteractionWeights(d_model=d, n_heads=header["n_heads"], d_ff=f, **tensors)
    except (TypeError, KeyError) as err:
        raise FormatError(f"{path}: incomplete tensor manifest: {err}") from err
