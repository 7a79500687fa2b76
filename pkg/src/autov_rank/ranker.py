"""Trainable scoring head: two mapping FFNs plus a parameter-free cross-attention.

A candidate's interacted visual tokens and the (aggregated) interacted text
tokens each pass through their own two-layer FFN into a shared width h. The
score is the mean over every entry of the cross-attention readout

    s = mean( row_softmax(V' T'^T / sqrt(h)) @ T' )

so the only trainable parameters are the eight FFN tensors: per stream a
(d_model, h) and an (h, h) matrix with bias vectors, h * (d_model + 1) +
h * (h + 1) parameters each, 2 h (d_model + h + 2) in total.

Gradients are derived by hand; `ScoreTape` caches every intermediate the
backward pass needs. Forward and backward run in float64 end to end so
central finite differences validate the analytic gradients tightly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Rng, as_matrix, read_tensor, round_to_f32, write_tensor
from .errors import FormatError, ShapeError, StateError
from .interaction import InteractionWeights, interact

CHECKPOINT_FORMAT = "autov-rank-ranker"
CHECKPOINT_VERSION = 1

TENSOR_NAMES = ("w1_v", "b1_v", "w2_v", "b2_v", "w1_t", "b1_t", "w2_t", "b2_t")


def _relu(x):
    return np.maximum(0.0, x)


def _relu_grad(x):
    # convention: derivative 0 at the kink
    return (x > 0.0).astype(np.float64)


def _silu(x):
    sig = 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))
    return x * sig


def _silu_grad(x):
    sig = 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))
    return sig * (1.0 + x * (1.0 - sig))


ACTIVATIONS = {"relu": (_relu, _relu_grad), "silu": (_silu, _silu_grad)}

# Score variants: "attended" averages the cross-attention output, "logits"
# averages the raw attention logits instead.
SCORE_VARIANTS = ("attended", "logits")


@dataclass
class RankerParams:
    """The eight trainable tensors plus their dimensions."""

    d_model: int
    h: int
    w1_v: np.ndarray
    b1_v: np.ndarray
    w2_v: np.ndarray
    b2_v: np.ndarray
    w1_t: np.ndarray
    b1_t: np.ndarray
    w2_t: np.ndarray
    b2_t: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.h < 1 or self.d_model < 1:
            raise ShapeError("ranker dims must be positive")
        if self.h > self.d_model:
            raise ShapeError(f"h {self.h} must not exceed d_model {self.d_model}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        d, h = self.d_model, self.h
        shapes = {
            "w1_v": (d, h), "b1_v": (h,), "w2_v": (h, h), "b2_v": (h,),
            "w1_t": (d, h), "b1_t": (h,), "w2_t": (h, h), "b2_t": (h,),
        }
        for name, want in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != want:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {want}")
            setattr(self, name, arr)

    def tensor_items(self):
        for name in TENSOR_NAMES:
            yield name, getattr(self, name)

    def param_count(self) -> int:
        return sum(arr.size for _, arr in self.tensor_items())

    def copy(self) -> "RankerParams":
        return RankerParams(
            d_model=self.d_model, h=self.h, activation=self.activation,
            **{name: arr.copy() for name, arr in self.tensor_items()},
        )


def init_ranker_params(rng: Rng, d_model: int, h: int, activation: str = "relu") -> RankerParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) matrices, zero biases.

    With zero biases every score starts at 0.0, so the pairwise loss starts
    at ln 2. Draws are rounded to float32 so checkpoints reload bit-exactly.
    """
    bd = 1.0 / np.sqrt(d_model)
    bh = 1.0 / np.sqrt(h)
    return RankerParams(
        d_model=d_model, h=h, activation=activation,
        w1_v=round_to_f32(rng.uniform(-bd, bd, (d_model, h))),
        b1_v=np.zeros(h),
        w2_v=round_to_f32(rng.uniform(-bh, bh, (h, h))),
        b2_v=np.zeros(h),
        w1_t=round_to_f32(rng.uniform(-bd, bd, (d_model, h))),
        b1_t=np.zeros(h),
        w2_t=round_to_f32(rng.uniform(-bh, bh, (h, h))),
        b2_t=np.zeros(h),
    )


@dataclass
class RankerGrads:
    """Gradient accumulator with the same eight tensor shapes as the params."""

    w1_v: np.ndarray
    b1_v: np.ndarray
    w2_v: np.ndarray
    b2_v: np.ndarray
    w1_t: np.ndarray
    b1_t: np.ndarray
    w2_t: np.ndarray
    b2_t: np.ndarray

    @classmethod
    def zeros_like(cls, p: RankerParams) -> "RankerGrads":
        return cls(**{name: np.zeros_like(arr) for name, arr in p.tensor_items()})

    def tensor_items(self):
        for name in TENSOR_NAMES:
            yield name, getattr(self, name)

    def add_(self, other: "RankerGrads") -> "RankerGrads":
        for name, arr in other.tensor_items():
            getattr(self, name).__iadd__(arr)
        return self

    def scale_(self, k: float) -> "RankerGrads":
        for _, arr in self.tensor_items():
            arr *= k
        return self

    def max_abs(self) -> float:
        return max(float(np.abs(arr).max()) for _, arr in self.tensor_items())


@dataclass
class ScoreTape:
    """Cached intermediates from one scoring pass, consumed by the backward pass."""

    d_model: int
    h: int
    variant: str
    v_tilde: np.ndarray
    t_tilde: np.ndarray
    pre_v: np.ndarray
    act_v: np.ndarray
    v_prime: np.ndarray
    pre_t: np.ndarray
    act_t: np.ndarray
    t_prime: np.ndarray
    attn: np.ndarray
    attended: np.ndarray
    score: float


def map_vision(p: RankerParams, v_tilde) -> np.ndarray:
    """Apply the vision mapping FFN: act(X W1 + b1) W2 + b2."""
    v = as_matrix(v_tilde, "interacted visual tokens")
    if v.shape[1] != p.d_model:
        raise ShapeError(f"visual width {v.shape[1]} != d_model {p.d_model}")
    act = ACTIVATIONS[p.activation][0]
    return act(v @ p.w1_v + p.b1_v) @ p.w2_v + p.b2_v


def map_text(p: RankerParams, t_tilde) -> np.ndarray:
    """Apply the text mapping FFN: act(X W1 + b1) W2 + b2."""
    t = as_matrix(t_tilde, "interacted text tokens")
    if t.shape[1] != p.d_model:
        raise ShapeError(f"text width {t.shape[1]} != d_model {p.d_model}")
    act = ACTIVATIONS[p.activation][0]
    return act(t @ p.w1_t + p.b1_t) @ p.w2_t + p.b2_t


def score(p: RankerParams, v_prime, t_prime, variant: str = "attended") -> float:
    """Score mapped features with the parameter-free cross-attention readout."""
    v = as_matrix(v_prime, "mapped visual tokens")
    t = as_matrix(t_prime, "mapped text tokens")
    if v.shape[1] != p.h or t.shape[1] != p.h:
        raise ShapeError(f"mapped widths {v.shape[1]}/{t.shape[1]} != h {p.h}")
    if variant not in SCORE_VARIANTS:
        raise ValueError(f"unknown score variant {variant!r}")
    z = v @ t.T / np.sqrt(p.h)
    if variant == "logits":
        return float(z.mean())
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    a = e / e.sum(axis=1, keepdims=True)
    return float((a @ t).mean())


def forward(p: RankerParams, v_tilde, t_tilde, variant: str = "attended") -> tuple[float, ScoreTape]:
    """Full scoring pass from interacted features, returning score and tape.

    The whole chain runs in float64 without intermediate rounding; the tape
    holds exactly the arrays the hand-derived backward pass consumes.
    """
    v_tilde = as_matrix(v_tilde, "interacted visual tokens")
    t_tilde = as_matrix(t_tilde, "interacted text tokens")
    if v_tilde.shape[1] != p.d_model or t_tilde.shape[1] != p.d_model:
        raise ShapeError(
            f"feature widths {v_tilde.shape[1]}/{t_tilde.shape[1]} != d_model {p.d_model}"
        )
    if variant not in SCORE_VARIANTS:
        raise ValueError(f"unknown score variant {variant!r}")
    act = ACTIVATIONS[p.activation][0]
    pre_v = v_tilde @ p.w1_v + p.b1_v
    act_v = act(pre_v)
    v_prime = act_v @ p.w2_v + p.b2_v
    pre_t = t_tilde @ p.w1_t + p.b1_t
    act_t = act(pre_t)
    t_prime = act_t @ p.w2_t + p.b2_t
    z = v_prime @ t_prime.T / np.sqrt(p.h)
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    attn = e / e.sum(axis=1, keepdims=True)
    attended = attn @ t_prime
    s = float(z.mean()) if variant == "logits" else float(attended.mean())
    tape = ScoreTape(
        d_model=p.d_model, h=p.h, variant=variant,
        v_tilde=v_tilde, t_tilde=t_tilde,
        pre_v=pre_v, act_v=act_v, v_prime=v_prime,
        pre_t=pre_t, act_t=act_t, t_prime=t_prime,
        attn=attn, attended=attended, score=s,
    )
    return s, tape


def score_candidate(p: RankerParams, w: InteractionWeights, visual, text,
                    variant: str = "attended") -> float:
    """End-to-end score of one candidate: interact, map both streams, score."""
    v_tilde, t_tilde = interact(w, visual, text)
    return forward(p, v_tilde, t_tilde, variant)[0]


def _check_tape(p: RankerParams, tape: ScoreTape) -> None:
    if tape.d_model != p.d_model or tape.h != p.h:
        raise StateError(
            f"tape dims ({tape.d_model}, {tape.h}) do not match params "
            f"({p.d_model}, {p.h})"
        )


def score_backward(p: RankerParams, tape: ScoreTape, d_score: float) -> RankerGrads:
    """Gradient of d_score * score with respect to every parameter tensor."""
    _check_tape(p, tape)
    dact = ACTIVATIONS[p.activation][1]
    l_v, l_t = tape.v_tilde.shape[0], tape.t_tilde.shape[0]
    inv_sqrt_h = 1.0 / np.sqrt(p.h)

    if tape.variant == "logits":
        dz = np.full((l_v, l_t), d_score / (l_v * l_t))
        d_vp = dz @ tape.t_prime * inv_sqrt_h
        d_tp = dz.T @ tape.v_prime * inv_sqrt_h
    else:
        d_o = np.full((l_v, p.h), d_score / (l_v * p.h))
        d_a = d_o @ tape.t_prime.T
        d_tp = tape.attn.T @ d_o
        # softmax backward, row-wise: dz = a * (da - sum(da * a))
        dz = tape.attn * (d_a - (d_a * tape.attn).sum(axis=1, keepdims=True))
        d_vp = dz @ tape.t_prime * inv_sqrt_h
        d_tp = d_tp + dz.T @ tape.v_prime * inv_sqrt_h

    d_act_v = d_vp @ p.w2_v.T
    d_pre_v = d_act_v * dact(tape.pre_v)
    d_act_t = d_tp @ p.w2_t.T
    d_pre_t = d_act_t * dact(tape.pre_t)
    return RankerGrads(
        w1_v=tape.v_tilde.T @ d_pre_v,
        b1_v=d_pre_v.sum(axis=0),
        w2_v=tape.act_v.T @ d_vp,
        b2_v=d_vp.sum(axis=0),
        w1_t=tape.t_tilde.T @ d_pre_t,
        b1_t=d_pre_t.sum(axis=0),
        w2_t=tape.act_t.T @ d_tp,
        b2_t=d_tp.sum(axis=0),
    )


def pair_loss_score_grads(s_chosen: float, s_rejected: float) -> tuple[float, float]:
    """d/ds of -log sigmoid(s_chosen - s_rejected) for both scores.

    At s_chosen == s_rejected this is (-0.5, +0.5).
    """
    d = s_chosen - s_rejected
    # sigmoid split by sign for stability
    if d >= 0:
        sig = 1.0 / (1.0 + np.exp(-d))
    else:
        e = np.exp(d)
        sig = e / (1.0 + e)
    return sig - 1.0, 1.0 - sig


def backward(p: RankerParams, tape_chosen: ScoreTape, tape_rejected: ScoreTape,
             upstream: float = 1.0) -> RankerGrads:
    """Gradients of the pairwise loss -log sigmoid(s_c - s_r), scaled by upstream.

    Both branches contribute: the text mapping FFN sees gradient from the
    chosen and the rejected pass alike.
    """
    _check_tape(p, tape_chosen)
    _check_tape(p, tape_rejected)
    d_c, d_r = pair_loss_score_grads(tape_chosen.score, tape_rejected.score)
    grads = score_backward(p, tape_chosen, d_c * upstream)
    grads.add_(score_backward(p, tape_rejected, d_r * upstream))
    return grads


# ------------------------------------------------------------------
# Batched variants. Same math with a leading batch axis; the training
# loops use these, and tests pin them to the per-instance ops above.
# ------------------------------------------------------------------

@dataclass
class BatchTape:
    d_model: int
    h: int
    variant: str
    v_tilde: np.ndarray   # (B, l_v, D)
    t_tilde: np.ndarray   # (B, l_t, D)
    pre_v: np.ndarray
    act_v: np.ndarray
    v_prime: np.ndarray
    pre_t: np.ndarray
    act_t: np.ndarray
    t_prime: np.ndarray
    attn: np.ndarray
    scores: np.ndarray    # (B,)


def batched_forward(p: RankerParams, v_tilde: np.ndarray, t_tilde: np.ndarray,
                    variant: str = "attended") -> tuple[np.ndarray, BatchTape]:
    """Vectorized `forward` over a leading batch axis."""
    v = np.asarray(v_tilde, dtype=np.float64)
    t = np.asarray(t_tilde, dtype=np.float64)
    if v.ndim != 3 or t.ndim != 3 or v.shape[0] != t.shape[0]:
        raise ShapeError(f"batched inputs must be (B, l, D), got {v.shape} and {t.shape}")
    if v.shape[2] != p.d_model or t.shape[2] != p.d_model:
        raise ShapeError(f"feature widths {v.shape[2]}/{t.shape[2]} != d_model {p.d_model}")
    act = ACTIVATIONS[p.activation][0]
    pre_v = v @ p.w1_v + p.b1_v
    act_v = act(pre_v)
    v_prime = act_v @ p.w2_v + p.b2_v
    pre_t = t @ p.w1_t + p.b1_t
    act_t = act(pre_t)
    t_prime = act_t @ p.w2_t + p.b2_t
    z = np.einsum("bvh,bth->bvt", v_prime, t_prime) / np.sqrt(p.h)
    if variant == "logits":
        scores = z.mean(axis=(1, 2))
        attn = np.zeros_like(z)
    else:
        shifted = z - z.max(axis=2, keepdims=True)
        e = np.exp(shifted)
        attn = e / e.sum(axis=2, keepdims=True)
        scores = np.einsum("bvt,bth->bvh", attn, t_prime).mean(axis=(1, 2))
    tape = BatchTape(
        d_model=p.d_model, h=p.h, variant=variant,
        v_tilde=v, t_tilde=t, pre_v=pre_v, act_v=act_v, v_prime=v_prime,
        pre_t=pre_t, act_t=act_t, t_prime=t_prime, attn=attn, scores=scores,
    )
    return scores, tape


def batched_backward(p: RankerParams, tape: BatchTape, d_scores: np.ndarray) -> RankerGrads:
    """Vectorized `score_backward`, summed over the batch."""
    if tape.d_model != p.d_model or tape.h != p.h:
        raise StateError("tape dims do not match params")
    ds = np.asarray(d_scores, dtype=np.float64)
    if ds.shape != tape.scores.shape:
        raise ShapeError(f"d_scores shape {ds.shape} != scores shape {tape.scores.shape}")
    dact = ACTIVATIONS[p.activation][1]
    b, l_v, _ = tape.v_tilde.shape
    l_t = tape.t_tilde.shape[1]
    inv_sqrt_h = 1.0 / np.sqrt(p.h)

    if tape.variant == "logits":
        dz = (ds / (l_v * l_t))[:, None, None] * np.ones((b, l_v, l_t))
        d_vp = np.einsum("bvt,bth->bvh", dz, tape.t_prime) * inv_sqrt_h
        d_tp = np.einsum("bvt,bvh->bth", dz, tape.v_prime) * inv_sqrt_h
    else:
        d_o = (ds / (l_v * p.h))[:, None, None] * np.ones((b, l_v, p.h))
        d_a = np.einsum("bvh,bth->bvt", d_o, tape.t_prime)
        d_tp = np.einsum("bvt,bvh->bth", tape.attn, d_o)
        dz = tape.attn * (d_a - (d_a * tape.attn).sum(axis=2, keepdims=True))
        d_vp = np.einsum("bvt,bth->bvh", dz, tape.t_prime) * inv_sqrt_h
        d_tp = d_tp + np.einsum("bvt,bvh->bth", dz, tape.v_prime) * inv_sqrt_h

    d_act_v = d_vp @ p.w2_v.T
    d_pre_v = d_act_v * dact(tape.pre_v)
    d_act_t = d_tp @ p.w2_t.T
    d_pre_t = d_act_t * dact(tape.pre_t)
    return RankerGrads(
        w1_v=np.einsum("bvd,bvh->dh", tape.v_tilde, d_pre_v),
        b1_v=d_pre_v.sum(axis=(0, 1)),
        w2_v=np.einsum("bvh,bvk->hk", tape.act_v, d_vp),
        b2_v=d_vp.sum(axis=(0, 1)),
        w1_t=np.einsum("btd,bth->dh", tape.t_tilde, d_pre_t),
        b1_t=d_pre_t.sum(axis=(0, 1)),
        w2_t=np.einsum("bth,btk->hk", tape.act_t, d_tp),
        b2_t=d_tp.sum(axis=(0, 1)),
    )


# ------------------------------------------------------------------ checkpoints

def save_ranker_params(p: RankerParams, path, extra_header: dict | None = None) -> None:
    """Write params as a directory: header.json plus one AVT1 blob per tensor."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, arr in p.tensor_items():
        blob = f"{name}.avt1"
        write_tensor(path / blob, arr.reshape(1, -1) if arr.ndim == 1 else arr)
        manifest[name] = blob
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "d_model": p.d_model,
        "h": p.h,
        "activation": p.activation,
        "tensors": manifest,
    }
    if extra_header:
        header.update(extra_header)
    (path / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def read_ranker_header(path) -> dict:
    header_path = Path(path) / "header.json"
    if not header_path.exists():
        raise FormatError(f"{path}: no header.json")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as err:
        raise FormatError(f"{header_path}: unparseable header: {err}") from err
    if header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{header_path}: format {header.get('format')!r} is not {CHECKPOINT_FORMAT!r}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{header_path}: unsupported version {header.get('version')!r}")
    return header


def load_ranker_params(path) -> RankerParams:
    path = Path(path)
    header = read_ranker_header(path)
    h = header["h"]
    tensors = {}
    for name in TENSOR_NAMES:
        blob = header["tensors"].get(name)
        if blob is None:
            raise FormatError(f"{path}: tensor {name!r} missing from manifest")
        arr = read_tensor(path / blob)
        if name.startswith("b"):
            arr = arr.reshape(-1)
            if arr.shape[0] != h:
                raise FormatError(f"{path}: {name} has length {arr.shape[0]}, expected {h}")
        tensors[name] = arr
    return RankerParams(
        d_model=header["d_model"], h=h, activation=header["activation"], **tensors
    )
