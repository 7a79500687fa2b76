"""Pairwise reward training of the scoring head over frozen interacted features.

The objective per preference pair is -log sigmoid(s_chosen - s_rejected),
averaged over the batch. Interacted features are precomputed once (the
interaction layer is frozen), training touches only the eight ranker
tensors. Updates are Adam-style with bias correction.

Determinism: the epoch shuffle derives from (seed, epoch), parameters and
moments are rounded to float32 after every step, and checkpoints store
exactly those float32 values, so save/resume reproduces an uninterrupted
run bit for bit.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import Rng, read_tensor, round_to_f32, write_tensor
from .errors import FormatError, StateError, TrainingDivergedError
from .interaction import InteractionWeights, aggregate_text, interact
from .pipeline import CandidateGroup, PreferencePair
from .ranker import (
    RankerParams,
    TENSOR_NAMES,
    batched_backward,
    batched_forward,
    init_ranker_params,
)

CHECKPOINT_FORMAT = "autov-rank-train"
CHECKPOINT_VERSION = 1

# rng stream ids under the training seed
_STREAM_INIT = 0
_STREAM_SHUFFLE = 1


def reward_loss(s_chosen: float, s_rejected: float) -> float:
    """-log sigmoid(s_chosen - s_rejected), numerically stable at any gap.

    Equal scores give ln 2; a strongly positive gap decays like exp(-gap).
    Depends only on the score difference.
    """
    d = s_chosen - s_rejected
    # softplus(-d) = log(1 + exp(-d)) without overflow on either side
    return float(np.log1p(np.exp(-abs(d))) + max(0.0, -d))


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 40
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_accum_steps: int = 1
    score_variant: str = "attended"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.grad_accum_steps < 1:
            raise ValueError("batch_size and grad_accum_steps must be >= 1, epochs >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")


@dataclass
class OptimizerState:
    """First and second Adam moments per tensor, plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    epochs_completed: int = 0

    @classmethod
    def fresh(cls, params: RankerParams) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(arr) for name, arr in params.tensor_items()},
            v={name: np.zeros_like(arr) for name, arr in params.tensor_items()},
        )


def adam_step(params: RankerParams, grads, opt: OptimizerState, cfg: TrainConfig) -> None:
    """One in-place Adam update. State is rounded to float32 after the step."""
    opt.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bias1 = 1.0 - b1 ** opt.step
    bias2 = 1.0 - b2 ** opt.step
    for name, g in grads.tensor_items():
        if not np.isfinite(g).all():
            raise TrainingDivergedError(f"non-finite gradient in {name} at step {opt.step}")
        m = opt.m[name] * b1 + (1.0 - b1) * g
        v = opt.v[name] * b2 + (1.0 - b2) * (g * g)
        update = cfg.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
        opt.m[name] = round_to_f32(m)
        opt.v[name] = round_to_f32(v)
        arr = getattr(params, name)
        setattr(params, name, round_to_f32(arr - update))


@dataclass
class GroupFeatures:
    """Frozen interacted features for one group: per-candidate visual, shared text."""

    v_tilde: list[np.ndarray]
    t_tilde: np.ndarray            # aggregated across candidates
    t_tilde_each: list[np.ndarray]  # per-candidate text slices


def prepare_features(groups: list[CandidateGroup], weights: InteractionWeights,
                     text_mode: str = "aggregate") -> dict[str, GroupFeatures]:
    """Run every candidate through the frozen layer once.

    text_mode "aggregate" (default) averages the per-candidate text slices
    into one query matrix per group; "per-candidate" keeps each candidate's
    own slice for scoring.
    """
    if text_mode not in ("aggregate", "per-candidate"):
        raise ValueError(f"unknown text_mode {text_mode!r}")
    out = {}
    for g in groups:
        v_slices, t_slices = [], []
        for c in g.candidates:
            v_t, t_t = interact(weights, c.tokens, g.query)
            v_slices.append(v_t)
            t_slices.append(t_t)
        out[g.group_id] = GroupFeatures(
            v_tilde=v_slices,
            t_tilde=aggregate_text(t_slices),
            t_tilde_each=t_slices,
        )
    return out


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    eval_accuracies: list[float | None] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    epochs_completed: int = 0


def _stack_pairs(pairs, features, text_mode):
    """Assemble (chosen, rejected, text) feature stacks for a list of pairs."""
    v_c = np.stack([features[p.group_id].v_tilde[p.chosen] for p in pairs])
    v_r = np.stack([features[p.group_id].v_tilde[p.rejected] for p in pairs])
    if text_mode == "per-candidate":
        t_c = np.stack([features[p.group_id].t_tilde_each[p.chosen] for p in pairs])
        t_r = np.stack([features[p.group_id].t_tilde_each[p.rejected] for p in pairs])
    else:
        t_c = np.stack([features[p.group_id].t_tilde for p in pairs])
        t_r = t_c
    return v_c, v_r, t_c, t_r


def pairwise_accuracy(params: RankerParams, pairs: list[PreferencePair],
                      features: dict[str, GroupFeatures], variant: str = "attended",
                      text_mode: str = "aggregate", batch_size: int = 512) -> float:
    """Fraction of pairs whose chosen side strictly outscores the rejected side."""
    if not pairs:
        raise StateError("pairwise_accuracy: no pairs given")
    correct = 0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        v_c, v_r, t_c, t_r = _stack_pairs(chunk, features, text_mode)
        s_c, _ = batched_forward(params, v_c, t_c, variant)
        s_r, _ = batched_forward(params, v_r, t_r, variant)
        correct += int((s_c > s_r).sum())
    return correct / len(pairs)


def train(pairs: list[PreferencePair], groups: list[CandidateGroup],
          weights: InteractionWeights, cfg: TrainConfig,
          eval_pairs: list[PreferencePair] | None = None,
          params: RankerParams | None = None,
          opt_state: OptimizerState | None = None,
          features: dict[str, GroupFeatures] | None = None,
          h: int = 16, text_mode: str = "aggregate",
          log_fn=None) -> tuple[RankerParams, OptimizerState, TrainReport]:
    """Optimize the scoring head on preference pairs.

    Resumes when params/opt_state come from a checkpoint: training continues
    at opt_state.epochs_completed and stops at cfg.epochs total.
    """
    if not pairs:
        raise StateError("train: no preference pairs given")
    if features is None:
        features = prepare_features(groups, weights, text_mode)
    for p in pairs:
        if p.group_id not in features:
            raise StateError(f"train: pair references unknown group {p.group_id!r}")
    for p in eval_pairs or ():
        if p.group_id not in features:
            raise StateError(f"train: eval pair references unknown group {p.group_id!r}")

    rng = Rng(cfg.seed)
    if params is None:
        params = init_ranker_params(rng.child(_STREAM_INIT), weights.d_model, h)
    if opt_state is None:
        opt_state = OptimizerState.fresh(params)

    report = TrainReport(epochs_completed=opt_state.epochs_completed)
    micro = max(1, cfg.batch_size // cfg.grad_accum_steps)

    for epoch in range(opt_state.epochs_completed, cfg.epochs):
        t0 = time.perf_counter()
        perm = rng.child(_STREAM_SHUFFLE, epoch).permutation(len(pairs))
        epoch_loss = 0.0
        seen = 0
        for start in range(0, len(pairs), cfg.batch_size):
            batch_idx = perm[start:start + cfg.batch_size]
            batch = [pairs[i] for i in batch_idx]
            grads = None
            batch_loss = 0.0
            for mstart in range(0, len(batch), micro):
                chunk = batch[mstart:mstart + micro]
                v_c, v_r, t_c, t_r = _stack_pairs(chunk, features, text_mode)
                s_c, tape_c = batched_forward(params, v_c, t_c, cfg.score_variant)
                s_r, tape_r = batched_forward(params, v_r, t_r, cfg.score_variant)
                gap = s_c - s_r
                losses = np.log1p(np.exp(-np.abs(gap))) + np.maximum(0.0, -gap)
                if not np.isfinite(losses).all():
                    bad = int(np.argmax(~np.isfinite(losses)))
                    pair = chunk[bad]
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch} batch {start // cfg.batch_size} "
                        f"(group {pair.group_id}, {pair.chosen} vs {pair.rejected})"
                    )
                batch_loss += float(losses.sum())
                sig = 1.0 / (1.0 + np.exp(-np.clip(gap, -60.0, 60.0)))
                d_c = (sig - 1.0) / len(batch)
                g = batched_backward(params, tape_c, d_c)
                g.add_(batched_backward(params, tape_r, -d_c))
                grads = g if grads is None else grads.add_(g)
            adam_step(params, grads, opt_state, cfg)
            epoch_loss += batch_loss
            seen += len(batch)
        opt_state.epochs_completed = epoch + 1
        mean_loss = epoch_loss / max(1, seen)
        accuracy = None
        if eval_pairs:
            accuracy = pairwise_accuracy(params, eval_pairs, features,
                                         cfg.score_variant, text_mode)
        seconds = time.perf_counter() - t0
        report.epoch_losses.append(mean_loss)
        report.eval_accuracies.append(accuracy)
        report.epoch_seconds.append(seconds)
        report.epochs_completed = epoch + 1
        if log_fn is not None:
            acc_txt = "-" if accuracy is None else f"{accuracy:.4f}"
            log_fn(f"{epoch}\t{mean_loss:.6f}\t{acc_txt}\t{seconds:.2f}")
    return params, opt_state, report


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(params: RankerParams, opt_state: OptimizerState,
                    cfg: TrainConfig, path) -> None:
    """Write params, moments, and config as a directory of AVT1 blobs + header."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, arr in params.tensor_items():
        blob = f"{name}.avt1"
        write_tensor(path / blob, arr.reshape(1, -1) if arr.ndim == 1 else arr)
        manifest[name] = blob
    for name in TENSOR_NAMES:
        for prefix, bank in (("m", opt_state.m), ("v", opt_state.v)):
            blob = f"{prefix}_{name}.avt1"
            arr = bank[name]
            write_tensor(path / blob, arr.reshape(1, -1) if arr.ndim == 1 else arr)
            manifest[f"{prefix}_{name}"] = blob
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "d_model": params.d_model,
        "h": params.h,
        "activation": params.activation,
        "step": opt_state.step,
        "epochs_completed": opt_state.epochs_completed,
        "train_config": asdict(cfg),
        "tensors": manifest,
    }
    (path / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[RankerParams, OptimizerState, TrainConfig]:
    path = Path(path)
    header_path = path / "header.json"
    if not header_path.exists():
        raise FormatError(f"{path}: no header.json")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as err:
        raise FormatError(f"{header_path}: unparseable header: {err}") from err
    if header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(
            f"{header_path}: format {header.get('format')!r} is not {CHECKPOINT_FORMAT!r}"
        )
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{header_path}: unsupported version {header.get('version')!r}")
    h = header["h"]

    def load_blob(key, vector):
        blob = header["tensors"].get(key)
        if blob is None:
            raise FormatError(f"{path}: tensor {key!r} missing from manifest")
        arr = read_tensor(path / blob)
        return arr.reshape(-1) if vector else arr

    tensors = {
        name: load_blob(name, name.startswith("b")) for name in TENSOR_NAMES
    }
    params = RankerParams(
        d_model=header["d_model"], h=h, activation=header["activation"], **tensors
    )
    opt = OptimizerState(
        m={name: load_blob(f"m_{name}", name.startswith("b")) for name in TENSOR_NAMES},
        v={name: load_blob(f"v_{name}", name.startswith("b")) for name in TENSOR_NAMES},
        step=int(header["step"]),
        epochs_completed=int(header["epochs_completed"]),
    )
    cfg = TrainConfig(**header["train_config"])
    return params, opt, cfg
