"""Baseline selection strategies and their trainers.

Every strategy reduces to a Selector: a named map from a candidate group
to a selected index. The scorer-based baselines (regression, list-wise,
pairwise) share the ranker architecture and the Adam update; the gate is
a single linear map over pooled interacted features. Selectors built
from missing components raise at use, not at construction, so a partial
comparison run can still be assembled and fails loudly per strategy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..core import Rng, round_to_f32
from ..errors import EmptyGroupError, StateError
from ..interaction import InteractionWeights
from ..pipeline import CandidateGroup
from ..ranker import RankerParams, batched_backward, batched_forward, init_ranker_params
from ..training import (
    GroupFeatures,
    OptimizerState,
    TrainConfig,
    adam_step,
    prepare_features,
)

# rng stream ids, matching the main trainer's layout
_STREAM_INIT = 0
_STREAM_SHUFFLE = 1
_STREAM_GUMBEL = 2


@dataclass
class Selector:
    """Named selection policy over candidate groups."""

    name: str
    pick: Callable[[CandidateGroup], int] | None = None

    def select(self, group: CandidateGroup) -> int:
        if self.pick is None:
            raise StateError(f"selector {self.name!r} is untrained")
        return self.pick(group)

    def __call__(self, group: CandidateGroup) -> int:
        return self.select(group)


def strategy_fixed(k: int) -> Selector:
    """Always selects slot k; errs on pools too small to have one."""
    if k < 0:
        raise ValueError("fixed slot must be >= 0")

    def pick(group: CandidateGroup) -> int:
        if k >= len(group.candidates):
            raise StateError(
                f"fixed slot {k} out of range for group {group.group_id!r} "
                f"of size {len(group.candidates)}")
        return k

    return Selector(f"fixed({k})", pick)


def strategy_random(seed: int) -> Selector:
    """Uniform pick, keyed by (seed, group_id): stateless and replayable."""

    def pick(group: CandidateGroup) -> int:
        return int(Rng(seed).child(group.group_id).integers(0, len(group.candidates)))

    return Selector(f"random({seed})", pick)


def _scores_for_group(params: RankerParams, weights: InteractionWeights,
                      group: CandidateGroup, variant: str, text_mode: str) -> np.ndarray:
    feats = prepare_features([group], weights, text_mode)[group.group_id]
    v = np.stack(feats.v_tilde)
    if text_mode == "aggregate":
        t = np.repeat(feats.t_tilde[None], len(feats.v_tilde), axis=0)
    else:
        t = np.stack(feats.t_tilde_each)
    scores, _ = batched_forward(params, v, t, variant=variant)
    return scores


def strategy_pairwise(params: RankerParams | None, weights: InteractionWeights | None,
                      variant: str = "attended", text_mode: str = "aggregate") -> Selector:
    if params is None or weights is None:
        return Selector("pairwise")
    return Selector("pairwise", lambda g: int(np.argmax(
        _scores_for_group(params, weights, g, variant, text_mode))))


def strategy_listwise(params: RankerParams | None, weights: InteractionWeights | None,
                      variant: str = "attended", text_mode: str = "aggregate") -> Selector:
    if params is None or weights is None:
        return Selector("listwise")
    return Selector("listwise", lambda g: int(np.argmax(
        _scores_for_group(params, weights, g, variant, text_mode))))


def strategy_regression(params: RankerParams | None, weights: InteractionWeights | None,
                        variant: str = "attended", text_mode: str = "aggregate") -> Selector:
    """Selects the candidate whose predicted absolute loss is lowest."""
    if params is None or weights is None:
        return Selector("regression")
    return Selector("regression", lambda g: int(np.argmin(
        _scores_for_group(params, weights, g, variant, text_mode))))


# ------------------------------------------------------------------
# Gate baseline: softmax over candidates from one linear map on pooled
# interacted features. A shared bias cancels inside the softmax, so the
# gate is a bias-free weight vector.
# ------------------------------------------------------------------

@dataclass
class GateParams:
    w: np.ndarray
    d_model: int


def _pooled_full_sequence(feats: GroupFeatures) -> np.ndarray:
    """Mean over all interacted rows, visual and text, per candidate.

    Pooling only the visual rows would make the gate blind to the query.
    """
    rows = []
    for v, t in zip(feats.v_tilde, feats.t_tilde_each):
        l_v, l_t = v.shape[0], t.shape[0]
        rows.append((v.sum(axis=0) + t.sum(axis=0)) / (l_v + l_t))
    return np.stack(rows)


def strategy_gate(gate: GateParams | None, weights: InteractionWeights | None) -> Selector:
    if gate is None or weights is None:
        return Selector("gate")

    def pick(group: CandidateGroup) -> int:
        feats = prepare_features([group], weights)[group.group_id]
        x = _pooled_full_sequence(feats)
        return int(np.argmax(x @ gate.w))

    return Selector("gate", pick)


def _stacked_candidates(groups: list[CandidateGroup],
                        features: dict[str, GroupFeatures],
                        text_mode: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All candidates flattened: visual (N,l_v,D), text (N,l_t,D), losses (N,)."""
    vs, ts, ys = [], [], []
    for g in groups:
        feats = features[g.group_id]
        for i, c in enumerate(g.candidates):
            vs.append(feats.v_tilde[i])
            ts.append(feats.t_tilde if text_mode == "aggregate" else feats.t_tilde_each[i])
            ys.append(c.loss)
    return np.stack(vs), np.stack(ts), np.asarray(ys, dtype=np.float64)


def train_regression(groups: list[CandidateGroup], weights: InteractionWeights,
                     cfg: TrainConfig, features: dict[str, GroupFeatures] | None = None,
                     h: int = 16, text_mode: str = "aggregate",
                     ) -> tuple[RankerParams, list[float]]:
    """Same architecture as the pairwise head, squared error on stored losses."""
    if not groups:
        raise EmptyGroupError("no groups to train on")
    if features is None:
        features = prepare_features(groups, weights, text_mode)
    v_all, t_all, y_all = _stacked_candidates(groups, features, text_mode)
    rng = Rng(cfg.seed)
    d_model = v_all.shape[2]
    params = init_ranker_params(rng.child(_STREAM_INIT), d_model, h)
    opt = OptimizerState.fresh(params)
    n = v_all.shape[0]
    epoch_losses = []
    for epoch in range(cfg.epochs):
        order = rng.child(_STREAM_SHUFFLE, epoch).permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            scores, tape = batched_forward(params, v_all[idx], t_all[idx],
                                           variant=cfg.score_variant)
            err = scores - y_all[idx]
            total += float(err @ err)
            grads = batched_backward(params, tape, 2.0 * err / idx.size)
            adam_step(params, grads, opt, cfg)
        epoch_losses.append(total / n)
    return params, epoch_losses


def _listwise_grad(scores: np.ndarray, order: np.ndarray) -> tuple[float, np.ndarray]:
    """Plackett-Luce NLL of the given permutation and its score gradient.

    order[0] is the best candidate; stage m picks order[m] from the
    remaining suffix with probability softmax(scores[order[m:]]).
    """
    n = scores.shape[0]
    s = scores[order]
    nll = 0.0
    d_ordered = np.zeros(n)
    for m in range(n - 1):
        suffix = s[m:]
        mx = suffix.max()
        lse = mx + np.log(np.exp(suffix - mx).sum())
        nll += lse - s[m]
        p = np.exp(suffix - lse)
        d_ordered[m:] += p
        d_ordered[m] -= 1.0
    d = np.zeros(n)
    d[order] = d_ordered
    return float(nll), d


def train_listwise(groups: list[CandidateGroup], weights: InteractionWeights,
                   cfg: TrainConfig, features: dict[str, GroupFeatures] | None = None,
                   h: int = 16, text_mode: str = "aggregate",
                   ) -> tuple[RankerParams, list[float]]:
    """Same scorer as pairwise, Plackett-Luce NLL of the loss-ascending order.

    One batch element is a whole group; batch_size counts groups.
    """
    if not groups:
        raise EmptyGroupError("no groups to train on")
    if features is None:
        features = prepare_features(groups, weights, text_mode)
    orders = {}
    for g in groups:
        losses = g.losses()
        orders[g.group_id] = np.array(
            sorted(range(len(losses)), key=lambda i: (losses[i], i)))
    rng = Rng(cfg.seed)
    d_model = features[groups[0].group_id].v_tilde[0].shape[1]
    params = init_ranker_params(rng.child(_STREAM_INIT), d_model, h)
    opt = OptimizerState.fresh(params)
    epoch_losses = []
    for epoch in range(cfg.epochs):
        perm = rng.child(_STREAM_SHUFFLE, epoch).permutation(len(groups))
        total = 0.0
        for start in range(0, len(groups), cfg.batch_size):
            batch = [groups[i] for i in perm[start:start + cfg.batch_size]]
            vs, ts, sizes = [], [], []
            for g in batch:
                feats = features[g.group_id]
                sizes.append(len(g.candidates))
                for i in range(len(g.candidates)):
                    vs.append(feats.v_tilde[i])
                    ts.append(feats.t_tilde if text_mode == "aggregate"
                              else feats.t_tilde_each[i])
            scores, tape = batched_forward(params, np.stack(vs), np.stack(ts),
                                           variant=cfg.score_variant)
            d_scores = np.zeros_like(scores)
            pos = 0
            for g, size in zip(batch, sizes):
                nll, d = _listwise_grad(scores[pos:pos + size], orders[g.group_id])
                total += nll
                d_scores[pos:pos + size] = d / len(batch)
                pos += size
            grads = batched_backward(params, tape, d_scores)
            adam_step(params, grads, opt, cfg)
        epoch_losses.append(total / len(groups))
    return params, epoch_losses


def train_gate(groups: list[CandidateGroup], weights: InteractionWeights,
               cfg: TrainConfig, features: dict[str, GroupFeatures] | None = None,
               tau_start: float = 1.0, tau_end: float = 0.1,
               ) -> tuple[GateParams, list[float]]:
    """Relaxed categorical selection against the group loss vector.

    Per visit, one Gumbel draw relaxes the pick: y = softmax((logits+g)/tau)
    with tau annealed linearly from tau_start to tau_end across epochs; the
    objective is sum(y * losses), whose gradient concentrates on the gate
    weight as tau shrinks.
    """
    if not groups:
        raise EmptyGroupError("no groups to train on")
    if features is None:
        features = prepare_features(groups, weights)
    xs = np.stack([_pooled_full_sequence(features[g.group_id]) for g in groups])
    ys = np.stack([np.asarray(g.losses(), dtype=np.float64) for g in groups])
    n_groups, _, d_model = xs.shape
    rng = Rng(cfg.seed)
    bound = 1.0 / np.sqrt(d_model)
    w = round_to_f32(rng.child(_STREAM_INIT).uniform(-bound, bound, d_model))
    m = np.zeros(d_model)
    v = np.zeros(d_model)
    step = 0
    epoch_losses = []
    for epoch in range(cfg.epochs):
        frac = epoch / (cfg.epochs - 1) if cfg.epochs > 1 else 1.0
        tau = tau_start + (tau_end - tau_start) * frac
        perm = rng.child(_STREAM_SHUFFLE, epoch).permutation(n_groups)
        grng = rng.child(_STREAM_GUMBEL, epoch)
        total = 0.0
        for start in range(0, n_groups, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x, y = xs[idx], ys[idx]
            logits = x @ w
            noisy = (logits + grng.gumbel(logits.shape)) / tau
            noisy = noisy - noisy.max(axis=1, keepdims=True)
            e = np.exp(noisy)
            soft = e / e.sum(axis=1, keepdims=True)
            picked = (soft * y).sum(axis=1)
            total += float(picked.sum())
            d_logits = soft * (y - picked[:, None]) / (tau * idx.size)
            grad = np.einsum("bn,bnd->d", d_logits, x)
            step += 1
            m = m * cfg.beta1 + (1.0 - cfg.beta1) * grad
            v = v * cfg.beta2 + (1.0 - cfg.beta2) * grad * grad
            update = cfg.learning_rate * (m / (1.0 - cfg.beta1 ** step)) \
                / (np.sqrt(v / (1.0 - cfg.beta2 ** step)) + cfg.eps)
            w = round_to_f32(w - update)
            m = round_to_f32(m)
            v = round_to_f32(v)
        epoch_losses.append(total / n_groups)
    return GateParams(w=w, d_model=d_model), epoch_losses
