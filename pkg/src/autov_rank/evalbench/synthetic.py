"""Synthetic candidate pools with a planted, exactly recomputable truth.

Each dataset hides a low-rank bilinear map M and a fixed unit vector g.
A group's preferred direction blends g with the normalized image of its
query under M; the stored loss of a candidate is softplus of the negated
alignment between its pooled tokens and that direction, plus optional
Gaussian noise. Selection quality is therefore known exactly, which is
what the benchmark trades realism for.

Two design choices keep the planted signal learnable by a small scorer
within a fixed epoch budget:

* The preferred direction keeps a large shared component (GLOBAL_MIX).
  If the direction is resampled freely per group, chosen and rejected
  candidates look identical on average and the early training signal of
  a pairwise objective cancels out; the shared component gives training
  a population-level direction to latch onto while the query-specific
  part still moves the oracle per group.
* Per-candidate noise is drawn orthogonal to the preferred direction, so
  within a group the planted ordering is exactly the mixing order and
  near-ties cannot be manufactured by noise along the scored axis.

Candidates within a group are graded mixtures of a shared aligned base
and per-candidate noise. The mixing weight plays the role of prompt
quality: high-weight candidates sit near the pool consensus AND align
with the query, so the pool's farthest member is almost never its best
one. Pools of mutually independent draws do not have that property (the
best candidate is as likely as any to sit farthest out), and they make
the robustness claims about prefiltering untestable. Slot order within
a group is shuffled so the oracle best lands uniformly across slots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import Rng, mean_pool, round_to_f32
from ..pipeline import Candidate, CandidateGroup

# Pool structure: the candidate in mix rank r blends the shared base with
# weight roughly linspace(MIX_HIGH, MIX_LOW)[r], jittered. BASE_ALIGNMENT
# shifts the base along the group's preferred direction, which is what
# makes high-mix candidates good ones. The anchor is one more shared
# direction added to every candidate equally: it floors within-pool
# cosines well above zero (so an orthogonal-subspace outlier is always
# the farthest member by a wide margin) without moving any candidate's
# alignment relative to its peers.
BASE_ALIGNMENT = 3.5
ANCHOR_SCALE = 2.5
MIX_HIGH = 0.95
MIX_LOW = 0.15
MIX_JITTER = 0.04
GLOBAL_MIX = 0.92


@dataclass
class SyntheticConfig:
    d_model: int = 64
    h_true: int = 8
    l_v: int = 8
    l_t: int = 4
    n: int = 4
    train_groups: int = 2000
    test_groups: int = 500
    noise_std: float = 0.0
    # Scale of a heavy-tailed per-group loss shift modeling query
    # difficulty. Every candidate in a group moves by the same amount, so
    # within-group order, preference pairs, agreement, and regret are all
    # unchanged; only absolute loss values get harder to predict.
    group_offset_std: float = 0.0
    seed: int = 0
    # False keeps candidates in mixing order (slot 0 best), for
    # selection-distribution diagnostics on deliberately skewed pools.
    slot_shuffle: bool = True

    def __post_init__(self):
        if min(self.d_model, self.h_true, self.l_v, self.l_t) < 1:
            raise ValueError("dimensions must be positive")
        if self.n < 2:
            raise ValueError("pool size n must be >= 2")
        if self.train_groups < 1 or self.test_groups < 1:
            raise ValueError("group counts must be >= 1")
        if self.noise_std < 0 or self.group_offset_std < 0:
            raise ValueError("noise scales must be >= 0")


@dataclass
class SyntheticDataset:
    config: SyntheticConfig
    train: list[CandidateGroup] = field(default_factory=list)
    test: list[CandidateGroup] = field(default_factory=list)
    planted_map: np.ndarray | None = None
    global_direction: np.ndarray | None = None


def planted_map(rng: Rng, d_model: int, h_true: int) -> np.ndarray:
    """Rank-h_true bilinear map, scaled so alignments stay O(1)."""
    a = rng.child("a").standard_normal((d_model, h_true))
    b = rng.child("b").standard_normal((d_model, h_true))
    return round_to_f32(a @ b.T / np.sqrt(d_model * h_true))


def global_direction(rng: Rng, d_model: int) -> np.ndarray:
    g = rng.standard_normal(d_model)
    return round_to_f32(g / np.linalg.norm(g))


def preferred_direction(m: np.ndarray, g: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Unit direction the group's losses are measured against."""
    image = m @ mean_pool(query)
    norm = np.linalg.norm(image)
    query_part = image / norm if norm > 0 else g
    d = GLOBAL_MIX * g + np.sqrt(1.0 - GLOBAL_MIX**2) * query_part
    return d / np.linalg.norm(d)


def alignment(direction: np.ndarray, tokens) -> float:
    return float(mean_pool(tokens) @ direction)


def planted_loss(direction: np.ndarray, tokens) -> float:
    """Noise-free loss: softplus of the negated planted alignment."""
    return float(np.logaddexp(0.0, -alignment(direction, tokens)))


def _make_group(group_id: str, grng: Rng, m: np.ndarray, g: np.ndarray,
                cfg: SyntheticConfig):
    query = round_to_f32(grng.child("t").standard_normal((cfg.l_t, cfg.d_model)))
    direction = preferred_direction(m, g, query)
    base = grng.child("base").standard_normal((cfg.l_v, cfg.d_model))
    base = base + BASE_ALIGNMENT * direction
    anchor = grng.child("anchor").standard_normal(cfg.d_model)
    anchor = ANCHOR_SCALE * anchor / np.linalg.norm(anchor)
    mix = np.linspace(MIX_HIGH, MIX_LOW, cfg.n)
    mix = mix + grng.child("mix").uniform(-MIX_JITTER, MIX_JITTER, cfg.n)
    mix = np.clip(mix, 0.05, 0.98)
    if cfg.slot_shuffle:
        order = grng.child("perm").permutation(cfg.n)
    else:
        order = np.arange(cfg.n)
    noise = cfg.noise_std * grng.child("noise").standard_normal(cfg.n)
    offset = 0.0
    if cfg.group_offset_std > 0:
        # lognormal with unit mean times the scale: mostly small shifts,
        # occasionally several times the within-group loss range
        xi = float(grng.child("offset").standard_normal(1)[0])
        offset = cfg.group_offset_std * float(np.exp(1.2 * xi - 0.72))
    cands = []
    for j in range(cfg.n):
        w = mix[order[j]]
        own = grng.child("cand", j).standard_normal((cfg.l_v, cfg.d_model))
        own = own - np.outer(own @ direction, direction)
        tokens = round_to_f32(w * base + np.sqrt(1.0 - w**2) * own + anchor)
        loss = max(0.0, planted_loss(direction, tokens) + float(noise[j])) + offset
        cands.append(Candidate(f"c{j}", tokens, loss))
    return CandidateGroup(group_id, query, cands)


def generate_synthetic(cfg: SyntheticConfig) -> SyntheticDataset:
    """Deterministic train/test pools with losses recomputable from tokens."""
    rng = Rng(cfg.seed)
    m = planted_map(rng.child("map"), cfg.d_model, cfg.h_true)
    g = global_direction(rng.child("global"), cfg.d_model)
    data = SyntheticDataset(config=cfg, planted_map=m, global_direction=g)
    for i in range(cfg.train_groups):
        data.train.append(_make_group(f"train-{i:05d}", rng.child("train", i), m, g, cfg))
    for i in range(cfg.test_groups):
        data.test.append(_make_group(f"test-{i:05d}", rng.child("test", i), m, g, cfg))
    return data


def plant_orthogonal_outlier(group: CandidateGroup, rng: Rng,
                             direction: np.ndarray | None = None) -> tuple[CandidateGroup, int]:
    """Replace one candidate with a draw whose pooled features are
    orthogonal to every other candidate's pooled features.

    Returns the modified group and the outlier's index. When the group's
    preferred direction is given the outlier's loss is recomputed,
    otherwise it is None.
    """
    n = len(group.candidates)
    k = rng.child("slot").integers(0, n)
    others = [mean_pool(c.tokens) for i, c in enumerate(group.candidates) if i != k]
    q, _ = np.linalg.qr(np.stack(others, axis=1))
    raw = rng.child("tokens").standard_normal(group.candidates[k].tokens.shape)
    pooled = mean_pool(raw)
    tokens = round_to_f32(raw - (q @ (q.T @ pooled))[None, :])
    loss = None if direction is None else planted_loss(direction, tokens)
    cands = list(group.candidates)
    cands[k] = Candidate(group.candidates[k].candidate_id, tokens, loss)
    return CandidateGroup(group.group_id, group.query, cands), k
