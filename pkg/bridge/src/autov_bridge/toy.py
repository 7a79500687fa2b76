"""A small trainable vision-language model for exercising the bridge.

Real deployments wrap a production checkpoint behind LvlmAdapter; this
module provides a self-contained stand-in so the export pipeline can be
driven end to end on CPU in seconds. The model reads a 24x24 RGB image
as a 3x3 grid of patch tokens, prepends them to embedded text, and runs
a stack of pre-norm causal decoder blocks whose weight layout matches
the ranking engine's frozen interaction layer (matrices applied on the
right, RMS norms with learned gains, SiLU feed-forward).

fit_color_task trains it to name the color of a centered square, which
gives exports a model that genuinely prefers clean images over blanked
ones.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
import torch
from torch import nn

from .errors import BridgeError, PreprocessError, TruncationError

IMAGE_SIZE = 24
PATCH = 8
GRID = IMAGE_SIZE // PATCH

VOCAB = (
    "<unk>", "what", "color", "is", "the", "square",
    "red", "green", "blue", "yellow", "magenta", "cyan",
    "white", "gray", "dark", "light",
)
COLOR_WORDS = ("red", "green", "blue", "yellow", "magenta", "cyan")
COLOR_RGB = {
    "red": (200, 40, 40),
    "green": (40, 200, 40),
    "blue": (40, 40, 200),
    "yellow": (200, 200, 40),
    "magenta": (200, 40, 200),
    "cyan": (40, 200, 200),
}
QUERY = "what color is the square"


def tokenize(text: str) -> list[int]:
    table = {w: i for i, w in enumerate(VOCAB)}
    return [table.get(w, 0) for w in text.split()]


class _Block(nn.Module):
    """Pre-norm decoder block in the engine's weight orientation."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, gen: torch.Generator):
        super().__init__()
        bound = 1.0 / math.sqrt(d_model)

        def mat(rows, cols):
            w = torch.empty(rows, cols, dtype=torch.float32)
            w.uniform_(-bound, bound, generator=gen)
            return nn.Parameter(w)

        self.n_heads = n_heads
        self.wq = mat(d_model, d_model)
        self.wk = mat(d_model, d_model)
        self.wv = mat(d_model, d_model)
        self.wo = mat(d_model, d_model)
        self.w_ff1 = mat(d_model, d_ff)
        self.b_ff1 = nn.Parameter(torch.zeros(d_ff))
        self.w_ff2 = mat(d_ff, d_model)
        self.b_ff2 = nn.Parameter(torch.zeros(d_model))
        self.norm1_gain = nn.Parameter(torch.ones(d_model))
        self.norm2_gain = nn.Parameter(torch.ones(d_model))

    @staticmethod
    def _rms(x: torch.Tensor, gain: torch.Tensor) -> torch.Tensor:
        scale = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + 1e-6)
        return x * scale * gain

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        t, d = x.shape[-2], x.shape[-1]
        h = self.n_heads
        hd = d // h
        xn = self._rms(x, self.norm1_gain)
        q = (xn @ self.wq).view(*x.shape[:-1], h, hd).transpose(-3, -2)
        k = (xn @ self.wk).view(*x.shape[:-1], h, hd).transpose(-3, -2)
        v = (xn @ self.wv).view(*x.shape[:-1], h, hd).transpose(-3, -2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        mask = torch.triu(torch.full((t, t), float("-inf")), diagonal=1)
        ctx = torch.softmax(scores + mask, dim=-1) @ v
        x = x + ctx.transpose(-3, -2).reshape(*x.shape) @ self.wo
        xn = self._rms(x, self.norm2_gain)
        return x + (torch.nn.functional.silu(xn @ self.w_ff1 + self.b_ff1) @ self.w_ff2 + self.b_ff2)


class ToyLvlm(nn.Module):
    """Patch-token color namer satisfying the LvlmAdapter protocol."""

    def __init__(self, seed: int = 0, d_model: int = 32, n_heads: int = 4,
                 d_ff: int = 128, n_layers: int = 24, context: int = 32):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.model_id = f"toy-lvlm-s{seed}-d{d_model}"
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.visual_token_count = GRID * GRID
        self.layer_count = n_layers
        self.context = context
        # Patch features: mean RGB plus a positional one-hot over the grid.
        feat = 3 + GRID * GRID
        self.patch_proj = nn.Linear(feat, d_model)
        self.tok_emb = nn.Embedding(len(VOCAB), d_model)
        with torch.no_grad():
            self.patch_proj.weight.uniform_(-0.5, 0.5, generator=gen)
            self.patch_proj.bias.zero_()
            self.tok_emb.weight.uniform_(-0.5, 0.5, generator=gen)
        self.blocks = nn.ModuleList(
            _Block(d_model, n_heads, d_ff, gen) for _ in range(n_layers)
        )
        self.out_gain = nn.Parameter(torch.ones(d_model))
        self.readout = nn.Linear(d_model, len(VOCAB))
        with torch.no_grad():
            self.readout.weight.uniform_(-0.1, 0.1, generator=gen)
            self.readout.bias.zero_()

    def tokenizer_fingerprint(self) -> str:
        return hashlib.sha256(" ".join(VOCAB).encode()).hexdigest()[:16]

    def preprocess_fingerprint(self) -> str:
        spec = f"rgb-mean/{PATCH}x{PATCH}-grid{GRID}x{GRID}/scale255"
        return hashlib.sha256(spec.encode()).hexdigest()[:16]

    def _patch_features(self, image: np.ndarray) -> torch.Tensor:
        img = np.asarray(image)
        if img.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise PreprocessError(
                f"expected a ({IMAGE_SIZE}, {IMAGE_SIZE}, 3) image, got shape {img.shape}"
            )
        if img.dtype != np.uint8:
            raise PreprocessError(f"expected uint8 pixels, got {img.dtype}")
        x = img.astype(np.float32) / 255.0
        feats = np.zeros((GRID * GRID, 3 + GRID * GRID), dtype=np.float32)
        for gy in range(GRID):
            for gx in range(GRID):
                i = gy * GRID + gx
                patch = x[gy * PATCH:(gy + 1) * PATCH, gx * PATCH:(gx + 1) * PATCH]
                feats[i, :3] = patch.mean(axis=(0, 1))
                feats[i, 3 + i] = 1.0
        return torch.from_numpy(feats)

    def visual_tokens(self, image: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            v = self.patch_proj(self._patch_features(image))
        return v.numpy().astype(np.float32)

    def text_tokens(self, text: str) -> np.ndarray:
        ids = tokenize(text)
        if not ids:
            raise PreprocessError("cannot embed empty text")
        with torch.no_grad():
            e = self.tok_emb(torch.tensor(ids))
        return e.numpy().astype(np.float32)

    def _hidden_states(self, seq: torch.Tensor, upto: int | None = None) -> torch.Tensor:
        h = seq
        for block in self.blocks[: self.layer_count if upto is None else upto]:
            h = block(h)
        return h

    def _answer_nll_tensor(self, visual: torch.Tensor, query_ids: list[int],
                           answer_ids: list[int]) -> torch.Tensor:
        l_v = visual.shape[0]
        total = l_v + len(query_ids) + len(answer_ids)
        if total > self.context:
            raise TruncationError(
                f"sequence of {total} tokens exceeds the {self.context}-token context",
                sequence_length=total,
                context_length=self.context,
            )
        text = self.tok_emb(torch.tensor(query_ids + answer_ids))
        h = self._hidden_states(torch.cat([visual, text], dim=0))
        logits = self.readout(_Block._rms(h, self.out_gain))
        # Position p predicts token p+1, so answer token k sits at logits
        # row l_v + l_q + k - 1.
        start = l_v + len(query_ids) - 1
        rows = logits[start:start + len(answer_ids)]
        targets = torch.tensor(answer_ids)
        return torch.nn.functional.cross_entropy(rows, targets)

    def answer_nll(self, visual: np.ndarray, query: str, answer: str) -> float:
        query_ids = tokenize(query)
        answer_ids = tokenize(answer)
        if not answer_ids:
            raise PreprocessError("cannot score an empty answer")
        v = torch.from_numpy(np.asarray(visual, dtype=np.float32))
        with torch.no_grad():
            nll = self._answer_nll_tensor(v, query_ids, answer_ids)
        return float(nll)

    def decoder_layer(self, index: int) -> dict[str, np.ndarray]:
        if not 0 <= index < self.layer_count:
            raise BridgeError(
                f"layer index {index} out of range for a {self.layer_count}-layer model"
            )
        block = self.blocks[index]
        names = ("wq", "wk", "wv", "wo", "w_ff1", "b_ff1", "w_ff2", "b_ff2",
                 "norm1_gain", "norm2_gain")
        with torch.no_grad():
            return {n: getattr(block, n).numpy().astype(np.float32).copy() for n in names}

    def similarity_map(self, image: np.ndarray, query: str, layer: int) -> np.ndarray:
        if not 0 <= layer < self.layer_count:
            raise BridgeError(
                f"layer index {layer} out of range for a {self.layer_count}-layer model"
            )
        v = torch.from_numpy(self.visual_tokens(image))
        q = self.tok_emb(torch.tensor(tokenize(query)))
        with torch.no_grad():
            h = self._hidden_states(torch.cat([v, q], dim=0), upto=layer + 1)
        vis = h[: self.visual_token_count]
        txt = h[self.visual_token_count:].mean(dim=0)
        sims = torch.nn.functional.cosine_similarity(vis, txt.unsqueeze(0), dim=1)
        return sims.numpy().astype(np.float64).reshape(GRID, GRID)


def make_color_image(color: str, rng: np.random.Generator) -> np.ndarray:
    """Gray background with a colored center square plus pixel noise."""
    if color not in COLOR_RGB:
        raise BridgeError(f"unknown color {color!r}")
    img = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), 110.0)
    img[6:18, 6:18] = COLOR_RGB[color]
    img += rng.uniform(-8.0, 8.0, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def blank_image() -> np.ndarray:
    return np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)


def make_color_items(groups: int, pool: int, seed: int):
    """Synthesize export items for the color task.

    The first candidate of each group shows the answer color, so its
    loss should come out lowest once the model is trained.
    """
    from .export import ExportItem

    rng = np.random.default_rng(seed)
    items = []
    for g in range(groups):
        answer = COLOR_WORDS[rng.integers(len(COLOR_WORDS))]
        colors = [answer] + [
            COLOR_WORDS[rng.integers(len(COLOR_WORDS))] for _ in range(pool - 1)
        ]
        cands = [(f"c{j}", make_color_image(color, rng)) for j, color in enumerate(colors)]
        items.append(ExportItem(f"g{g:04d}", QUERY, cands, answer=answer))
    return items


def fit_color_task(model: ToyLvlm, steps: int = 300, batch_size: int = 16,
                   lr: float = 3e-3, seed: int = 0) -> float:
    """Train the model to name the square's color; returns final loss.

    The color answer is a single token, so each step batches whole
    sequences of equal length and reads one logits row per example.
    """
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    query_ids = torch.tensor(tokenize(QUERY))
    loss = float("nan")
    model.train()
    for _ in range(steps):
        opt.zero_grad()
        feats = []
        targets = []
        for _ in range(batch_size):
            color = COLOR_WORDS[rng.integers(len(COLOR_WORDS))]
            feats.append(model._patch_features(make_color_image(color, rng)))
            targets.append(tokenize(color)[0])
        v = model.patch_proj(torch.stack(feats))
        target = torch.tensor(targets)
        q = model.tok_emb(query_ids).expand(batch_size, -1, -1)
        a = model.tok_emb(target).unsqueeze(1)
        seq = torch.cat([v, q, a], dim=1)
        h = model._hidden_states(seq)
        logits = model.readout(_Block._rms(h, model.out_gain))
        rows = logits[:, v.shape[1] + q.shape[1] - 1, :]
        batch_loss = torch.nn.functional.cross_entropy(rows, target)
        batch_loss.backward()
        opt.step()
        loss = float(batch_loss.detach())
    model.eval()
    return loss
