"""Adapter contract a model wrapper must satisfy for export.

The bridge itself is model-agnostic: every operation works through this
protocol. An adapter owns the frozen model, its tokenizer, and its image
preprocessing, and exposes them as plain numpy arrays in the conventions
the ranking engine expects (token rows, d_model columns, weight matrices
applied on the right as x @ W).
"""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np


@runtime_checkable
class LvlmAdapter(Protocol):
    """Frozen vision-language model viewed through export-sized holes."""

    model_id: str
    d_model: int
    n_heads: int
    visual_token_count: int
    layer_count: int

    def tokenizer_fingerprint(self) -> str:
        """Stable digest of the tokenizer configuration."""
        ...

    def preprocess_fingerprint(self) -> str:
        """Stable digest of the image preprocessing pipeline."""
        ...

    def visual_tokens(self, image: np.ndarray) -> np.ndarray:
        """Project an image to visual tokens, shape (l_v, d_model).

        Raises PreprocessError for inputs the pipeline cannot handle.
        """
        ...

    def text_tokens(self, text: str) -> np.ndarray:
        """Embed a text string, shape (l_t, d_model)."""
        ...

    def answer_nll(self, visual: np.ndarray, query: str, answer: str) -> float:
        """Mean per-token negative log-likelihood of the answer.

        The mean runs over answer tokens only; query and visual positions
        condition the prediction but do not enter the average. Raises
        TruncationError when the combined sequence exceeds the context
        window.
        """
        ...

    def decoder_layer(self, index: int) -> dict[str, np.ndarray]:
        """Weights of one decoder block, keyed by the canonical names.

        Raises BridgeError for an out-of-range index, naming the layer
        count.
        """
        ...

    def similarity_map(self, image: np.ndarray, query: str, layer: int) -> np.ndarray:
        """Patch-text similarity grid at one layer, shape (grid_h, grid_w)."""
        ...
