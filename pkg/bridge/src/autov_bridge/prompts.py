"""Attention-overlay prompt images from per-layer similarity maps.

The similarity between patch hidden states and the pooled query hidden
state has no fixed scale, so each map is min-max normalized per image
before use; a constant map normalizes to a uniform 0.5 rather than
dividing by zero. The normalized map is upscaled bilinearly to the image
size and blended with a tint, leaving the output the same shape and
dtype as the input.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .adapter import LvlmAdapter
from .errors import BridgeError

DEFAULT_LAYERS = (15, 20, 22, 23)


def normalize_map(sims: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; constant maps become all 0.5."""
    sims = np.asarray(sims, dtype=np.float64)
    lo = float(sims.min())
    hi = float(sims.max())
    if hi - lo < 1e-12:
        return np.full_like(sims, 0.5)
    return (sims - lo) / (hi - lo)


def upscale_map(sims: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinearly resize a normalized map to the target pixel grid."""
    img = Image.fromarray((np.asarray(sims, dtype=np.float64) * 255.0).astype(np.float32))
    resized = img.resize((width, height), resample=Image.BILINEAR)
    return np.clip(np.asarray(resized, dtype=np.float64) / 255.0, 0.0, 1.0)


def overlay(image: np.ndarray, heat: np.ndarray, alpha: float = 0.55,
            tint: tuple[int, int, int] = (255, 32, 32)) -> np.ndarray:
    """Blend a tint into the image proportionally to the heat map."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise BridgeError(f"expected an (h, w, 3) image, got shape {img.shape}")
    if heat.shape != img.shape[:2]:
        raise BridgeError(f"heat map shape {heat.shape} does not match image {img.shape[:2]}")
    h = heat[..., None]
    t = np.asarray(tint, dtype=np.float64)
    out = (1.0 - alpha * h) * img.astype(np.float64) + alpha * h * t
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def generate_attention_prompts(adapter: LvlmAdapter, image: np.ndarray, query: str,
                               layers: tuple[int, ...] = DEFAULT_LAYERS,
                               alpha: float = 0.55,
                               tint: tuple[int, int, int] = (255, 32, 32),
                               ) -> dict[int, np.ndarray]:
    """Produce one overlay image per requested layer.

    Layer indices outside the model are rejected up front so a partial
    batch is never written.
    """
    img = np.asarray(image)
    bad = [i for i in layers if not 0 <= i < adapter.layer_count]
    if bad:
        raise BridgeError(
            f"layer indices {bad} out of range for a {adapter.layer_count}-layer model"
        )
    out = {}
    for layer in layers:
        sims = normalize_map(adapter.similarity_map(img, query, layer))
        heat = upscale_map(sims, img.shape[0], img.shape[1])
        out[layer] = overlay(img, heat, alpha=alpha, tint=tint)
    return out
