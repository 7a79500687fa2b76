"""Bridge between a frozen vision-language model and the ranking engine.

Wraps a model behind the LvlmAdapter protocol and exports the three
artifact kinds the engine trains and ranks from: candidate datasets of
query and visual-token embeddings, the same datasets annotated with
answer losses, and a single frozen decoder block in the interaction
weights layout. Also renders attention-overlay prompt images for
qualitative inspection.
"""

from .adapter import LvlmAdapter
from .errors import (
    BridgeError,
    BridgeFormatError,
    ExportError,
    PreprocessError,
    TruncationError,
)
from .export import (
    ExportItem,
    ExportManifest,
    compute_combination_losses,
    export_embeddings,
    export_interaction_layer,
    sha256_file,
)
from .prompts import DEFAULT_LAYERS, generate_attention_prompts, normalize_map
from .toy import ToyLvlm, fit_color_task

__all__ = [
    "BridgeError",
    "BridgeFormatError",
    "DEFAULT_LAYERS",
    "ExportError",
    "ExportItem",
    "ExportManifest",
    "LvlmAdapter",
    "PreprocessError",
    "ToyLvlm",
    "TruncationError",
    "compute_combination_losses",
    "export_embeddings",
    "export_interaction_layer",
    "fit_color_task",
    "generate_attention_prompts",
    "normalize_map",
    "sha256_file",
]
