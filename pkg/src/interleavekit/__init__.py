"""interleavekit: interleaved image-text instruction toolkit.

Data engines that turn image and video corpora into interleaved training
samples, the two-stage guidance math used at inference, a sharded sample
store with a weighted mix sampler, and a benchmark with a human-review
queue and dual-perspective judging.
"""

from .guidance import (
    ConditionSet,
    GuidanceConfig,
    balanced_estimate,
    final_prediction,
    guided_step,
    shifted_schedule,
)
from .instructions import (
    InterleavedInstruction,
    PhraseMapping,
    TextSpan,
    VisualSlot,
    assemble_layout,
    parse_template,
    render_template,
    validate_mapping,
)
from .samples import (
    AssetSource,
    IndexedPrompt,
    InterleavedSample,
    Provenance,
    VisualAsset,
    to_image_first,
)

__version__ = "0.1.0"

__all__ = [
    "ConditionSet",
    "GuidanceConfig",
    "balanced_estimate",
    "final_prediction",
    "guided_step",
    "shifted_schedule",
    "InterleavedInstruction",
    "PhraseMapping",
    "TextSpan",
    "VisualSlot",
    "assemble_layout",
    "parse_template",
    "render_template",
    "validate_mapping",
    "AssetSource",
    "IndexedPrompt",
    "InterleavedSample",
    "Provenance",
    "VisualAsset",
    "to_image_first",
    "__version__",
]
