"""Training-sample records: visual assets, interleaved samples, indexed prompts."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field

from .imaging import Bbox, decode_image, sha256_hex
from .instructions import (
    InterleavedInstruction,
    PhraseMapping,
    UnmappedSlot,
    render_template,
    rewrite_image_first,
    validate_mapping,
)


class AssetSource(str, enum.Enum):
    full_image = "full_image"
    bbox_crop = "bbox_crop"
    masked_crop = "masked_crop"
    source_frame_crop = "source_frame_crop"


class Provenance(str, enum.Enum):
    image_pipeline = "image_pipeline"
    video_pipeline = "video_pipeline"
    benchmark = "benchmark"


@dataclass(frozen=True)
class VisualAsset:
    """One reference image occupying a visual slot."""

    image_bytes: bytes
    source: AssetSource
    origin_ref: str
    bbox: Bbox | None = None

    @property
    def digest(self) -> str:
        return sha256_hex(self.image_bytes)

    def validate(self) -> None:
        decode_image(self.image_bytes)
        if self.bbox is not None:
            x, y, w, h = self.bbox
            if w <= 0 or h <= 0 or x < 0 or y < 0:
                raise ValueError(f"asset bbox {self.bbox} is degenerate")


class SampleInvariantError(ValueError):
    """An InterleavedSample violates its structural invariants."""


# Paper-ranged asset count for image-pipeline samples.
IMAGE_PIPELINE_MIN_ASSETS = 3
IMAGE_PIPELINE_MAX_ASSETS = 8


@dataclass(frozen=True)
class InterleavedSample:
    """One training record: instruction plus its visual slot assets.

    assets[i] fills slot index i+1; the phrase mapping ties descriptive
    phrases to those same 1-based indices.
    """

    sample_id: str
    instruction: InterleavedInstruction
    assets: tuple[VisualAsset, ...]
    mapping: PhraseMapping
    provenance: Provenance
    target_image: bytes | None = None
    engine_config_digest: str = ""

    def validate(self) -> None:
        if len(self.assets) != self.instruction.slot_count:
            raise SampleInvariantError(
                f"{len(self.assets)} assets for {self.instruction.slot_count} slots"
            )
        report = validate_mapping(self.instruction, self.mapping)
        if not report.ok:
            raise SampleInvariantError(f"mapping invalid: {report.describe()}")
        if self.provenance is Provenance.image_pipeline and not (
            IMAGE_PIPELINE_MIN_ASSETS <= len(self.assets) <= IMAGE_PIPELINE_MAX_ASSETS
        ):
            raise SampleInvariantError(
                f"image-pipeline sample has {len(self.assets)} assets, "
                f"expected {IMAGE_PIPELINE_MIN_ASSETS}-{IMAGE_PIPELINE_MAX_ASSETS}"
            )
        if self.provenance is Provenance.video_pipeline and any(
            a.source is not AssetSource.source_frame_crop for a in self.assets
        ):
            raise SampleInvariantError("video-pipeline assets must be source-frame crops")
        for asset in self.assets:
            asset.validate()

    @property
    def instruction_text(self) -> str:
        return render_template(self.instruction)


def make_sample_id(
    origin_ref: str,
    instruction_text: str,
    asset_digests: list[str],
    target_digest: str | None,
    engine_config_digest: str,
) -> str:
    """Deterministic content-derived sample id."""
    payload = "\x00".join(
        [origin_ref, instruction_text, *asset_digests, target_digest or "", engine_config_digest]
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:32]


@dataclass(frozen=True)
class IndexedPrompt:
    """Baseline image-first form: assets up front, prompt referencing them by index."""

    prompt: str
    assets: tuple[VisualAsset, ...] = field(default=())


def to_image_first(sample: InterleavedSample) -> IndexedPrompt:
    """Convert a sample to the baseline indexed representation.

    Assets come out ordered by slot index (asset for Image 1 first); the
    prompt is the marker-free rewrite. Raises UnmappedSlot when a slot has
    no mapping entry.
    """
    if len(sample.assets) != sample.instruction.slot_count:
        raise SampleInvariantError("asset count does not match slot count")
    prompt = rewrite_image_first(sample.instruction, sample.mapping)
    return IndexedPrompt(prompt=prompt, assets=tuple(sample.assets))


__all__ = [
    "AssetSource",
    "Provenance",
    "VisualAsset",
    "InterleavedSample",
    "IndexedPrompt",
    "SampleInvariantError",
    "UnmappedSlot",
    "to_image_first",
    "make_sample_id",
]
