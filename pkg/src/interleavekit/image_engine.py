"""Image-to-interleaved-sample pipeline.

Three stages per corpus image: a global caption for narrative context,
fine-grained object processing (detect, filter, segment, describe, crop),
and LLM-driven interleaved construction validated against the marker
grammar with a bounded repair loop.

Samples that end up with fewer than min_objects or more than max_objects
usable objects are rejected rather than emitted; every dropped detection
and rejected sample carries a stage-tagged reason for the audit log.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field

from PIL import Image

from .clients import ClientHub, ClientError, ClientRole
from .imaging import (
    Bbox,
    bbox_in_bounds,
    bbox_iou,
    crop_bbox,
    decode_image,
    encode_png,
    sha256_hex,
    to_b64,
)
from .instructions import (
    InterleavedInstruction,
    PhraseMapping,
    TemplateError,
    parse_template,
    render_template,
    validate_mapping,
)
from .samples import (
    AssetSource,
    InterleavedSample,
    Provenance,
    VisualAsset,
    make_sample_id,
)

logger = logging.getLogger(__name__)


class AllDropped(RuntimeError):
    """Every detection failed downstream processing."""


class WeaveFailed(RuntimeError):
    """The instruction writer never produced a valid interleaved caption."""

    def __init__(self, message: str, last_report: str = "") -> None:
        super().__init__(message)
        self.last_report = last_report


class SampleRejected(RuntimeError):
    """The image cannot become a sample; carries the failing stage."""

    def __init__(self, stage: str, reason: str) -> None:
        super().__init__(f"[{stage}] {reason}")
        self.stage = stage
        self.reason = reason


@dataclass(frozen=True)
class Detection:
    label: str
    bbox: Bbox
    score: float | None = None


@dataclass(frozen=True)
class ObjectTriplet:
    label: str
    mask_rle: str
    object_caption: str
    crop: VisualAsset


@dataclass(frozen=True)
class DropRecord:
    origin_ref: str
    stage: str
    reason: str
    detail: str = ""

    def as_dict(self) -> dict:
        return {
            "origin_ref": self.origin_ref,
            "stage": self.stage,
            "reason": self.reason,
            "detail": self.detail,
        }


@dataclass(frozen=True)
class ImageEngineConfig:
    min_area_ratio: float = 0.005
    max_area_ratio: float = 0.80
    max_objects: int = 8
    min_objects: int = 3
    iou_dedupe_threshold: float = 0.9
    llm_retry_limit: int = 3
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.min_area_ratio < self.max_area_ratio <= 1:
            raise ValueError("need 0 < min_area_ratio < max_area_ratio <= 1")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 0 < self.iou_dedupe_threshold <= 1:
            raise ValueError("iou_dedupe_threshold must be in (0, 1]")
        if self.llm_retry_limit < 0:
            raise ValueError("llm_retry_limit must be >= 0")

    def digest(self) -> str:
        payload = json.dumps(self.__dict__, sort_keys=True).encode()
        return sha256_hex(payload)[:16]


def derive_rng(seed: int, origin_ref: str) -> random.Random:
    """Per-item generator; independent of worker scheduling."""
    material = hashlib.sha256(f"{seed}:{origin_ref}".encode()).digest()
    return random.Random(int.from_bytes(material[:8], "big"))


def filter_and_sample(
    detections: list[Detection],
    image_dims: tuple[int, int],
    config: ImageEngineConfig,
    rng: random.Random,
) -> list[Detection]:
    """Drop extreme sizes, dedupe overlaps, cap the count, fix the order.

    Output follows reading order (top-left to bottom-right of box centers)
    regardless of input order, so slot numbering is stable across runs.
    """
    width, height = image_dims
    total = width * height
    sized = [
        d
        for d in detections
        if config.min_area_ratio <= (d.bbox[2] * d.bbox[3]) / total <= config.max_area_ratio
    ]
    # Dedupe near-identical boxes, keeping the larger of each pair.
    by_area = sorted(sized, key=lambda d: (-d.bbox[2] * d.bbox[3], d.bbox, d.label))
    kept: list[Detection] = []
    for det in by_area:
        if all(bbox_iou(det.bbox, other.bbox) < config.iou_dedupe_threshold for other in kept):
            kept.append(det)
    if len(kept) > config.max_objects:
        kept = rng.sample(kept, config.max_objects)
    kept.sort(key=lambda d: (d.bbox[1] + d.bbox[3] / 2, d.bbox[0] + d.bbox[2] / 2, d.label))
    return kept


def build_object_triplets(
    image: Image.Image,
    origin_ref: str,
    detections: list[Detection],
    clients: ClientHub,
) -> tuple[list[ObjectTriplet], list[DropRecord]]:
    """Segment, describe, and crop each detection; skip failures."""
    image_b64 = to_b64(encode_png(image))
    triplets: list[ObjectTriplet] = []
    drops: list[DropRecord] = []
    for det in detections:
        try:
            mask = clients.call(
                ClientRole.segmenter, {"image_b64": image_b64, "bbox": list(det.bbox)}
            )["mask_rle"]
            caption = clients.call(
                ClientRole.region_describer, {"image_b64": image_b64, "mask_rle": mask}
            )["caption"]
            if not caption:
                raise ClientError("empty object caption")
            crop = VisualAsset(
                image_bytes=encode_png(crop_bbox(image, det.bbox)),
                source=AssetSource.bbox_crop,
                origin_ref=origin_ref,
                bbox=det.bbox,
            )
        except (ClientError, ValueError) as exc:
            drops.append(DropRecord(origin_ref, "triplets", det.label, str(exc)))
            logger.info("dropped %s/%s: %s", origin_ref, det.label, exc)
            continue
        triplets.append(ObjectTriplet(det.label, mask, caption, crop))
    if not triplets:
        raise AllDropped(f"{origin_ref}: no detection survived object processing")
    return triplets, drops


def weave_instruction(
    global_caption: str,
    items: list[tuple[str, str]],
    clients: ClientHub,
    config: ImageEngineConfig,
) -> tuple[InterleavedInstruction, PhraseMapping, int]:
    """Ask the instruction writer to weave (label, caption) pairs into text.

    The response must parse under the marker grammar, reference exactly one
    slot per item, and validate its phrase mapping. Invalid responses are
    re-prompted with the violation report appended, at most llm_retry_limit
    re-prompts; returns (instruction, mapping, attempts_used).
    """
    if not items:
        raise ValueError("need at least one object to weave")
    objects = [{"label": label, "caption": caption} for label, caption in items]
    feedback = ""
    last_report = ""
    attempts = 0
    for attempt in range(config.llm_retry_limit + 1):
        attempts = attempt + 1
        prompt = global_caption if not feedback else f"{global_caption}\n\n{feedback}"
        response = clients.call(
            ClientRole.instruction_writer,
            {"global_caption": prompt, "objects": objects},
        )
        try:
            instr = parse_template(response["interleaved_caption"])
        except TemplateError as exc:
            last_report = f"caption does not parse: {exc}"
            feedback = f"Previous attempt was invalid ({last_report}); return corrected JSON."
            continue
        if instr.slot_count != len(items):
            last_report = (
                f"caption has {instr.slot_count} visual slots for {len(items)} objects"
            )
            feedback = f"Previous attempt was invalid ({last_report}); return corrected JSON."
            continue
        mapping = PhraseMapping.from_dicts(response["mapping"])
        report = validate_mapping(instr, mapping)
        if report.ok:
            return instr, mapping, attempts
        last_report = report.describe()
        feedback = f"Previous attempt was invalid ({last_report}); return corrected JSON."
    raise WeaveFailed(
        f"writer failed after {attempts} attempts: {last_report}", last_report
    )


def build_image_sample(
    image_bytes: bytes,
    origin_ref: str,
    clients: ClientHub,
    config: ImageEngineConfig,
) -> tuple[InterleavedSample, list[DropRecord]]:
    """Run the full pipeline on one corpus image."""
    image = decode_image(image_bytes)
    image_b64 = to_b64(image_bytes)
    drops: list[DropRecord] = []

    global_caption = clients.call(ClientRole.captioner, {"image_b64": image_b64})["caption"]
    raw = clients.call(ClientRole.detector, {"image_b64": image_b64})["detections"]
    detections: list[Detection] = []
    for entry in raw:
        bbox = tuple(int(round(v)) for v in entry["bbox"])
        if not bbox_in_bounds(bbox, image.width, image.height):
            drops.append(DropRecord(origin_ref, "detector", entry["label"], f"bbox {bbox} out of bounds"))
            continue
        detections.append(Detection(entry["label"], bbox))

    rng = derive_rng(config.rng_seed, origin_ref)
    kept = filter_and_sample(detections, (image.width, image.height), config, rng)
    if len(kept) < config.min_objects:
        raise SampleRejected("filter", f"{len(kept)} objects after filtering, need >= {config.min_objects}")

    triplets, triplet_drops = build_object_triplets(image, origin_ref, kept, clients)
    drops.extend(triplet_drops)
    if not config.min_objects <= len(triplets) <= config.max_objects:
        raise SampleRejected(
            "triplets",
            f"{len(triplets)} triplets, need {config.min_objects}-{config.max_objects}",
        )

    instr, mapping, _ = weave_instruction(
        global_caption, [(t.label, t.object_caption) for t in triplets], clients, config
    )
    assets = tuple(t.crop for t in triplets)
    config_digest = config.digest()
    sample = InterleavedSample(
        sample_id=make_sample_id(
            origin_ref,
            render_template(instr),
            [a.digest for a in assets],
            sha256_hex(image_bytes),
            config_digest,
        ),
        instruction=instr,
        assets=assets,
        mapping=mapping,
        provenance=Provenance.image_pipeline,
        target_image=image_bytes,
        engine_config_digest=config_digest,
    )
    sample.validate()
    return sample, drops
