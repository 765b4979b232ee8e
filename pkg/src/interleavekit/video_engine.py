"""Video-to-interleaved-sample pipeline.

Frame pairs separated by a bounded temporal gap are matched for entities by
a vision model over a side-by-side concatenation, filtered for meaningful
change in two gated stages (keypoint similarity first, then a semantic
change check), and woven into cross-frame samples: the reference crops come
from the source frame while the target is the later frame, so the model
being trained must transform state rather than copy pixels.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .clients import ClientHub, ClientError, ClientRole
from .imaging import (
    Bbox,
    bbox_in_bounds,
    concat_side_by_side,
    crop_bbox,
    decode_image,
    encode_png,
    rect_mask_rle,
    sha256_hex,
    to_b64,
)
from .image_engine import DropRecord, ImageEngineConfig, SampleRejected, WeaveFailed, weave_instruction
from .orb import OrbConfig, orb_similarity
from .samples import (
    AssetSource,
    InterleavedSample,
    Provenance,
    VisualAsset,
    make_sample_id,
)


class NoValidPairs(RuntimeError):
    """No frame pair satisfies the temporal gap window."""


DEFAULT_CORRESPONDENCE_PROMPT = (
    "The image is two video frames side by side (earlier left, later right). "
    "Identify entities visible in both and return their bounding boxes in "
    "the concatenated coordinates."
)


@dataclass(frozen=True)
class FramePair:
    source_bytes: bytes
    target_bytes: bytes
    source_time: float
    target_time: float
    origin_ref: str = ""

    def __post_init__(self) -> None:
        if self.target_time <= self.source_time:
            raise ValueError("target_time must be after source_time")

    @property
    def gap(self) -> float:
        return self.target_time - self.source_time


@dataclass(frozen=True)
class EntityMatch:
    label: str
    bbox_source: Bbox
    bbox_target: Bbox


@dataclass(frozen=True)
class VideoEngineConfig:
    min_gap: float = 2.0
    max_gap: float = 10.0
    pairs_per_video: int = 4
    orb: OrbConfig = field(default_factory=OrbConfig)
    llm_retry_limit: int = 3
    rng_seed: int = 0
    correspondence_prompt: str = DEFAULT_CORRESPONDENCE_PROMPT

    def __post_init__(self) -> None:
        if not 0 < self.min_gap <= self.max_gap:
            raise ValueError("need 0 < min_gap <= max_gap")
        if self.pairs_per_video < 1:
            raise ValueError("pairs_per_video must be >= 1")

    def digest(self) -> str:
        import json

        payload = {
            "min_gap": self.min_gap,
            "max_gap": self.max_gap,
            "pairs_per_video": self.pairs_per_video,
            "orb": self.orb.__dict__,
            "llm_retry_limit": self.llm_retry_limit,
            "rng_seed": self.rng_seed,
        }
        return sha256_hex(json.dumps(payload, sort_keys=True).encode())[:16]

    def weave_config(self) -> ImageEngineConfig:
        # Slot-count bounds do not apply to video samples; only the retry
        # budget matters for the shared weaving helper.
        return ImageEngineConfig(
            min_objects=1, max_objects=64, llm_retry_limit=self.llm_retry_limit,
            rng_seed=self.rng_seed,
        )


def select_frame_pairs(
    frame_times: list[float],
    config: VideoEngineConfig,
    rng: random.Random,
) -> list[tuple[float, float]]:
    """Sample source/target time pairs within the gap window.

    No frame is used as a source twice; the result is deterministic under
    the supplied generator and returned in chronological order.
    """
    times = sorted(set(frame_times))
    candidates = [
        (s, t)
        for i, s in enumerate(times)
        for t in times[i + 1 :]
        if config.min_gap <= t - s <= config.max_gap
    ]
    if not candidates:
        raise NoValidPairs(f"no pair satisfies gap in [{config.min_gap}, {config.max_gap}]s")
    order = list(range(len(candidates)))
    rng.shuffle(order)
    chosen: list[tuple[float, float]] = []
    used_sources: set[float] = set()
    for idx in order:
        source, target = candidates[idx]
        if source in used_sources:
            continue
        chosen.append((source, target))
        used_sources.add(source)
        if len(chosen) == config.pairs_per_video:
            break
    return sorted(chosen)


def correspondence_request(pair: FramePair, config: VideoEngineConfig) -> dict:
    """The exact correspondence payload for a pair; lets tests record mocks."""
    source = decode_image(pair.source_bytes)
    target = decode_image(pair.target_bytes)
    canvas, _, _ = concat_side_by_side(source, target)
    return {"image_b64": to_b64(encode_png(canvas)), "prompt": config.correspondence_prompt}


def correspond_entities(
    pair: FramePair, clients: ClientHub, config: VideoEngineConfig
) -> list[EntityMatch]:
    """Match entities across the pair via the side-by-side concatenation.

    Response boxes arrive in concatenated coordinates; boxes straddling the
    seam (or on the wrong side) are discarded, right-half boxes are mapped
    back into original target-frame coordinates.
    """
    source = decode_image(pair.source_bytes)
    target = decode_image(pair.target_bytes)
    canvas, seam, scale = concat_side_by_side(source, target)
    response = clients.call(ClientRole.correspondence_vlm, correspondence_request(pair, config))
    matches: list[EntityMatch] = []
    for m in response["matches"]:
        left = tuple(int(round(v)) for v in m["bbox_left"])
        right = tuple(int(round(v)) for v in m["bbox_right"])
        if not bbox_in_bounds(left, seam, canvas.height):
            continue  # straddles the seam or sits in the wrong half
        rx, ry, rw, rh = right
        if rx < seam or rx + rw > canvas.width or rh <= 0 or ry < 0 or ry + rh > canvas.height:
            continue
        tx = int(round((rx - seam) / scale))
        ty = int(round(ry / scale))
        tw = max(1, int(round(rw / scale)))
        th = max(1, int(round(rh / scale)))
        tx = min(max(tx, 0), target.width - 1)
        ty = min(max(ty, 0), target.height - 1)
        tw = min(tw, target.width - tx)
        th = min(th, target.height - ty)
        matches.append(EntityMatch(m["label"], left, (tx, ty, tw, th)))
    return matches


@dataclass(frozen=True)
class FilterDecision:
    keep: bool
    reason: str | None
    orb_score: float
    verifier_called: bool


def dynamic_filter(
    match: EntityMatch,
    pair: FramePair,
    clients: ClientHub,
    config: VideoEngineConfig,
) -> FilterDecision:
    """Two gated stages: drop static crops, then drop semantically unchanged.

    The semantic verifier is never consulted for pairs the keypoint stage
    already dropped; low-texture crops (score 0) fall through to stage two.
    """
    source_crop = crop_bbox(decode_image(pair.source_bytes), match.bbox_source)
    target_crop = crop_bbox(decode_image(pair.target_bytes), match.bbox_target)
    result = orb_similarity(source_crop, target_crop, config.orb)
    if result.score >= config.orb.static_similarity_threshold:
        return FilterDecision(False, "static", result.score, verifier_called=False)
    response = clients.call(
        ClientRole.change_verifier,
        {
            "image_a_b64": to_b64(encode_png(source_crop)),
            "image_b_b64": to_b64(encode_png(target_crop)),
        },
    )
    if not response["changed"]:
        return FilterDecision(False, "no_semantic_change", result.score, verifier_called=True)
    return FilterDecision(True, None, result.score, verifier_called=True)


def build_video_sample(
    pair: FramePair,
    matches: list[EntityMatch],
    clients: ClientHub,
    config: VideoEngineConfig,
) -> InterleavedSample:
    """Weave kept matches into a cross-frame sample.

    Visual assets are source-frame crops; the instruction describes the
    target frame (global caption plus per-object target-state captions);
    the training target is the target frame itself.
    """
    if not matches:
        raise SampleRejected("dynamic_filter", "no matches survived filtering")
    source = decode_image(pair.source_bytes)
    target = decode_image(pair.target_bytes)
    target_b64 = to_b64(pair.target_bytes)

    global_caption = clients.call(ClientRole.captioner, {"image_b64": target_b64})["caption"]
    items: list[tuple[str, str]] = []
    assets: list[VisualAsset] = []
    for match in matches:
        mask = rect_mask_rle(target.width, target.height, match.bbox_target)
        state_caption = clients.call(
            ClientRole.region_describer, {"image_b64": target_b64, "mask_rle": mask}
        )["caption"]
        items.append((match.label, state_caption))
        assets.append(
            VisualAsset(
                image_bytes=encode_png(crop_bbox(source, match.bbox_source)),
                source=AssetSource.source_frame_crop,
                origin_ref=pair.origin_ref,
                bbox=match.bbox_source,
            )
        )

    instr, mapping, _ = weave_instruction(global_caption, items, clients, config.weave_config())
    config_digest = config.digest()
    from .instructions import render_template

    sample = InterleavedSample(
        sample_id=make_sample_id(
            f"{pair.origin_ref}@{pair.source_time}-{pair.target_time}",
            render_template(instr),
            [a.digest for a in assets],
            sha256_hex(pair.target_bytes),
            config_digest,
        ),
        instruction=instr,
        assets=tuple(assets),
        mapping=mapping,
        provenance=Provenance.video_pipeline,
        target_image=pair.target_bytes,
        engine_config_digest=config_digest,
    )
    sample.validate()
    return sample


def process_video(
    frames: list[tuple[float, bytes]],
    origin_ref: str,
    clients: ClientHub,
    config: VideoEngineConfig,
) -> tuple[list[InterleavedSample], list[DropRecord]]:
    """Drive the whole pipeline for one video's extracted frames."""
    from .image_engine import derive_rng

    by_time = dict(frames)
    rng = derive_rng(config.rng_seed, origin_ref)
    samples: list[InterleavedSample] = []
    drops: list[DropRecord] = []
    try:
        pairs = select_frame_pairs([t for t, _ in frames], config, rng)
    except NoValidPairs as exc:
        drops.append(DropRecord(origin_ref, "pair_selection", "no_valid_pairs", str(exc)))
        return samples, drops
    for source_time, target_time in pairs:
        pair = FramePair(
            source_bytes=by_time[source_time],
            target_bytes=by_time[target_time],
            source_time=source_time,
            target_time=target_time,
            origin_ref=origin_ref,
        )
        pair_ref = f"{origin_ref}@{source_time}-{target_time}"
        try:
            matches = correspond_entities(pair, clients, config)
            kept = []
            for match in matches:
                decision = dynamic_filter(match, pair, clients, config)
                if decision.keep:
                    kept.append(match)
                else:
                    drops.append(
                        DropRecord(pair_ref, "dynamic_filter", decision.reason or "dropped", match.label)
                    )
            samples.append(build_video_sample(pair, kept, clients, config))
        except (SampleRejected, WeaveFailed, ClientError) as exc:
            drops.append(DropRecord(pair_ref, "video_sample", type(exc).__name__, str(exc)))
    return samples, drops
