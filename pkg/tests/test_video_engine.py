import random

import pytest
from PIL import Image

from interleavekit.clients import ClientHub, ClientRole, MockTranscript
from interleavekit.image_engine import SampleRejected
from interleavekit.imaging import crop_bbox, decode_image, encode_png
from interleavekit.instructions import validate_mapping
from interleavekit.samples import AssetSource, Provenance
from interleavekit.synth import scene_frame_pair, textured_canvas
from interleavekit.video_engine import (
    EntityMatch,
    FramePair,
    NoValidPairs,
    VideoEngineConfig,
    build_video_sample,
    correspond_entities,
    correspondence_request,
    dynamic_filter,
    process_video,
    select_frame_pairs,
)

CONFIG = VideoEngineConfig()


def png(arr_or_img) -> bytes:
    if isinstance(arr_or_img, Image.Image):
        return encode_png(arr_or_img)
    return encode_png(Image.fromarray(arr_or_img))


@pytest.fixture(scope="module")
def moving_pair() -> FramePair:
    frame_a, frame_b = scene_frame_pair(31)
    return FramePair(png(frame_a), png(frame_b), 0.0, 3.0, origin_ref="vid31")


class TestSelectFramePairs:
    TIMES = [0.0, 1.0, 3.0, 6.0, 12.0]

    def test_candidate_window_matches_hand_enumeration(self):
        expected = {(0.0, 3.0), (0.0, 6.0), (1.0, 3.0), (1.0, 6.0), (3.0, 6.0), (3.0, 12.0), (6.0, 12.0)}
        config = VideoEngineConfig(pairs_per_video=100)
        seen = set()
        for seed in range(40):
            seen.update(select_frame_pairs(self.TIMES, config, random.Random(seed)))
        assert seen <= expected
        assert (0.0, 1.0) not in seen and (0.0, 12.0) not in seen

    def test_gap_window_honored(self):
        for seed in range(10):
            pairs = select_frame_pairs(self.TIMES, CONFIG, random.Random(seed))
            for s, t in pairs:
                assert CONFIG.min_gap <= t - s <= CONFIG.max_gap

    def test_no_source_reuse(self):
        config = VideoEngineConfig(pairs_per_video=10)
        pairs = select_frame_pairs(self.TIMES, config, random.Random(3))
        sources = [s for s, _ in pairs]
        assert len(sources) == len(set(sources))

    def test_deterministic_under_seed(self):
        p1 = select_frame_pairs(self.TIMES, CONFIG, random.Random(11))
        p2 = select_frame_pairs(self.TIMES, CONFIG, random.Random(11))
        assert p1 == p2

    def test_single_frame_no_valid_pairs(self):
        with pytest.raises(NoValidPairs):
            select_frame_pairs([4.0], CONFIG, random.Random(0))

    def test_close_frames_no_valid_pairs(self):
        with pytest.raises(NoValidPairs):
            select_frame_pairs([0.0, 0.5, 1.0], CONFIG, random.Random(0))


class TestCorrespondEntities:
    def _pair_with_matches(self, matches, size=256):
        frame_a, frame_b = scene_frame_pair(77, size, size)
        pair = FramePair(png(frame_a), png(frame_b), 0.0, 4.0, origin_ref="vid77")
        transcript = MockTranscript()
        transcript.record(
            ClientRole.correspondence_vlm,
            correspondence_request(pair, CONFIG),
            {"matches": matches},
        )
        return pair, ClientHub.mocked(transcript)

    def test_left_box_kept_with_x_unchanged(self):
        pair, hub = self._pair_with_matches(
            [{"label": "cup", "bbox_left": [30, 40, 50, 60], "bbox_right": [300, 40, 50, 60]}]
        )
        out = correspond_entities(pair, hub, CONFIG)
        assert len(out) == 1
        assert out[0].bbox_source == (30, 40, 50, 60)

    def test_right_box_mapped_back_across_seam(self):
        # Seam at 256 for equal-size frames: x = 256 + 10 -> target x = 10.
        pair, hub = self._pair_with_matches(
            [{"label": "cup", "bbox_left": [30, 40, 50, 60], "bbox_right": [266, 40, 50, 60]}]
        )
        out = correspond_entities(pair, hub, CONFIG)
        assert out[0].bbox_target == (10, 40, 50, 60)

    def test_straddling_box_discarded(self):
        pair, hub = self._pair_with_matches(
            [
                {"label": "bad", "bbox_left": [230, 40, 60, 60], "bbox_right": [300, 40, 50, 60]},
                {"label": "good", "bbox_left": [30, 40, 50, 60], "bbox_right": [300, 40, 50, 60]},
            ]
        )
        out = correspond_entities(pair, hub, CONFIG)
        assert [m.label for m in out] == ["good"]

    def test_height_equalization_scaling(self):
        # Target frame half the source height: scale = 2, seam = source width.
        frame_a, _ = scene_frame_pair(78, 256, 256)
        small_b = scene_frame_pair(78, 128, 128)[1]
        pair = FramePair(png(frame_a), png(small_b), 0.0, 4.0, origin_ref="vid78")
        transcript = MockTranscript()
        transcript.record(
            ClientRole.correspondence_vlm,
            correspondence_request(pair, CONFIG),
            {"matches": [
                {"label": "cup", "bbox_left": [30, 40, 50, 60], "bbox_right": [276, 40, 40, 60]}
            ]},
        )
        hub = ClientHub.mocked(transcript)
        out = correspond_entities(pair, hub, CONFIG)
        # (276 - 256) / 2 = 10; sizes halve, all within the 128px frame.
        assert out[0].bbox_target == (10, 20, 20, 30)

    def test_synthetic_mock_end_to_end(self, moving_pair, echo_hub):
        out = correspond_entities(moving_pair, echo_hub, CONFIG)
        source = decode_image(moving_pair.source_bytes)
        target = decode_image(moving_pair.target_bytes)
        for match in out:
            x, y, w, h = match.bbox_source
            assert 0 <= x and x + w <= source.width and 0 <= y and y + h <= source.height
            x, y, w, h = match.bbox_target
            assert 0 <= x and x + w <= target.width and 0 <= y and y + h <= target.height


class TestDynamicFilter:
    def _identical_pair(self):
        canvas = textured_canvas(50)
        frame = png(canvas)
        return FramePair(frame, frame, 0.0, 3.0, origin_ref="same")

    def test_identical_crops_dropped_static_without_verifier(self):
        pair = self._identical_pair()
        match = EntityMatch("thing", (20, 20, 120, 120), (20, 20, 120, 120))
        # error-policy transcript: any verifier call would raise UnknownRequest
        hub = ClientHub.mocked(MockTranscript(default_policy="error"))
        decision = dynamic_filter(match, pair, hub, CONFIG)
        assert not decision.keep
        assert decision.reason == "static"
        assert not decision.verifier_called
        assert hub.call_count(ClientRole.change_verifier) == 0

    def _changed_pair_match(self):
        a = textured_canvas(51)
        b = textured_canvas(52)
        pair = FramePair(png(a), png(b), 0.0, 3.0, origin_ref="diff")
        return pair, EntityMatch("thing", (20, 20, 120, 120), (20, 20, 120, 120))

    def _verifier_transcript(self, pair, match, changed: bool):
        source_crop = crop_bbox(decode_image(pair.source_bytes), match.bbox_source)
        target_crop = crop_bbox(decode_image(pair.target_bytes), match.bbox_target)
        from interleavekit.imaging import to_b64

        transcript = MockTranscript()
        transcript.record(
            ClientRole.change_verifier,
            {"image_a_b64": to_b64(encode_png(source_crop)), "image_b_b64": to_b64(encode_png(target_crop))},
            {"changed": changed, "reason": "scripted"},
        )
        return ClientHub.mocked(transcript)

    def test_low_similarity_and_changed_kept(self):
        pair, match = self._changed_pair_match()
        hub = self._verifier_transcript(pair, match, changed=True)
        decision = dynamic_filter(match, pair, hub, CONFIG)
        assert decision.keep and decision.verifier_called
        assert decision.orb_score < CONFIG.orb.static_similarity_threshold

    def test_low_similarity_but_unchanged_dropped(self):
        pair, match = self._changed_pair_match()
        hub = self._verifier_transcript(pair, match, changed=False)
        decision = dynamic_filter(match, pair, hub, CONFIG)
        assert not decision.keep
        assert decision.reason == "no_semantic_change"


class TestBuildVideoSample:
    def test_cross_frame_asymmetry_byte_level(self, moving_pair, echo_hub):
        matches = [
            EntityMatch("cup", (20, 20, 80, 80), (30, 30, 80, 80)),
            EntityMatch("hat", (120, 60, 70, 70), (110, 80, 70, 70)),
        ]
        sample = build_video_sample(moving_pair, matches, echo_hub, CONFIG)
        sample.validate()
        assert sample.provenance is Provenance.video_pipeline
        assert sample.target_image == moving_pair.target_bytes
        source = decode_image(moving_pair.source_bytes)
        for asset, match in zip(sample.assets, matches):
            assert asset.source is AssetSource.source_frame_crop
            assert asset.image_bytes == encode_png(crop_bbox(source, match.bbox_source))
        assert validate_mapping(sample.instruction, sample.mapping).ok

    def test_zero_matches_rejected(self, moving_pair, echo_hub):
        with pytest.raises(SampleRejected):
            build_video_sample(moving_pair, [], echo_hub, CONFIG)


class TestProcessVideo:
    def test_pipeline_produces_valid_samples(self, echo_hub):
        frame_a, frame_b = scene_frame_pair(61)
        frame_c, _ = scene_frame_pair(62)
        frames = [(0.0, png(frame_a)), (3.0, png(frame_b)), (6.0, png(frame_c))]
        samples, drops = process_video(frames, "vid61", echo_hub, CONFIG)
        assert samples, "expected at least one sample from the moving fixture"
        for sample in samples:
            sample.validate()
            assert all(a.source is AssetSource.source_frame_crop for a in sample.assets)

    def test_filter_order_verifier_gated_by_orb_stage(self):
        # Identical frames with aligned boxes: every match drops at stage
        # one, the verifier must never run.
        canvas = textured_canvas(70)
        frame = png(canvas)
        frames = [(0.0, frame), (4.0, frame)]
        pair = FramePair(frame, frame, 0.0, 4.0, origin_ref="vid70")
        transcript = MockTranscript()  # echo default for captioner etc.
        transcript.record(
            ClientRole.correspondence_vlm,
            correspondence_request(pair, CONFIG),
            {"matches": [
                {"label": "a", "bbox_left": [10, 10, 100, 100], "bbox_right": [330, 10, 100, 100]},
                {"label": "b", "bbox_left": [150, 120, 90, 90], "bbox_right": [470, 120, 90, 90]},
            ]},
        )
        hub = ClientHub.mocked(transcript)
        samples, drops = process_video(frames, "vid70", hub, CONFIG)
        assert samples == []
        reasons = [d.reason for d in drops if d.stage == "dynamic_filter"]
        assert reasons == ["static", "static"]
        assert hub.call_count(ClientRole.change_verifier) == 0

    def test_no_valid_pairs_recorded_as_drop(self, echo_hub):
        frames = [(0.0, png(textured_canvas(71)))]
        samples, drops = process_video(frames, "vid71", echo_hub, CONFIG)
        assert samples == [] and drops[0].reason == "no_valid_pairs"


class TestConfigValidation:
    def test_gap_bounds(self):
        with pytest.raises(ValueError):
            VideoEngineConfig(min_gap=5.0, max_gap=2.0)
        with pytest.raises(ValueError):
            VideoEngineConfig(pairs_per_video=0)

    def test_frame_pair_ordering(self):
        with pytest.raises(ValueError):
            FramePair(b"a", b"b", 5.0, 5.0)
