import json
from pathlib import Path

import numpy as np
import pytest

from interleavekit.imaging import DecodeFailure, encode_png
from interleavekit.orb import (
    OrbConfig,
    compute_descriptors,
    detect_keypoints,
    hamming_distances,
    match_descriptors,
    orb_similarity,
)
from interleavekit.synth import rotated_crop, shifted_crop, textured_canvas
from PIL import Image

ORACLE = json.loads((Path(__file__).parent / "fixtures" / "orb_oracle.json").read_text())


def fixture_pair(seed: int, case: str):
    canvas = textured_canvas(seed)
    base = shifted_crop(canvas, 0, 0)
    kind, _, arg = case.partition("_")
    if kind == "translate":
        dx, dy = (int(v) for v in arg.split("_"))
        return base, shifted_crop(canvas, dx, dy)
    return base, rotated_crop(canvas, int(arg))


class TestAgainstRecordedOracle:
    @pytest.mark.parametrize("key", sorted(ORACLE))
    def test_score_within_tolerance(self, key):
        seed_part, case = key.split("/")
        a, b = fixture_pair(int(seed_part.removeprefix("seed")), case)
        result = orb_similarity(a, b)
        assert not result.low_texture
        assert abs(result.score - ORACLE[key]) <= 0.1, (
            f"{key}: ours {result.score:.3f} vs oracle {ORACLE[key]:.3f}"
        )


class TestBoundaryBehavior:
    def test_identical_textured_patches_score_high(self):
        base = shifted_crop(textured_canvas(7), 0, 0)
        result = orb_similarity(base, base.copy())
        assert result.score >= 0.95

    def test_texture_vs_unrelated_noise_scores_low(self):
        base = shifted_crop(textured_canvas(7), 0, 0)
        noise = np.random.default_rng(123).integers(0, 255, base.shape).astype(np.uint8)
        assert orb_similarity(base, noise).score <= 0.1

    def test_flat_patch_scores_zero_with_flag(self):
        base = shifted_crop(textured_canvas(7), 0, 0)
        flat = np.full((64, 64), 128.0)
        result = orb_similarity(flat, base)
        assert result.score == 0.0
        assert result.low_texture

    def test_small_patch_scores_zero_with_flag(self):
        base = shifted_crop(textured_canvas(7), 0, 0)
        result = orb_similarity(np.zeros((20, 40)), base)
        assert result.score == 0.0
        assert result.low_texture
        assert result.keypoint_counts == (0, 0)

    def test_score_bounded_to_unit_interval(self):
        for seed in (3, 11):
            a, b = fixture_pair(seed, "translate_5_3")
            assert 0.0 <= orb_similarity(a, b).score <= 1.0

    def test_accepts_bytes_and_pil(self):
        base = shifted_crop(textured_canvas(7), 0, 0)
        png = encode_png(Image.fromarray(base))
        result = orb_similarity(png, Image.fromarray(base))
        assert result.score >= 0.95

    def test_decode_failure(self):
        with pytest.raises(DecodeFailure):
            orb_similarity(b"not an image", b"not an image")


class TestSymmetry:
    @pytest.mark.parametrize("case", ["translate_5_3", "translate_12_8", "rotate_15"])
    def test_near_symmetric_scores(self, case):
        a, b = fixture_pair(7, case)
        forward = orb_similarity(a, b).score
        backward = orb_similarity(b, a).score
        assert abs(forward - backward) <= 0.05


class TestComponents:
    def test_detector_determinism_and_cap(self):
        gray = shifted_crop(textured_canvas(7), 0, 0).astype(np.float64)
        config = OrbConfig(max_keypoints=100)
        k1 = detect_keypoints(gray, config)
        k2 = detect_keypoints(gray, config)
        assert np.array_equal(k1, k2)
        assert len(k1) == 100

    def test_descriptor_shape_and_hamming(self):
        gray = shifted_crop(textured_canvas(7), 0, 0).astype(np.float64)
        kps = detect_keypoints(gray, OrbConfig(max_keypoints=50))
        desc = compute_descriptors(gray, kps)
        assert desc.shape == (len(kps), 32)
        dist = hamming_distances(desc, desc)
        assert np.array_equal(np.diag(dist), np.zeros(len(kps)))
        assert dist.max() <= 256

    def test_matcher_one_to_one(self):
        gray = shifted_crop(textured_canvas(7), 0, 0).astype(np.float64)
        kps = detect_keypoints(gray, OrbConfig(max_keypoints=80))
        desc = compute_descriptors(gray, kps)
        matches = match_descriptors(desc, desc, 0.75)
        trains = [t for _, t, _ in matches]
        assert len(trains) == len(set(trains))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            OrbConfig(descriptor_bits=128)
        with pytest.raises(ValueError):
            OrbConfig(match_ratio=1.0)
        with pytest.raises(ValueError):
            OrbConfig(static_similarity_threshold=0.0)
