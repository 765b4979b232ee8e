import pytest

from interleavekit.clients import ClientHub, MockTranscript
from interleavekit.imaging import encode_png
from interleavekit.samples import AssetSource, VisualAsset
from interleavekit.synth import scene_image


@pytest.fixture()
def echo_hub() -> ClientHub:
    """All roles answered by deterministic digest-derived synthesis."""
    return ClientHub.mocked(MockTranscript())


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """50 deterministic scene images, the standard pipeline fixture corpus."""
    root = tmp_path_factory.mktemp("corpus")
    for i in range(50):
        (root / f"img_{i:03d}.png").write_bytes(encode_png(scene_image(1000 + i)))
    return root


@pytest.fixture(scope="session")
def entity_pool():
    """Reference entities for benchmark curation."""
    return [
        VisualAsset(
            image_bytes=encode_png(scene_image(7000 + i, 128, 128)),
            source=AssetSource.full_image,
            origin_ref=f"entity_{i:02d}.png",
        )
        for i in range(10)
    ]


def word_tokenizer(text: str) -> list[int]:
    """One token per whitespace-separated word; deterministic ids."""
    return [abs(hash(w)) % 50_000 for w in text.split()]
