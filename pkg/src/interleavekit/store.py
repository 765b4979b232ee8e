"""Sharded sample persistence and the weighted training-mix sampler.

Shards are newline-delimited JSON records; image bytes live once each in a
content-addressed blob directory and records reference them by digest. The
manifest is written last via write-then-rename, so readers either see a
complete store or nothing. One writer per directory (advisory lock file),
any number of readers.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

from filelock import FileLock, Timeout as LockTimeout

from .imaging import sha256_hex
from .instructions import PhraseMapping, parse_template, render_template
from .samples import (
    AssetSource,
    InterleavedSample,
    Provenance,
    SampleInvariantError,
    VisualAsset,
)

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_DIR = "blobs"


class InvalidSample(ValueError):
    """A sample failed its invariants during writing; the write aborts."""


class IoFailure(OSError):
    """Filesystem-level failure while writing or locking a store."""


class DigestMismatch(RuntimeError):
    """Stored shard bytes do not match the manifest digest."""


class MissingBlob(RuntimeError):
    """A record references a blob digest that is not in the store."""


class EmptySource(RuntimeError):
    """A mix source yielded no samples at all."""


@dataclass(frozen=True)
class ShardInfo:
    path: str
    count: int
    digest: str


@dataclass(frozen=True)
class ShardManifest:
    schema_version: int
    shards: tuple[ShardInfo, ...]
    provenance_counts: dict[str, int]

    @property
    def record_count(self) -> int:
        return sum(s.count for s in self.shards)

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema_version": self.schema_version,
                "shards": [
                    {"path": s.path, "count": s.count, "digest": s.digest}
                    for s in self.shards
                ],
                "provenance_counts": dict(sorted(self.provenance_counts.items())),
            },
            indent=2,
        )

    @classmethod
    def load(cls, store_dir: str | Path) -> "ShardManifest":
        path = Path(store_dir) / MANIFEST_NAME
        data = json.loads(path.read_text(encoding="utf-8"))
        return cls(
            schema_version=int(data["schema_version"]),
            shards=tuple(
                ShardInfo(s["path"], int(s["count"]), s["digest"]) for s in data["shards"]
            ),
            provenance_counts={k: int(v) for k, v in data["provenance_counts"].items()},
        )


def record_to_json(sample: InterleavedSample) -> str:
    """Canonical one-line record; stable bytes for identical samples."""
    record: dict = {
        "sample_id": sample.sample_id,
        "provenance": sample.provenance.value,
        "instruction_text": render_template(sample.instruction),
        "mapping": sample.mapping.as_dicts(),
        "asset_digests": [a.digest for a in sample.assets],
        "asset_meta": [
            {
                "source": a.source.value,
                **({"bbox": list(a.bbox)} if a.bbox is not None else {}),
                "origin_ref": a.origin_ref,
            }
            for a in sample.assets
        ],
    }
    if sample.target_image is not None:
        record["target_digest"] = sha256_hex(sample.target_image)
    record["engine_config_digest"] = sample.engine_config_digest
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def _blob_path(store_dir: Path, digest: str) -> Path:
    return store_dir / BLOB_DIR / f"{digest}.png"


def _load_blob(store_dir: Path, digest: str) -> bytes:
    path = _blob_path(store_dir, digest)
    if not path.is_file():
        raise MissingBlob(f"blob {digest} missing from {store_dir / BLOB_DIR}")
    return path.read_bytes()


def record_from_json(line: str, store_dir: Path) -> InterleavedSample:
    data = json.loads(line)
    assets = []
    for digest, meta in zip(data["asset_digests"], data["asset_meta"]):
        assets.append(
            VisualAsset(
                image_bytes=_load_blob(store_dir, digest),
                source=AssetSource(meta["source"]),
                origin_ref=meta["origin_ref"],
                bbox=tuple(meta["bbox"]) if "bbox" in meta else None,
            )
        )
    target = None
    if "target_digest" in data:
        target = _load_blob(store_dir, data["target_digest"])
    return InterleavedSample(
        sample_id=data["sample_id"],
        instruction=parse_template(data["instruction_text"]),
        assets=tuple(assets),
        mapping=PhraseMapping.from_dicts(data["mapping"]),
        provenance=Provenance(data["provenance"]),
        target_image=target,
        engine_config_digest=data.get("engine_config_digest", ""),
    )


def write_shard(
    samples: Iterable[InterleavedSample],
    store_dir: str | Path,
    max_records_per_shard: int = 10_000,
    lock_timeout: float = 10.0,
) -> ShardManifest:
    """Persist samples into shard files plus blobs, manifest last.

    Any sample failing its invariants aborts the whole write: shard files
    and freshly written blobs are removed and no manifest appears.
    """
    if max_records_per_shard < 1:
        raise ValueError("max_records_per_shard must be >= 1")
    store = Path(store_dir)
    store.mkdir(parents=True, exist_ok=True)
    (store / BLOB_DIR).mkdir(exist_ok=True)
    lock = FileLock(str(store / ".write.lock"))
    try:
        lock.acquire(timeout=lock_timeout)
    except LockTimeout as exc:
        raise IoFailure(f"store {store} is locked by another writer") from exc

    new_shards: list[Path] = []
    new_blobs: list[Path] = []
    shard_infos: list[ShardInfo] = []
    provenance_counts: dict[str, int] = {}

    def _put_blob(data: bytes) -> None:
        path = _blob_path(store, sha256_hex(data))
        if not path.exists():
            path.write_bytes(data)
            new_blobs.append(path)

    def _cleanup() -> None:
        for path in new_shards + new_blobs:
            try:
                path.unlink()
            except OSError:
                pass

    try:
        shard_idx = 0
        current_lines: list[str] = []

        def _flush() -> None:
            nonlocal shard_idx
            if not current_lines:
                return
            name = f"shard-{shard_idx:05d}.ndjson"
            payload = ("\n".join(current_lines) + "\n").encode("utf-8")
            path = store / name
            path.write_bytes(payload)
            new_shards.append(path)
            shard_infos.append(ShardInfo(name, len(current_lines), sha256_hex(payload)))
            shard_idx += 1
            current_lines.clear()

        for sample in samples:
            try:
                sample.validate()
            except (SampleInvariantError, ValueError) as exc:
                raise InvalidSample(f"sample {sample.sample_id}: {exc}") from exc
            for asset in sample.assets:
                _put_blob(asset.image_bytes)
            if sample.target_image is not None:
                _put_blob(sample.target_image)
            current_lines.append(record_to_json(sample))
            provenance_counts[sample.provenance.value] = (
                provenance_counts.get(sample.provenance.value, 0) + 1
            )
            if len(current_lines) == max_records_per_shard:
                _flush()
        _flush()

        manifest = ShardManifest(SCHEMA_VERSION, tuple(shard_infos), provenance_counts)
        tmp = store / (MANIFEST_NAME + ".tmp")
        tmp.write_text(manifest.to_json(), encoding="utf-8")
        os.replace(tmp, store / MANIFEST_NAME)
        return manifest
    except BaseException:
        _cleanup()
        raise
    finally:
        lock.release()


def read_shard(
    store_dir: str | Path, manifest: ShardManifest | None = None
) -> Iterator[InterleavedSample]:
    """Yield samples in stored order, verifying each shard digest first."""
    store = Path(store_dir)
    manifest = manifest or ShardManifest.load(store)
    for info in manifest.shards:
        payload = (store / info.path).read_bytes()
        if sha256_hex(payload) != info.digest:
            raise DigestMismatch(f"shard {info.path} digest mismatch")
        for line in payload.decode("utf-8").splitlines():
            if line:
                yield record_from_json(line, store)


@dataclass(frozen=True)
class MixSpec:
    """Weighted mix over named sources; weights normalize at load."""

    sources: tuple[tuple[str, float], ...]
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.sources:
            raise ValueError("need at least one source")
        if any(w <= 0 for _, w in self.sources):
            raise ValueError("weights must be > 0")
        names = [n for n, _ in self.sources]
        if len(set(names)) != len(names):
            raise ValueError("source ids must be unique")

    @property
    def normalized(self) -> tuple[tuple[str, float], ...]:
        total = sum(w for _, w in self.sources)
        return tuple((n, w / total) for n, w in self.sources)


def mix_stream(
    sources: dict[str, Callable[[], Iterator]],
    spec: MixSpec,
) -> Iterator[tuple[str, object]]:
    """Infinite stream of (source_id, sample) draws.

    Each draw picks a source by normalized weight with the seeded generator,
    then takes that source's next sample, reopening exhausted sources. A
    source that opens to an empty iterator raises EmptySource.
    """
    import random as _random

    missing = [name for name, _ in spec.sources if name not in sources]
    if missing:
        raise ValueError(f"spec references unknown sources: {missing}")
    rng = _random.Random(spec.seed)
    weights = spec.normalized
    names = [n for n, _ in weights]
    cumulative: list[float] = []
    acc = 0.0
    for _, w in weights:
        acc += w
        cumulative.append(acc)
    cumulative[-1] = 1.0
    iterators: dict[str, Iterator] = {}

    def _next_from(name: str):
        it = iterators.get(name)
        if it is None:
            it = iter(sources[name]())
            iterators[name] = it
        try:
            return next(it)
        except StopIteration:
            it = iter(sources[name]())
            iterators[name] = it
            try:
                return next(it)
            except StopIteration:
                raise EmptySource(f"source {name!r} has no samples") from None

    while True:
        r = rng.random()
        for name, bound in zip(names, cumulative):
            if r < bound:
                yield name, _next_from(name)
                break
