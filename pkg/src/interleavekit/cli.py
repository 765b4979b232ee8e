"""Single command-line entry point: `ivk`.

Subcommands wire configuration, clients, pipelines, the store, the
benchmark, and the review server together. Every subcommand honors --seed
and --mock for fully offline, reproducible runs; structured logs go to
stderr and data to stdout or --out. Exit codes: 0 success, 1 operational
failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import benchmark as bench
from . import guidance
from .clients import ClientHub, ClientError, ClientRole, MockTranscript
from .config import ConfigError, RunConfig, load_run_config
from .image_engine import DropRecord, SampleRejected, WeaveFailed, build_image_sample
from .imaging import DecodeFailure, sha256_hex
from .review import ReviewApp, ReviewQueue, ReviewServerConfig, ReviewStore, make_server
from .samples import AssetSource, VisualAsset
from .store import MixSpec, mix_stream, read_shard, write_shard
from .video_engine import process_video

logger = logging.getLogger("ivk")

USAGE_ERROR = 2
OPERATIONAL_ERROR = 1


class CliError(RuntimeError):
    """Operational failure surfaced as exit code 1 without a stack dump."""


def _hub(args, config: RunConfig) -> ClientHub:
    if args.mock:
        transcript = (
            MockTranscript()
            if args.mock == "echo"
            else MockTranscript.load(args.mock)
        )
        return ClientHub.mocked(transcript)
    if not config.endpoints:
        raise CliError("no --mock transcript and no endpoints configured")
    return ClientHub.from_endpoints(config.endpoints)


def _load_config(args) -> RunConfig:
    config = load_run_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
        config.image_engine = type(config.image_engine)(
            **{**config.image_engine.__dict__, "rng_seed": args.seed}
        )
        ve = config.video_engine
        config.video_engine = type(ve)(
            **{
                **{k: v for k, v in ve.__dict__.items() if k != "orb"},
                "orb": ve.orb,
                "rng_seed": args.seed,
            }
        )
    if getattr(args, "workers", None) is not None:
        config.workers = args.workers
    logger.info("effective config: %s", json.dumps(config.echo_dict(), sort_keys=True))
    return config


def _write_audit(path: str | None, drops: list[DropRecord]) -> None:
    if not path or not drops:
        return
    with open(path, "a", encoding="utf-8") as fh:
        for drop in drops:
            fh.write(json.dumps(drop.as_dict(), ensure_ascii=False) + "\n")


def _iter_corpus(corpus: Path) -> list[Path]:
    exts = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}
    files = sorted(p for p in corpus.iterdir() if p.suffix.lower() in exts)
    if not files:
        raise CliError(f"no images found in {corpus}")
    return files


def _run_pool(fn, items, workers: int) -> list:
    """Map over a worker pool, input order preserved.

    On interrupt, in-flight items finish, queued ones are cancelled, and
    the finished results are returned so the caller can still commit them.
    """
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, item) for item in items]
        try:
            return [f.result() for f in futures]
        except KeyboardInterrupt:
            logger.warning("interrupted; committing finished work")
            for f in futures:
                f.cancel()
            return [
                f.result()
                for f in futures
                if f.done() and not f.cancelled() and f.exception() is None
            ]


def cmd_forge_image(args) -> int:
    config = _load_config(args)
    hub = _hub(args, config)
    corpus = Path(args.corpus)
    files = _iter_corpus(corpus)
    if args.dry_run:
        logger.info("dry run: %d corpus images, clients ready", len(files))
        return 0

    drops: list[DropRecord] = []
    samples = []

    def _one(path: Path):
        data = path.read_bytes()
        try:
            return build_image_sample(data, path.name, hub, config.image_engine)
        except SampleRejected as exc:
            return DropRecord(path.name, exc.stage, "sample_rejected", exc.reason)
        except (WeaveFailed, ClientError, DecodeFailure) as exc:
            return DropRecord(path.name, "pipeline", type(exc).__name__, str(exc))

    results = _run_pool(_one, files, config.workers)
    for result in results:
        if isinstance(result, DropRecord):
            drops.append(result)
        else:
            sample, sample_drops = result
            samples.append(sample)
            drops.extend(sample_drops)
    _write_audit(args.audit, drops)
    if not samples:
        raise CliError("no sample survived the pipeline")
    manifest = write_shard(samples, args.out, max_records_per_shard=args.shard_size)
    logger.info(
        "wrote %d samples in %d shards to %s (%d drops)",
        manifest.record_count,
        len(manifest.shards),
        args.out,
        len(drops),
    )
    print(json.dumps({"samples": manifest.record_count, "shards": len(manifest.shards)}))
    return 0


def cmd_forge_video(args) -> int:
    config = _load_config(args)
    hub = _hub(args, config)
    corpus = Path(args.corpus)
    video_dirs = sorted(p for p in corpus.iterdir() if (p / "frames.json").is_file())
    if not video_dirs:
        raise CliError(f"no video frame directories (with frames.json) in {corpus}")
    if args.dry_run:
        logger.info("dry run: %d videos, clients ready", len(video_dirs))
        return 0

    all_samples = []
    drops: list[DropRecord] = []

    def _one(video_dir: Path):
        spec = json.loads((video_dir / "frames.json").read_text(encoding="utf-8"))
        frames = [
            (float(f["time"]), (video_dir / f["file"]).read_bytes()) for f in spec
        ]
        return process_video(frames, video_dir.name, hub, config.video_engine)

    for samples, video_drops in _run_pool(_one, video_dirs, config.workers):
        all_samples.extend(samples)
        drops.extend(video_drops)
    _write_audit(args.audit, drops)
    if not all_samples:
        raise CliError("no video sample survived the pipeline")
    manifest = write_shard(all_samples, args.out, max_records_per_shard=args.shard_size)
    logger.info(
        "wrote %d samples in %d shards to %s (%d drops)",
        manifest.record_count,
        len(manifest.shards),
        args.out,
        len(drops),
    )
    print(json.dumps({"samples": manifest.record_count, "shards": len(manifest.shards)}))
    return 0


def cmd_bench_curate(args) -> int:
    config = _load_config(args)
    hub = _hub(args, config)
    pool_dir = Path(args.entities)
    files = _iter_corpus(pool_dir)
    entity_pool = [
        VisualAsset(p.read_bytes(), AssetSource.full_image, origin_ref=p.name) for p in files
    ]
    store = ReviewStore(args.store)
    queue = ReviewQueue(store)
    rng = random.Random(config.seed)
    created = 0
    failures = 0
    while created < args.cases and failures < args.cases * 5:
        try:
            case = bench.curate_case(entity_pool, rng, hub)
            queue.add_case(case)
            created += 1
        except (bench.IncompatibleSet, WeaveFailed, ValueError) as exc:
            failures += 1
            logger.info("curation attempt failed: %s", exc)
    if created < args.cases:
        raise CliError(f"only curated {created}/{args.cases} cases")
    logger.info("curated %d pending cases into %s", created, args.store)
    print(json.dumps({"cases": created, **queue.stats()}))
    return 0


def cmd_bench_review_serve(args) -> int:
    store = ReviewStore(args.store)
    queue = ReviewQueue(store)
    static_dir = Path(args.static).resolve() if args.static else None
    app = ReviewApp(queue, store, ReviewServerConfig(args.host, args.port, static_dir))
    server = make_server(app)
    host, port = server.server_address[:2]
    logger.info("review server on http://%s:%s (static=%s)", host, port, static_dir)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        logger.info("review server shutting down")
        server.shutdown()
    return 0


def cmd_bench_eval(args) -> int:
    config = _load_config(args)
    hub = _hub(args, config)
    store = ReviewStore(args.store)
    queue = ReviewQueue(store)
    accepted = queue.cases(state=bench.ACCEPTED)
    if not accepted:
        raise CliError("no accepted cases to evaluate")
    generated_dir = Path(args.generated)
    persisted = store.load_questions()
    records = []
    for case in accepted:
        image_path = generated_dir / f"{case.case_id}.png"
        if not image_path.is_file():
            logger.warning("no generated image for case %s; skipping", case.case_id)
            continue
        questions = persisted.get(case.case_id)
        if questions is None:
            questions = bench.formulate_questions(case, hub)
            store.append_questions(questions)
        record = bench.evaluate_case(image_path.read_bytes(), case, questions, hub)
        records.append(record)
    if not records:
        raise CliError("no case had a generated image")
    out = Path(args.out)
    with out.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.as_dict(), ensure_ascii=False) + "\n")
    logger.info("evaluated %d cases -> %s", len(records), out)
    print(json.dumps({"evaluated": len(records)}))
    return 0


def cmd_bench_report(args) -> int:
    lines = Path(args.records).read_text(encoding="utf-8").splitlines()
    records = [bench.EvalRecord.from_dict(json.loads(line)) for line in lines if line]
    if not records:
        raise CliError(f"no records in {args.records}")
    table = bench.aggregate_report(records)
    print(table.render_text())
    if args.out:
        Path(args.out).write_text(
            json.dumps(table.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
        logger.info("machine-readable report -> %s", args.out)
    return 0


def cmd_mix(args) -> int:
    sources: dict[str, object] = {}
    weights: list[tuple[str, float]] = []
    for item in args.source:
        try:
            name, rest = item.split("=", 1)
            path, weight = rest.rsplit(":", 1)
            weights.append((name, float(weight)))
        except ValueError:
            raise CliError(f"bad --source {item!r}; expected id=path:weight") from None
        sources[name] = (lambda p: (lambda: read_shard(p)))(path)
    spec = MixSpec(sources=tuple(weights), seed=args.seed or 0)
    stream = mix_stream(sources, spec)  # type: ignore[arg-type]
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for _ in range(args.draws):
            source_id, sample = next(stream)
            out.write(json.dumps({"source_id": source_id, "sample_id": sample.sample_id}) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_guide_demo(args) -> int:
    config = guidance.GuidanceConfig(
        s1=args.s1, s2=args.s2, shift=args.shift, num_steps=args.steps
    )
    rng = np.random.default_rng(args.seed or 0)
    z = rng.normal(size=args.dim)

    def toy_denoiser(z_t, conditions, t):
        offset = 0.0
        if conditions.visual is not None:
            offset += 1.0
        if conditions.text is not None:
            offset += 1.0
        return 0.1 * z_t + offset

    schedule = guidance.shifted_schedule(config.num_steps, config.shift)
    coeffs = guidance.affine_coefficients(config)
    print(f"schedule ({config.num_steps} steps, shift {config.shift}):")
    print("  " + ", ".join(f"{t:.4f}" for t in schedule))
    print(
        "affine decomposition: "
        f"(1-s2)={coeffs[0]:+.3f} on e(none,none), "
        f"s2*(1-s1)={coeffs[1]:+.3f} on e(none,visual), "
        f"s2*s1={coeffs[2]:+.3f} on e(text,visual)"
    )
    for t in schedule[: min(3, len(schedule))]:
        result = guidance.guided_step(toy_denoiser, z, "text", "visual", t, config)
        e_null = toy_denoiser(z, guidance.ConditionSet(None, None), t)
        e_vis = toy_denoiser(z, guidance.ConditionSet(None, "visual"), t)
        e_full = toy_denoiser(z, guidance.ConditionSet("text", "visual"), t)
        closed = coeffs[0] * e_null + coeffs[1] * e_vis + coeffs[2] * e_full
        drift = float(np.max(np.abs(result - closed)))
        print(f"t={t:.4f}  guided[0]={result[0]:+.5f}  closed-form drift={drift:.2e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_workers=True):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--mock", help="mock transcript path, or 'echo' for synthetic")
        if with_workers:
            p.add_argument("--workers", type=int, help="worker pool size")
        p.add_argument("--dry-run", action="store_true", help="validate without writing")

    forge = sub.add_parser("forge", help="build training samples").add_subparsers(
        dest="pipeline", required=True
    )
    fi = forge.add_parser("image", help="image corpus -> interleaved samples")
    common(fi)
    fi.add_argument("--corpus", required=True)
    fi.add_argument("--out", required=True)
    fi.add_argument("--audit", help="append drop records to this ndjson file")
    fi.add_argument("--shard-size", type=int, default=10_000)
    fi.set_defaults(func=cmd_forge_image)

    fv = forge.add_parser("video", help="frame directories -> cross-frame samples")
    common(fv)
    fv.add_argument("--corpus", required=True)
    fv.add_argument("--out", required=True)
    fv.add_argument("--audit")
    fv.add_argument("--shard-size", type=int, default=10_000)
    fv.set_defaults(func=cmd_forge_video)

    b = sub.add_parser("bench", help="benchmark curation and evaluation").add_subparsers(
        dest="stage", required=True
    )
    bc = b.add_parser("curate", help="entity pool -> pending cases")
    common(bc, with_workers=False)
    bc.add_argument("--entities", required=True)
    bc.add_argument("--store", required=True)
    bc.add_argument("--cases", type=int, default=10)
    bc.set_defaults(func=cmd_bench_curate)

    bs = b.add_parser("review-serve", help="serve the human review API and UI")
    bs.add_argument("--store", required=True)
    bs.add_argument("--host", default="127.0.0.1")
    bs.add_argument("--port", type=int, default=8487)
    bs.add_argument("--static", help="directory of built review UI assets")
    bs.set_defaults(func=cmd_bench_review_serve)

    be = b.add_parser("eval", help="score generated images for accepted cases")
    common(be, with_workers=False)
    be.add_argument("--store", required=True)
    be.add_argument("--generated", required=True, help="dir of <case_id>.png files")
    be.add_argument("--out", default="eval.ndjson")
    be.set_defaults(func=cmd_bench_eval)

    br = b.add_parser("report", help="aggregate evaluation records")
    br.add_argument("--records", required=True)
    br.add_argument("--out", help="also write machine-readable JSON here")
    br.set_defaults(func=cmd_bench_report)

    mx = sub.add_parser("mix", help="draw from a weighted mix of sample stores")
    mx.add_argument("--source", action="append", required=True, help="id=path:weight")
    mx.add_argument("--draws", type=int, default=1000)
    mx.add_argument("--seed", type=int)
    mx.add_argument("--out")
    mx.set_defaults(func=cmd_mix)

    gd = sub.add_parser("guide", help="guidance utilities").add_subparsers(
        dest="util", required=True
    )
    demo = gd.add_parser("demo", help="toy denoiser through one guided step")
    demo.add_argument("--steps", type=int, default=8)
    demo.add_argument("--dim", type=int, default=4)
    demo.add_argument("--seed", type=int)
    demo.add_argument("--s1", type=float, default=4.0)
    demo.add_argument("--s2", type=float, default=1.5)
    demo.add_argument("--shift", type=float, default=3.0)
    demo.set_defaults(func=cmd_guide_demo)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (CliError, ConfigError) as exc:
        logger.error("%s", exc)
        return OPERATIONAL_ERROR if isinstance(exc, CliError) else USAGE_ERROR
    except (ClientError, OSError, ValueError, RuntimeError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return OPERATIONAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
