"""Pluggable clients for external model services.

Every service speaks HTTP POST with JSON bodies; each role has a fixed
request/response schema. Calls retry transient failures (network errors,
429, 5xx) with exponential backoff and full jitter, never other 4xx. A
per-client semaphore bounds in-flight requests.

The mock backend answers from a transcript keyed by request-content
digest. Requests not in the transcript either fail (default_policy
"error") or get a deterministic role-appropriate synthetic response
derived from the digest ("echo"), which makes whole pipelines runnable
offline and byte-reproducible.
"""

from __future__ import annotations

import copy
import enum
import json
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .imaging import decode_image, from_b64, rect_mask_rle, sha256_hex


class ClientError(Exception):
    """Base class for service-call failures."""


class SchemaViolation(ClientError):
    """Response failed the role schema; not retriable."""


class Exhausted(ClientError):
    """Retries spent on transient failures."""


class Timeout(ClientError):
    """Every attempt timed out."""


class NonRetriableStatus(ClientError):
    """Server answered a 4xx other than 429."""


class UnknownRequest(ClientError):
    """Mock transcript has no entry and default_policy is 'error'."""


class TransportFailure(Exception):
    """Transient transport-level failure (connection refused, reset...)."""


class TransportTimeout(TransportFailure):
    """Single attempt exceeded the endpoint timeout."""


class ClientRole(str, enum.Enum):
    captioner = "captioner"
    detector = "detector"
    segmenter = "segmenter"
    region_describer = "region_describer"
    instruction_writer = "instruction_writer"
    correspondence_vlm = "correspondence_vlm"
    change_verifier = "change_verifier"
    judge = "judge"
    qa_answerer = "qa_answerer"
    question_formulator = "question_formulator"


@dataclass(frozen=True)
class ServiceEndpoint:
    base_url: str
    api_key: str | None = None
    timeout: float = 10.0
    max_retries: int = 3
    backoff_base: float = 0.25

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if not 0 <= self.max_retries <= 8:
            raise ValueError("max_retries must be in [0, 8]")
        if self.backoff_base < 0:
            raise ValueError("backoff_base must be >= 0")


# ---------------------------------------------------------------------------
# Role schemas
# ---------------------------------------------------------------------------

def _is_bbox(v) -> bool:
    return (
        isinstance(v, (list, tuple))
        and len(v) == 4
        and all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in v)
    )


def _is_str(v) -> bool:
    return isinstance(v, str)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise SchemaViolation(msg)


def _require_req(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(f"invalid request: {msg}")


def validate_request(role: ClientRole, req: dict) -> None:
    _require_req(isinstance(req, dict), "request must be a JSON object")
    if role is ClientRole.captioner or role is ClientRole.detector:
        _require_req(_is_str(req.get("image_b64")) and req["image_b64"], "image_b64 required")
    elif role is ClientRole.segmenter:
        _require_req(_is_str(req.get("image_b64")), "image_b64 required")
        _require_req(_is_bbox(req.get("bbox")), "bbox [x,y,w,h] required")
    elif role is ClientRole.region_describer:
        _require_req(_is_str(req.get("image_b64")), "image_b64 required")
        _require_req(_is_str(req.get("mask_rle")), "mask_rle required")
    elif role is ClientRole.instruction_writer:
        _require_req(_is_str(req.get("global_caption")), "global_caption required")
        objs = req.get("objects")
        _require_req(isinstance(objs, list) and objs, "objects list required")
        for o in objs:
            _require_req(
                isinstance(o, dict) and _is_str(o.get("label")) and _is_str(o.get("caption")),
                "objects entries need label and caption",
            )
    elif role is ClientRole.correspondence_vlm:
        _require_req(_is_str(req.get("image_b64")), "image_b64 required")
        _require_req(_is_str(req.get("prompt")), "prompt required")
    elif role is ClientRole.change_verifier:
        _require_req(_is_str(req.get("image_a_b64")), "image_a_b64 required")
        _require_req(_is_str(req.get("image_b_b64")), "image_b_b64 required")
    elif role is ClientRole.judge:
        _require_req(_is_str(req.get("generated_b64")), "generated_b64 required")
        refs = req.get("references")
        _require_req(isinstance(refs, list) and all(_is_str(r) for r in refs), "references required")
        _require_req(_is_str(req.get("instruction")), "instruction required")
    elif role is ClientRole.qa_answerer:
        _require_req(_is_str(req.get("image_b64")), "image_b64 required")
        _require_req(_is_str(req.get("question")), "question required")
    elif role is ClientRole.question_formulator:
        _require_req(_is_str(req.get("instruction")), "instruction required")
        phrases = req.get("phrases")
        _require_req(
            isinstance(phrases, list) and all(_is_str(p) for p in phrases),
            "phrases list required",
        )


def validate_response(role: ClientRole, body: dict) -> None:
    _require(isinstance(body, dict), "response must be a JSON object")
    if role in (ClientRole.captioner, ClientRole.region_describer):
        _require(_is_str(body.get("caption")), "caption must be a string")
    elif role is ClientRole.detector:
        dets = body.get("detections")
        _require(isinstance(dets, list), "detections must be a list")
        for d in dets:
            _require(
                isinstance(d, dict) and _is_str(d.get("label")) and _is_bbox(d.get("bbox")),
                "detection entries need label and bbox",
            )
    elif role is ClientRole.segmenter:
        _require(_is_str(body.get("mask_rle")), "mask_rle must be a string")
    elif role is ClientRole.instruction_writer:
        _require(_is_str(body.get("interleaved_caption")), "interleaved_caption must be a string")
        mapping = body.get("mapping")
        _require(isinstance(mapping, list), "mapping must be a list")
        for m in mapping:
            _require(
                isinstance(m, dict) and _is_str(m.get("phrase")) and _is_int(m.get("index")),
                "mapping entries need phrase and index",
            )
    elif role is ClientRole.correspondence_vlm:
        matches = body.get("matches")
        _require(isinstance(matches, list), "matches must be a list")
        for m in matches:
            _require(
                isinstance(m, dict)
                and _is_str(m.get("label"))
                and _is_bbox(m.get("bbox_left"))
                and _is_bbox(m.get("bbox_right")),
                "match entries need label, bbox_left, bbox_right",
            )
    elif role is ClientRole.change_verifier:
        _require(isinstance(body.get("changed"), bool), "changed must be a bool")
        _require(_is_str(body.get("reason")), "reason must be a string")
    elif role is ClientRole.judge:
        _require(_is_int(body.get("rating")), "rating must be an integer")
        _require(_is_str(body.get("rationale")), "rationale must be a string")
    elif role is ClientRole.qa_answerer:
        _require(_is_str(body.get("answer")), "answer must be a string")
    elif role is ClientRole.question_formulator:
        qs = body.get("questions")
        _require(
            isinstance(qs, list) and all(_is_str(q) for q in qs),
            "questions must be a list of strings",
        )


# ---------------------------------------------------------------------------
# Transports
# ---------------------------------------------------------------------------

Transport = Callable[[ClientRole, ServiceEndpoint, dict], "tuple[int, dict | None]"]


def http_transport(role: ClientRole, endpoint: ServiceEndpoint, request: dict):
    """POST the request to the role's endpoint URL."""
    import requests

    headers = {"Content-Type": "application/json"}
    if endpoint.api_key:
        headers["Authorization"] = f"Bearer {endpoint.api_key}"
    try:
        resp = requests.post(
            endpoint.base_url, json=request, timeout=endpoint.timeout, headers=headers
        )
    except requests.Timeout as exc:
        raise TransportTimeout(str(exc)) from exc
    except requests.RequestException as exc:
        raise TransportFailure(str(exc)) from exc
    try:
        body = resp.json()
    except ValueError:
        body = None
    return resp.status_code, body


def request_digest(role: ClientRole, request: dict) -> str:
    """Content digest keying mock transcripts; role-scoped to avoid collisions."""
    canonical = json.dumps(
        {"role": role.value, "request": request}, sort_keys=True, separators=(",", ":")
    )
    return sha256_hex(canonical.encode("utf-8"))


@dataclass
class MockTranscript:
    """Canned responses by request digest, with a policy for unknown requests."""

    entries: dict[str, dict] = field(default_factory=dict)
    default_policy: str = "echo"  # "error" | "echo"

    def __post_init__(self) -> None:
        if self.default_policy not in ("error", "echo"):
            raise ValueError(f"unknown default_policy {self.default_policy!r}")

    def record(self, role: ClientRole, request: dict, response: dict) -> str:
        digest = request_digest(role, request)
        self.entries[digest] = response
        return digest

    @classmethod
    def load(cls, path: str | Path) -> "MockTranscript":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            entries=dict(data.get("entries", {})),
            default_policy=data.get("default_policy", "echo"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(
                {"default_policy": self.default_policy, "entries": self.entries},
                indent=2,
                sort_keys=True,
            ),
            encoding="utf-8",
        )


_NOUNS = (
    "robot", "vase", "lamp", "cat", "dog", "mug", "chair", "plant",
    "book", "ball", "hat", "clock", "shoe", "guitar", "kettle", "drone",
    "apple", "train", "boat", "bear", "camera", "jacket", "bottle", "bike",
    "pillow", "radio", "skateboard", "tent", "violin", "wagon", "kite", "statue",
)
_ADJECTIVES = (
    "weathered", "glossy", "striped", "crimson", "pale", "angular",
    "woven", "matte", "speckled", "curved", "faded", "polished",
)


def _rng_for(digest: str) -> random.Random:
    return random.Random(int(digest[:16], 16))


def synthesize_response(role: ClientRole, request: dict, digest: str) -> dict:
    """Deterministic role-appropriate response for a request digest."""
    rng = _rng_for(digest)
    tag = digest[:8]
    if role is ClientRole.captioner:
        adj = rng.choice(_ADJECTIVES)
        return {"caption": f"a {adj} indoor scene ({tag}) holding several distinct objects"}
    if role is ClientRole.detector:
        img = decode_image(from_b64(request["image_b64"]))
        k = rng.randint(4, 8)
        labels = rng.sample(_NOUNS, k)
        detections = []
        for label in labels:
            w = max(4, round(img.width * rng.uniform(0.12, 0.34)))
            h = max(4, round(img.height * rng.uniform(0.12, 0.34)))
            x = rng.randint(0, img.width - w)
            y = rng.randint(0, img.height - h)
            detections.append({"label": label, "bbox": [x, y, w, h]})
        return {"detections": detections}
    if role is ClientRole.segmenter:
        img = decode_image(from_b64(request["image_b64"]))
        bbox = tuple(int(round(v)) for v in request["bbox"])
        return {"mask_rle": rect_mask_rle(img.width, img.height, bbox)}
    if role is ClientRole.region_describer:
        adj = rng.choice(_ADJECTIVES)
        noun = rng.choice(_NOUNS)
        return {"caption": f"a {adj} {noun} with distinctive {tag} markings"}
    if role is ClientRole.instruction_writer:
        labels = [o["label"] for o in request["objects"]]
        parts = []
        for i, label in enumerate(labels, start=1):
            parts.append(f"a [Image{i}] {label}")
        if len(parts) == 1:
            listing = parts[0]
        else:
            listing = ", ".join(parts[:-1]) + f", and {parts[-1]}"
        caption = f"The scene ({tag}) features {listing} arranged across the frame."
        mapping = [{"phrase": label, "index": i} for i, label in enumerate(labels, start=1)]
        return {"interleaved_caption": caption, "mapping": mapping}
    if role is ClientRole.correspondence_vlm:
        img = decode_image(from_b64(request["image_b64"]))
        k = rng.randint(2, 5)
        labels = rng.sample(_NOUNS, k)
        matches = []
        for label in labels:
            straddle = rng.random() < 0.125
            y = round(img.height * rng.uniform(0.05, 0.6))
            h = max(4, round(img.height * rng.uniform(0.1, 0.3)))
            if straddle:
                left = [round(img.width * 0.45), y, round(img.width * 0.1), h]
            else:
                lw = max(4, round(img.width * rng.uniform(0.06, 0.12)))
                lx = round(img.width * rng.uniform(0.02, 0.28))
                left = [lx, y, lw, h]
            rw = max(4, round(img.width * rng.uniform(0.06, 0.12)))
            rx = round(img.width * rng.uniform(0.60, 0.85))
            right = [rx, y, rw, h]
            matches.append({"label": label, "bbox_left": left, "bbox_right": right})
        return {"matches": matches}
    if role is ClientRole.change_verifier:
        changed = int(digest[:16], 16) % 4 != 0
        reason = (
            "pose and lighting differ noticeably" if changed else "no meaningful difference"
        )
        return {"changed": changed, "reason": reason}
    if role is ClientRole.judge:
        rating = 1 + int(digest[:16], 16) % 5
        return {"rating": rating, "rationale": f"identity assessment {tag}"}
    if role is ClientRole.qa_answerer:
        return {"answer": "yes" if int(digest[:16], 16) % 3 else "no"}
    if role is ClientRole.question_formulator:
        questions = [
            f"Does the generated image contain the {p} from the references?"
            for p in request["phrases"]
        ]
        if len(request["phrases"]) >= 2:
            questions.append(
                "Is the arrangement of the referenced objects consistent with the instruction?"
            )
        return {"questions": questions}
    raise ValueError(f"no synthesizer for role {role}")


def mock_transport(transcript: MockTranscript) -> Transport:
    """Transport answering purely from the transcript (plus echo synthesis)."""

    def _call(role: ClientRole, endpoint: ServiceEndpoint, request: dict):
        digest = request_digest(role, request)
        if digest in transcript.entries:
            return 200, copy.deepcopy(transcript.entries[digest])
        if transcript.default_policy == "error":
            raise UnknownRequest(f"no transcript entry for {role.value} digest {digest[:12]}")
        return 200, synthesize_response(role, request, digest)

    return _call


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------

MOCK_ENDPOINT = ServiceEndpoint(base_url="mock://local", max_retries=0, timeout=1.0)


class ServiceClient:
    """One endpoint with retries, schema checks, and bounded concurrency."""

    def __init__(
        self,
        endpoint: ServiceEndpoint,
        transport: Transport = http_transport,
        concurrency: int = 8,
        on_attempt: Callable[[ClientRole, int], None] | None = None,
        sleep: Callable[[float], None] = time.sleep,
        jitter: Callable[[], float] = random.random,
    ) -> None:
        if concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        self.endpoint = endpoint
        self._transport = transport
        self._semaphore = threading.BoundedSemaphore(concurrency)
        self._on_attempt = on_attempt
        self._sleep = sleep
        self._jitter = jitter

    def call(self, role: ClientRole, request: dict) -> dict:
        validate_request(role, request)
        attempts = self.endpoint.max_retries + 1
        with self._semaphore:
            failures: list[str] = []
            timed_out = 0
            for attempt in range(attempts):
                if self._on_attempt is not None:
                    self._on_attempt(role, attempt)
                try:
                    status, body = self._transport(role, self.endpoint, request)
                except TransportTimeout as exc:
                    timed_out += 1
                    failures.append(f"timeout: {exc}")
                except TransportFailure as exc:
                    failures.append(f"network: {exc}")
                else:
                    if status == 200:
                        if body is None:
                            raise SchemaViolation(f"{role.value}: response body is not JSON")
                        validate_response(role, body)
                        return body
                    if status == 429 or status >= 500:
                        failures.append(f"status {status}")
                    else:
                        raise NonRetriableStatus(f"{role.value}: status {status}")
                if attempt < attempts - 1:
                    delay = self.endpoint.backoff_base * (2**attempt) * self._jitter()
                    if delay > 0:
                        self._sleep(delay)
            if timed_out == attempts:
                raise Timeout(f"{role.value}: all {attempts} attempts timed out")
            raise Exhausted(f"{role.value}: retries spent ({'; '.join(failures)})")


class ClientHub:
    """Role -> client routing plus per-role call counters."""

    def __init__(self, clients: dict[ClientRole, ServiceClient]) -> None:
        self._clients = clients
        self._counts: dict[ClientRole, int] = {}
        self._lock = threading.Lock()

    def call(self, role: ClientRole, request: dict) -> dict:
        try:
            client = self._clients[role]
        except KeyError:
            raise ClientError(f"no client configured for role {role.value}") from None
        with self._lock:
            self._counts[role] = self._counts.get(role, 0) + 1
        return client.call(role, request)

    def call_count(self, role: ClientRole) -> int:
        with self._lock:
            return self._counts.get(role, 0)

    def reset_counts(self) -> None:
        with self._lock:
            self._counts.clear()

    @classmethod
    def mocked(cls, transcript: MockTranscript, concurrency: int = 8) -> "ClientHub":
        transport = mock_transport(transcript)
        clients = {
            role: ServiceClient(MOCK_ENDPOINT, transport=transport, concurrency=concurrency)
            for role in ClientRole
        }
        return cls(clients)

    @classmethod
    def from_endpoints(
        cls,
        endpoints: dict[ClientRole, ServiceEndpoint],
        concurrency: int = 8,
        transport: Transport = http_transport,
    ) -> "ClientHub":
        clients = {
            role: ServiceClient(ep, transport=transport, concurrency=concurrency)
            for role, ep in endpoints.items()
        }
        return cls(clients)
