"""Human-verification queue for benchmark cases, plus its HTTP API.

Cases and decisions persist as append-only newline-delimited records next
to a blob directory holding reference images. State transitions are
pending -> accepted | rejected, exactly once, guarded by a lock; leases
keep two reviewers from being handed the same pending case, and expire
after a timeout so abandoned cases return to the queue.

The HTTP server exposes the queue to the browser review UI:

    GET  /api/cases/next?reviewer=R    lease and return the next case
    POST /api/cases/{id}/decision      {decision, reason?, reviewer}
    GET  /api/cases/stats              {pending, accepted, rejected}
    GET  /api/assets/{digest}?...      presigned reference image bytes

plus static files for the UI itself.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import secrets
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from .benchmark import ACCEPTED, PENDING, REJECTED, BenchCase, QuestionSet
from .imaging import sha256_hex
from .instructions import PhraseMapping, parse_template
from .samples import AssetSource, VisualAsset

DEFAULT_LEASE_SECONDS = 600.0
REJECT_REASONS = ("unnatural", "conflicting", "low-quality reference", "other")


class AlreadyDecided(RuntimeError):
    """The case has already left the pending state."""


class UnknownCase(KeyError):
    """No case with that id exists."""


class ReviewStore:
    """Append-only persistence: cases, decisions, questions, blobs."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "blobs").mkdir(exist_ok=True)
        self.cases_path = self.root / "cases.ndjson"
        self.decisions_path = self.root / "decisions.ndjson"
        self.questions_path = self.root / "questions.ndjson"

    def _blob_path(self, digest: str) -> Path:
        return self.root / "blobs" / f"{digest}.png"

    def put_blob(self, data: bytes) -> str:
        digest = sha256_hex(data)
        path = self._blob_path(digest)
        if not path.exists():
            path.write_bytes(data)
        return digest

    def get_blob(self, digest: str) -> bytes | None:
        path = self._blob_path(digest)
        return path.read_bytes() if path.is_file() else None

    def append_case(self, case: BenchCase) -> None:
        refs = []
        for asset in case.references:
            digest = self.put_blob(asset.image_bytes)
            refs.append({"digest": digest, "origin_ref": asset.origin_ref})
        record = {
            "case_id": case.case_id,
            "n_objects": case.n_objects,
            "instruction_text": case.instruction_text,
            "mapping": case.mapping.as_dicts(),
            "references": refs,
            "created_at": time.time(),
        }
        with self.cases_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")

    def append_decision(
        self, case_id: str, decision: str, reviewer: str, reason: str | None
    ) -> None:
        record = {
            "case_id": case_id,
            "decision": decision,
            "reviewer": reviewer,
            "reason": reason,
            "ts": time.time(),
        }
        with self.decisions_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")

    def append_questions(self, questions: QuestionSet) -> None:
        record = {"case_id": questions.case_id, "questions": list(questions.questions)}
        with self.questions_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")

    def load_questions(self) -> dict[str, QuestionSet]:
        out: dict[str, QuestionSet] = {}
        if self.questions_path.is_file():
            for line in self.questions_path.read_text(encoding="utf-8").splitlines():
                if line:
                    data = json.loads(line)
                    out[data["case_id"]] = QuestionSet(
                        data["case_id"], tuple(data["questions"])
                    )
        return out

    def load_cases(self) -> list[BenchCase]:
        """Replay cases then decisions; later records win, first decision sticks."""
        cases: dict[str, BenchCase] = {}
        order: list[str] = []
        if self.cases_path.is_file():
            for line in self.cases_path.read_text(encoding="utf-8").splitlines():
                if not line:
                    continue
                data = json.loads(line)
                references = tuple(
                    VisualAsset(
                        image_bytes=self.get_blob(ref["digest"]) or b"",
                        source=AssetSource.full_image,
                        origin_ref=ref["origin_ref"],
                    )
                    for ref in data["references"]
                )
                case = BenchCase(
                    case_id=data["case_id"],
                    references=references,
                    instruction=parse_template(data["instruction_text"]),
                    mapping=PhraseMapping.from_dicts(data["mapping"]),
                    n_objects=data["n_objects"],
                )
                if case.case_id not in cases:
                    order.append(case.case_id)
                cases[case.case_id] = case
        if self.decisions_path.is_file():
            for line in self.decisions_path.read_text(encoding="utf-8").splitlines():
                if not line:
                    continue
                data = json.loads(line)
                case = cases.get(data["case_id"])
                if case is not None and case.review_state == PENDING:
                    cases[data["case_id"]] = case.with_state(
                        data["decision"], data.get("reason")
                    )
        return [cases[cid] for cid in order]


class ReviewQueue:
    """Serialized review state machine over a ReviewStore."""

    def __init__(
        self,
        store: ReviewStore,
        lease_seconds: float = DEFAULT_LEASE_SECONDS,
        clock=time.monotonic,
    ) -> None:
        self.store = store
        self._lease_seconds = lease_seconds
        self._clock = clock
        self._lock = threading.Lock()
        self._cases: dict[str, BenchCase] = {}
        self._order: list[str] = []
        self._leases: dict[str, tuple[str, float]] = {}
        for case in store.load_cases():
            self._cases[case.case_id] = case
            self._order.append(case.case_id)

    def add_case(self, case: BenchCase) -> None:
        with self._lock:
            if case.case_id in self._cases:
                raise ValueError(f"case {case.case_id} already queued")
            self.store.append_case(case)
            self._cases[case.case_id] = case
            self._order.append(case.case_id)

    def next_case(self, reviewer: str) -> tuple[BenchCase, float] | None:
        """Lease the next pending case; None when none is available.

        A case already leased to the same reviewer is handed back with a
        refreshed lease; other reviewers skip it until the lease expires.
        """
        with self._lock:
            now = self._clock()
            for case_id in self._order:
                case = self._cases[case_id]
                if case.review_state != PENDING:
                    continue
                lease = self._leases.get(case_id)
                if lease is not None and lease[1] > now and lease[0] != reviewer:
                    continue
                expires = now + self._lease_seconds
                self._leases[case_id] = (reviewer, expires)
                return case, expires
            return None

    def record_decision(
        self,
        case_id: str,
        decision: str,
        reviewer: str,
        reason: str | None = None,
    ) -> BenchCase:
        if decision not in (ACCEPTED, REJECTED):
            raise ValueError(f"decision must be accepted or rejected, got {decision!r}")
        if decision == REJECTED and not reason:
            raise ValueError("rejecting requires a reason")
        if not reviewer:
            raise ValueError("reviewer identity is required")
        with self._lock:
            case = self._cases.get(case_id)
            if case is None:
                raise UnknownCase(case_id)
            if case.review_state != PENDING:
                raise AlreadyDecided(f"case {case_id} is already {case.review_state}")
            self.store.append_decision(case_id, decision, reviewer, reason)
            updated = case.with_state(decision, reason)
            self._cases[case_id] = updated
            self._leases.pop(case_id, None)
            return updated

    def stats(self) -> dict[str, int]:
        with self._lock:
            counts = {PENDING: 0, ACCEPTED: 0, REJECTED: 0}
            for case in self._cases.values():
                counts[case.review_state] += 1
            return counts

    def get_case(self, case_id: str) -> BenchCase:
        with self._lock:
            case = self._cases.get(case_id)
            if case is None:
                raise UnknownCase(case_id)
            return case

    def cases(self, state: str | None = None) -> list[BenchCase]:
        with self._lock:
            out = [self._cases[cid] for cid in self._order]
        if state is not None:
            out = [c for c in out if c.review_state == state]
        return out


# ---------------------------------------------------------------------------
# HTTP API
# ---------------------------------------------------------------------------


@dataclass
class ReviewServerConfig:
    host: str = "127.0.0.1"
    port: int = 8487
    static_dir: Path | None = None
    asset_ttl_seconds: float = 3600.0


class ReviewApp:
    """Request-handling core, independent of the socket server."""

    def __init__(self, queue: ReviewQueue, store: ReviewStore, config: ReviewServerConfig) -> None:
        self.queue = queue
        self.store = store
        self.config = config
        self._secret = secrets.token_bytes(32)

    def presign(self, digest: str) -> str:
        expires = int(time.time() + self.config.asset_ttl_seconds)
        sig = hmac.new(
            self._secret, f"{digest}:{expires}".encode(), hashlib.sha256
        ).hexdigest()[:32]
        return f"/api/assets/{digest}?exp={expires}&sig={sig}"

    def _verify(self, digest: str, exp: str, sig: str) -> bool:
        try:
            expires = int(exp)
        except ValueError:
            return False
        if expires < time.time():
            return False
        expect = hmac.new(
            self._secret, f"{digest}:{expires}".encode(), hashlib.sha256
        ).hexdigest()[:32]
        return hmac.compare_digest(expect, sig)

    def case_payload(self, case: BenchCase, lease_expires: float) -> dict:
        references = []
        for i, asset in enumerate(case.references, start=1):
            references.append({"slot": i, "url": self.presign(asset.digest)})
        return {
            "case_id": case.case_id,
            "n_objects": case.n_objects,
            "instruction_text": case.instruction_text,
            "mapping": case.mapping.as_dicts(),
            "references": references,
            "lease_expires_in": max(0.0, lease_expires),
        }

    def handle(self, method: str, path: str, query: dict, body: dict | None):
        """Returns (status, payload) where payload is JSON or (bytes, mime)."""
        if method == "GET" and path == "/api/cases/stats":
            return 200, self.queue.stats()
        if method == "GET" and path == "/api/cases/next":
            reviewer = (query.get("reviewer") or ["anonymous"])[0]
            leased = self.queue.next_case(reviewer)
            if leased is None:
                return 200, {"case": None, "stats": self.queue.stats()}
            case, expires = leased
            remaining = expires - time.monotonic()
            return 200, {
                "case": self.case_payload(case, remaining),
                "stats": self.queue.stats(),
            }
        if method == "POST" and path.startswith("/api/cases/") and path.endswith("/decision"):
            case_id = path[len("/api/cases/") : -len("/decision")]
            if body is None:
                return 400, {"error": "BadRequest", "detail": "JSON body required"}
            decision = body.get("decision", "")
            reviewer = body.get("reviewer", "")
            reason = body.get("reason")
            try:
                updated = self.queue.record_decision(case_id, decision, reviewer, reason)
            except UnknownCase:
                return 404, {"error": "UnknownCase", "case_id": case_id}
            except AlreadyDecided as exc:
                return 409, {"error": "AlreadyDecided", "detail": str(exc)}
            except ValueError as exc:
                return 400, {"error": "BadRequest", "detail": str(exc)}
            return 200, {
                "case_id": updated.case_id,
                "review_state": updated.review_state,
                "stats": self.queue.stats(),
            }
        if method == "GET" and path.startswith("/api/assets/"):
            digest = path[len("/api/assets/") :]
            exp = (query.get("exp") or [""])[0]
            sig = (query.get("sig") or [""])[0]
            if not self._verify(digest, exp, sig):
                return 403, {"error": "Forbidden", "detail": "bad or expired signature"}
            blob = self.store.get_blob(digest)
            if blob is None:
                return 404, {"error": "NotFound"}
            return 200, (blob, "image/png")
        if method == "GET" and self.config.static_dir is not None and not path.startswith("/api/"):
            rel = path.lstrip("/") or "index.html"
            target = (self.config.static_dir / rel).resolve()
            if target.is_file() and str(target).startswith(str(self.config.static_dir.resolve())):
                mime = "text/html"
                if target.suffix == ".js":
                    mime = "text/javascript"
                elif target.suffix == ".css":
                    mime = "text/css"
                return 200, (target.read_bytes(), mime)
            return 404, {"error": "NotFound"}
        return 404, {"error": "NotFound"}


class _Handler(BaseHTTPRequestHandler):
    app: ReviewApp  # assigned by make_server

    def _dispatch(self, method: str) -> None:
        parsed = urlparse(self.path)
        query = parse_qs(parsed.query)
        body = None
        if method == "POST":
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length) if length else b""
            try:
                body = json.loads(raw.decode("utf-8")) if raw else {}
            except ValueError:
                body = None
        status, payload = self.app.handle(method, parsed.path, query, body)
        if isinstance(payload, tuple):
            data, mime = payload
            self.send_response(status)
            self.send_header("Content-Type", mime)
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)
            return
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self) -> None:  # noqa: N802 (BaseHTTPRequestHandler API)
        self._dispatch("GET")

    def do_POST(self) -> None:  # noqa: N802
        self._dispatch("POST")

    def log_message(self, fmt: str, *args) -> None:
        pass  # quiet; callers log at the CLI level


def make_server(app: ReviewApp) -> ThreadingHTTPServer:
    handler = type("ReviewHandler", (_Handler,), {"app": app})
    return ThreadingHTTPServer((app.config.host, app.config.port), handler)
