import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from interleavekit.clients import (
    ClientHub,
    ClientRole,
    Exhausted,
    MockTranscript,
    NonRetriableStatus,
    SchemaViolation,
    ServiceClient,
    ServiceEndpoint,
    Timeout,
    TransportFailure,
    TransportTimeout,
    UnknownRequest,
    http_transport,
    mock_transport,
    request_digest,
    synthesize_response,
    validate_response,
)
from interleavekit.imaging import encode_png, to_b64
from interleavekit.synth import scene_image

IMG_B64 = to_b64(encode_png(scene_image(5)))


def scripted_transport(script):
    """Transport yielding scripted outcomes; an exception instance raises."""
    state = {"i": 0, "calls": 0}

    def _call(role, endpoint, request):
        state["calls"] += 1
        step = script[min(state["i"], len(script) - 1)]
        state["i"] += 1
        if isinstance(step, Exception):
            raise step
        return step

    _call.state = state
    return _call


def quiet_endpoint(max_retries=3):
    return ServiceEndpoint(base_url="http://test", max_retries=max_retries, backoff_base=0.0)


class TestRetryPolicy:
    def test_success_after_two_500s(self):
        transport = scripted_transport([(500, None), (500, None), (200, {"caption": "ok"})])
        client = ServiceClient(quiet_endpoint(3), transport=transport, sleep=lambda s: None)
        body = client.call(ClientRole.captioner, {"image_b64": IMG_B64})
        assert body == {"caption": "ok"}
        assert transport.state["calls"] == 3

    def test_400_is_non_retriable_single_attempt(self):
        transport = scripted_transport([(400, None)])
        client = ServiceClient(quiet_endpoint(3), transport=transport, sleep=lambda s: None)
        with pytest.raises(NonRetriableStatus):
            client.call(ClientRole.captioner, {"image_b64": IMG_B64})
        assert transport.state["calls"] == 1

    def test_429_is_retriable(self):
        transport = scripted_transport([(429, None), (200, {"caption": "ok"})])
        client = ServiceClient(quiet_endpoint(2), transport=transport, sleep=lambda s: None)
        assert client.call(ClientRole.captioner, {"image_b64": IMG_B64})["caption"] == "ok"

    def test_exhausted_after_max_retries(self):
        transport = scripted_transport([(503, None)])
        attempts = []
        client = ServiceClient(
            quiet_endpoint(2),
            transport=transport,
            sleep=lambda s: None,
            on_attempt=lambda role, i: attempts.append(i),
        )
        with pytest.raises(Exhausted):
            client.call(ClientRole.captioner, {"image_b64": IMG_B64})
        assert attempts == [0, 1, 2]  # max_retries + 1 attempts, observable via hook
        assert transport.state["calls"] == 3

    def test_all_timeouts_raise_timeout(self):
        transport = scripted_transport([TransportTimeout("slow")])
        client = ServiceClient(quiet_endpoint(1), transport=transport, sleep=lambda s: None)
        with pytest.raises(Timeout):
            client.call(ClientRole.captioner, {"image_b64": IMG_B64})

    def test_mixed_failures_raise_exhausted(self):
        transport = scripted_transport([TransportTimeout("slow"), TransportFailure("reset")])
        client = ServiceClient(quiet_endpoint(1), transport=transport, sleep=lambda s: None)
        with pytest.raises(Exhausted):
            client.call(ClientRole.captioner, {"image_b64": IMG_B64})

    def test_backoff_is_exponential_with_jitter_factor(self):
        delays = []
        transport = scripted_transport([(500, None)])
        endpoint = ServiceEndpoint(base_url="http://test", max_retries=3, backoff_base=0.25)
        client = ServiceClient(
            endpoint, transport=transport, sleep=delays.append, jitter=lambda: 1.0
        )
        with pytest.raises(Exhausted):
            client.call(ClientRole.captioner, {"image_b64": IMG_B64})
        assert delays == [0.25, 0.5, 1.0]

    def test_schema_violation_not_retried(self):
        transport = scripted_transport([(200, {"wrong": "shape"})])
        client = ServiceClient(quiet_endpoint(3), transport=transport, sleep=lambda s: None)
        with pytest.raises(SchemaViolation):
            client.call(ClientRole.captioner, {"image_b64": IMG_B64})
        assert transport.state["calls"] == 1

    def test_invalid_request_rejected_before_transport(self):
        transport = scripted_transport([(200, {"caption": "x"})])
        client = ServiceClient(quiet_endpoint(), transport=transport)
        with pytest.raises(ValueError):
            client.call(ClientRole.captioner, {})
        assert transport.state["calls"] == 0


class TestEndpointValidation:
    def test_bounds(self):
        with pytest.raises(ValueError):
            ServiceEndpoint(base_url="x", timeout=0)
        with pytest.raises(ValueError):
            ServiceEndpoint(base_url="x", max_retries=9)


class TestBoundedConcurrency:
    def test_in_flight_never_exceeds_budget(self):
        lock = threading.Lock()
        state = {"active": 0, "peak": 0}
        release = threading.Event()

        def counting_transport(role, endpoint, request):
            with lock:
                state["active"] += 1
                state["peak"] = max(state["peak"], state["active"])
            release.wait(0.05)
            with lock:
                state["active"] -= 1
            return 200, {"caption": "ok"}

        client = ServiceClient(quiet_endpoint(0), transport=counting_transport, concurrency=3)
        threads = [
            threading.Thread(
                target=client.call, args=(ClientRole.captioner, {"image_b64": IMG_B64})
            )
            for _ in range(12)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert state["peak"] <= 3


class TestMockBackend:
    def test_same_request_same_response(self):
        transport = mock_transport(MockTranscript())
        r1 = transport(ClientRole.captioner, None, {"image_b64": IMG_B64})
        r2 = transport(ClientRole.captioner, None, {"image_b64": IMG_B64})
        assert r1 == r2

    def test_unknown_request_with_error_policy(self):
        transport = mock_transport(MockTranscript(default_policy="error"))
        with pytest.raises(UnknownRequest):
            transport(ClientRole.captioner, None, {"image_b64": IMG_B64})

    def test_transcripts_differ_only_on_changed_digest(self):
        requests = [{"image_b64": IMG_B64}, {"image_b64": to_b64(b"other")}]
        t_base = MockTranscript()
        t_changed = MockTranscript()
        digest = t_changed.record(
            ClientRole.captioner, requests[1], {"caption": "override"}
        )
        base = mock_transport(t_base)
        changed = mock_transport(t_changed)
        assert base(ClientRole.captioner, None, requests[0]) == changed(
            ClientRole.captioner, None, requests[0]
        )
        assert base(ClientRole.captioner, None, requests[1]) != changed(
            ClientRole.captioner, None, requests[1]
        )
        assert digest == request_digest(ClientRole.captioner, requests[1])

    def test_detector_mock_returns_in_bounds_boxes(self):
        response = synthesize_response(
            ClientRole.detector,
            {"image_b64": IMG_B64},
            request_digest(ClientRole.detector, {"image_b64": IMG_B64}),
        )
        validate_response(ClientRole.detector, response)
        img = scene_image(5)
        assert 4 <= len(response["detections"]) <= 8
        for det in response["detections"]:
            x, y, w, h = det["bbox"]
            assert 0 <= x and 0 <= y and x + w <= img.width and y + h <= img.height

    def test_every_role_synthesizes_schema_valid(self):
        requests = {
            ClientRole.captioner: {"image_b64": IMG_B64},
            ClientRole.detector: {"image_b64": IMG_B64},
            ClientRole.segmenter: {"image_b64": IMG_B64, "bbox": [4, 4, 32, 32]},
            ClientRole.region_describer: {"image_b64": IMG_B64, "mask_rle": "1x1:1"},
            ClientRole.instruction_writer: {
                "global_caption": "a scene",
                "objects": [{"label": "cat", "caption": "a cat"}],
            },
            ClientRole.correspondence_vlm: {"image_b64": IMG_B64, "prompt": "match"},
            ClientRole.change_verifier: {"image_a_b64": IMG_B64, "image_b_b64": IMG_B64},
            ClientRole.judge: {
                "generated_b64": IMG_B64,
                "references": [IMG_B64],
                "instruction": "x",
            },
            ClientRole.qa_answerer: {"image_b64": IMG_B64, "question": "is it?"},
            ClientRole.question_formulator: {"instruction": "x", "phrases": ["cat"]},
        }
        for role, request in requests.items():
            response = synthesize_response(role, request, request_digest(role, request))
            validate_response(role, response)

    def test_transcript_save_load_round_trip(self, tmp_path):
        transcript = MockTranscript(default_policy="error")
        transcript.record(ClientRole.captioner, {"image_b64": IMG_B64}, {"caption": "hi"})
        path = tmp_path / "transcript.json"
        transcript.save(path)
        loaded = MockTranscript.load(path)
        assert loaded.default_policy == "error"
        assert loaded.entries == transcript.entries


class TestHub:
    def test_counts_and_routing(self, echo_hub):
        assert echo_hub.call_count(ClientRole.captioner) == 0
        echo_hub.call(ClientRole.captioner, {"image_b64": IMG_B64})
        echo_hub.call(ClientRole.captioner, {"image_b64": IMG_B64})
        assert echo_hub.call_count(ClientRole.captioner) == 2


class _FlakyHandler(BaseHTTPRequestHandler):
    failures_left = 2

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        self.rfile.read(length)
        cls = type(self)
        if self.path == "/bad":
            self.send_response(400)
            self.end_headers()
            return
        if cls.failures_left > 0:
            cls.failures_left -= 1
            self.send_response(500)
            self.end_headers()
            return
        body = json.dumps({"caption": "live ok"}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


class TestLiveHttpTransport:
    @pytest.fixture()
    def server(self):
        handler = type("Handler", (_FlakyHandler,), {"failures_left": 2})
        srv = ThreadingHTTPServer(("127.0.0.1", 0), handler)
        thread = threading.Thread(target=srv.serve_forever, daemon=True)
        thread.start()
        yield srv
        srv.shutdown()

    def test_retries_through_real_http(self, server):
        port = server.server_address[1]
        endpoint = ServiceEndpoint(
            base_url=f"http://127.0.0.1:{port}/", max_retries=3, backoff_base=0.001
        )
        client = ServiceClient(endpoint, transport=http_transport)
        body = client.call(ClientRole.captioner, {"image_b64": IMG_B64})
        assert body == {"caption": "live ok"}

    def test_400_over_real_http(self, server):
        port = server.server_address[1]
        endpoint = ServiceEndpoint(
            base_url=f"http://127.0.0.1:{port}/bad", max_retries=3, backoff_base=0.001
        )
        client = ServiceClient(endpoint, transport=http_transport)
        with pytest.raises(NonRetriableStatus):
            client.call(ClientRole.captioner, {"image_b64": IMG_B64})
