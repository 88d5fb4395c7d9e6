"""Moderation gateway: pre-generation, post-generation, and pair checks.

One fusion model serves all three hook points; absent modalities get
documented neutral placeholders (all-gray image for prompt-only checks,
the empty token sequence for image-only checks). The wire surface is a
minimal HTTP/1.1 JSON API served by the stdlib threading server; the
loaded model is immutable shared state, so concurrent requests are safe.
"""

from __future__ import annotations

import base64
import json
import os
import time
from dataclasses import asdict, dataclass
from enum import Enum
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .datagen import decode_image_tensor
from .errors import NsfwGuardError, ParseError, ValidationError
from .model import ModelParams, load_model, model_fingerprint, neutral_image, score

ENV_CKPT = "NSFWGUARD_CKPT"
ENV_THRESHOLD = "NSFWGUARD_THRESHOLD"
ENV_PORT = "NSFWGUARD_PORT"

DEFAULT_THRESHOLD = 0.5
DEFAULT_PORT = 8741


class Mode(str, Enum):
    PRE_GEN = "PRE_GEN"
    POST_GEN = "POST_GEN"
    PAIR = "PAIR"


class RequestRejected(NsfwGuardError):
    """Client-side request problem; maps to HTTP 400."""


class ServiceUnavailable(NsfwGuardError):
    """No model loaded; maps to HTTP 503."""


@dataclass(frozen=True)
class ModerationResponse:
    decision: str
    score: float
    mode_used: str
    model_version: str
    latency_ms: float

    def to_json(self) -> dict:
        return asdict(self)


class GatewayService:
    """Checkpoint-backed moderation checks shared by CLI and HTTP server."""

    def __init__(self, params: ModelParams | None, threshold: float = DEFAULT_THRESHOLD):
        self.params = params
        self.threshold = threshold
        self.version = model_fingerprint(params) if params is not None else "unloaded"

    def _require_model(self) -> ModelParams:
        if self.params is None:
            raise ServiceUnavailable("no checkpoint loaded")
        return self.params

    def _respond(self, prob: float, mode: Mode, started: float) -> ModerationResponse:
        return ModerationResponse(
            decision="NSFW" if prob >= self.threshold else "SAFE",
            score=prob,
            mode_used=mode.value,
            model_version=self.version,
            latency_ms=max((time.perf_counter() - started) * 1000.0, 0.0),
        )

    def check_pair(self, prompt: str, image: np.ndarray) -> ModerationResponse:
        started = time.perf_counter()
        params = self._require_model()
        prob = score(params, prompt, image, self.threshold)
        return self._respond(prob, Mode.PAIR, started)

    def check_prompt(self, prompt: str) -> ModerationResponse:
        started = time.perf_counter()
        params = self._require_model()
        if not prompt:
            raise RequestRejected("PRE_GEN requires a non-empty prompt")
        prob = score(params, prompt, neutral_image(params.config), self.threshold)
        return self._respond(prob, Mode.PRE_GEN, started)

    def check_image(self, image: np.ndarray) -> ModerationResponse:
        started = time.perf_counter()
        params = self._require_model()
        prob = score(params, "", image, self.threshold)
        return self._respond(prob, Mode.POST_GEN, started)

    def handle_request(self, body: dict) -> ModerationResponse:
        """Validate mode/field pairing strictly, then dispatch.

        Each mode accepts exactly its required fields: a missing required
        field and a present foreign field are both rejected.
        """
        try:
            mode = Mode(body.get("mode"))
        except ValueError:
            raise RequestRejected(f"unknown mode {body.get('mode')!r}") from None
        has_prompt = "prompt" in body and body["prompt"] is not None
        has_image = "image_b64" in body and body["image_b64"] is not None

        if mode == Mode.PRE_GEN:
            if not has_prompt:
                raise RequestRejected("PRE_GEN requires 'prompt'")
            if has_image:
                raise RequestRejected("PRE_GEN does not accept 'image_b64'")
            return self.check_prompt(body["prompt"])
        if mode == Mode.POST_GEN:
            if not has_image:
                raise RequestRejected("POST_GEN requires 'image_b64'")
            if has_prompt:
                raise RequestRejected("POST_GEN does not accept 'prompt'")
            return self.check_image(_decode_image_b64(body["image_b64"]))
        if not has_prompt:
            raise RequestRejected("PAIR requires 'prompt'")
        if not has_image:
            raise RequestRejected("PAIR requires 'image_b64'")
        return self.check_pair(body["prompt"], _decode_image_b64(body["image_b64"]))


def _decode_image_b64(payload: str) -> np.ndarray:
    try:
        raw = base64.b64decode(payload, validate=True)
    except Exception:
        raise RequestRejected("image_b64 is not valid base64") from None
    try:
        return decode_image_tensor(raw)
    except (ParseError, ValidationError) as exc:
        raise RequestRejected(f"malformed image tensor: {exc}") from None


class _Handler(BaseHTTPRequestHandler):
    service: GatewayService  # set on the server class

    def _send(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/v1/health":
            self._send(200, {"status": "ok", "model_version": self.server.service.version})
        else:
            self._send(404, {"error": "not found"})

    def do_POST(self):
        if self.path != "/v1/check":
            self._send(404, {"error": "not found"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = json.loads(self.rfile.read(length) or b"{}")
            if not isinstance(body, dict):
                raise RequestRejected("body must be a JSON object")
            response = self.server.service.handle_request(body)
            self._send(200, response.to_json())
        except json.JSONDecodeError:
            self._send(400, {"error": "body is not valid JSON"})
        except RequestRejected as exc:
            self._send(400, {"error": str(exc)})
        except ServiceUnavailable as exc:
            self._send(503, {"error": str(exc)})
        except NsfwGuardError as exc:
            self._send(400, {"error": str(exc)})

    def log_message(self, fmt, *args):  # one stdout access line per request
        print(f"{self.address_string()} {fmt % args}")


class GatewayServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address: tuple[str, int], service: GatewayService):
        super().__init__(address, _Handler)
        self.service = service


def load_config_file(path: Path | str) -> dict[str, str]:
    """key=value lines; blank lines and #-comments ignored."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {line!r}", lineno)
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def resolve_settings(
    ckpt: str | None = None,
    threshold: float | None = None,
    port: int | None = None,
    config_path: str | None = None,
) -> tuple[str | None, float, int]:
    """Effective settings with precedence: explicit args > env > config file."""
    file_values = load_config_file(config_path) if config_path else {}
    if ckpt is None:
        ckpt = os.environ.get(ENV_CKPT) or file_values.get("ckpt")
    if threshold is None:
        raw = os.environ.get(ENV_THRESHOLD) or file_values.get("threshold")
        threshold = float(raw) if raw is not None else DEFAULT_THRESHOLD
    if port is None:
        raw = os.environ.get(ENV_PORT) or file_values.get("port")
        port = int(raw) if raw is not None else DEFAULT_PORT
    return ckpt, threshold, port


def serve(
    ckpt_path: str,
    port: int,
    threshold: float = DEFAULT_THRESHOLD,
    host: str = "127.0.0.1",
) -> GatewayServer:
    """Build a ready-to-run server (caller invokes serve_forever)."""
    service = GatewayService(load_model(ckpt_path), threshold=threshold)
    return GatewayServer((host, port), service)
