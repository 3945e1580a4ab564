"""JSON API over the service: path contracts, HTTP server, transports.

Endpoints (paths and schemas are part of the contract):

    POST /api/session    {"profile": {...}}                -> {"session_id"}
    POST /api/challenge  {"session_id"}                    -> challenge payload
    POST /api/answer     {"session_id","challenge_id","selections":[[...],...]}
    POST /api/siteverify {"secret","response"}             -> {"success", ...}
    GET  /api/admin/ledger                                 -> {"hmt_balance","solves"}

Rate-gate refusals answer 429 with {"error": "<exact message>"}; tile
ground truth is never serialized. The same dispatch table backs both the
in-process transport and the threaded HTTP server, so over-network runs
exercise the identical wire schemas.
"""
from __future__ import annotations

import json
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .core import ImageTile
from .errors import (
    BlockedError,
    ConfigError,
    ExpiredChallengeError,
    GauntletError,
    InvalidSelectionError,
)
from .pgm import pgm_b64
from .profiles import ClientProfile
from .service import CaptchaService, GradeResult, NextRound


def _tile_payload(tiles: tuple[ImageTile, ...]) -> list[dict]:
    return [{"tile_id": t.tile_id, "image": pgm_b64(t.bitmap)} for t in tiles]


def handle_session(service: CaptchaService, body: dict) -> tuple[int, dict]:
    try:
        profile = ClientProfile.from_json_dict(body["profile"])
    except (KeyError, TypeError, ConfigError) as exc:
        return 400, {"error": f"invalid profile: {exc}"}
    try:
        session = service.create_session(profile)
    except BlockedError as exc:
        return 429, {"error": exc.message}
    return 200, {"session_id": session.session_id}


def handle_challenge(service: CaptchaService, body: dict) -> tuple[int, dict]:
    session_id = body.get("session_id")
    if not isinstance(session_id, str):
        return 400, {"error": "session_id required"}
    try:
        challenge = service.issue_challenge(session_id)
    except BlockedError as exc:
        return 429, {"error": exc.message}
    except GauntletError as exc:
        return 400, {"error": str(exc)}
    now = service.now_ms()
    return 200, {
        "challenge_id": challenge.challenge_id,
        "prompt_text": challenge.prompt_text,
        "rounds": challenge.rounds,
        "tiles": _tile_payload(challenge.tile_rounds[0]),
        "expires_in_ms": challenge.expires_at - now,
    }


def handle_answer(service: CaptchaService, body: dict) -> tuple[int, dict]:
    session_id = body.get("session_id")
    challenge_id = body.get("challenge_id")
    selections = body.get("selections")
    if not isinstance(session_id, str) or not isinstance(challenge_id, str):
        return 400, {"error": "session_id and challenge_id required"}
    if not isinstance(selections, list) or not all(isinstance(r, list) for r in selections):
        return 400, {"error": "selections must be a list of per-round tile id lists"}
    try:
        outcome = service.submit(session_id, challenge_id, selections)
    except BlockedError as exc:
        return 429, {"error": exc.message}
    except ExpiredChallengeError as exc:
        return 410, {"status": "error", "error": str(exc)}
    except InvalidSelectionError as exc:
        return 400, {"error": str(exc)}
    except GauntletError as exc:
        return 400, {"error": str(exc)}
    if isinstance(outcome, NextRound):
        return 200, {
            "status": "round",
            "round": outcome.round_index + 1,
            "tiles": _tile_payload(outcome.tiles),
            "expires_in_ms": outcome.expires_in_ms,
        }
    assert isinstance(outcome, GradeResult)
    if outcome.status == "pass":
        return 200, {"status": "pass", "token": outcome.token}
    return 200, {"status": "fail"}


def handle_siteverify(service: CaptchaService, body: dict) -> tuple[int, dict]:
    secret = body.get("secret", "")
    token = body.get("response", "")
    success, codes = service.siteverify(str(secret), str(token))
    if success:
        return 200, {"success": True}
    return 200, {"success": False, "error-codes": codes}


def handle_admin_ledger(service: CaptchaService, body: dict) -> tuple[int, dict]:
    return 200, service.ledger_snapshot()


POST_ROUTES = {
    "/api/session": handle_session,
    "/api/challenge": handle_challenge,
    "/api/answer": handle_answer,
    "/api/siteverify": handle_siteverify,
}

GET_ROUTES = {
    "/api/admin/ledger": handle_admin_ledger,
}


def dispatch(service: CaptchaService, method: str, path: str, body: dict | None) -> tuple[int, dict]:
    routes = POST_ROUTES if method == "POST" else GET_ROUTES
    handler = routes.get(path)
    if handler is None:
        return 404, {"error": f"no such endpoint: {method} {path}"}
    return handler(service, body or {})


class InProcessTransport:
    """Default transport: same request/response dicts, no sockets."""

    def __init__(self, service: CaptchaService):
        self.service = service

    def request(self, method: str, path: str, body: dict | None = None) -> tuple[int, dict]:
        return dispatch(self.service, method, path, body)


class HttpTransport:
    """Real-socket transport for --over-network runs."""

    def __init__(self, base_url: str, timeout_s: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s

    def request(self, method: str, path: str, body: dict | None = None) -> tuple[int, dict]:
        url = self.base_url + path
        data = None if method == "GET" else json.dumps(body or {}).encode("utf-8")
        req = urllib.request.Request(
            url, data=data, method=method, headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                return resp.status, json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            payload = exc.read().decode("utf-8")
            try:
                return exc.code, json.loads(payload)
            except json.JSONDecodeError:
                return exc.code, {"error": payload}


Transport = InProcessTransport | HttpTransport


class _Handler(BaseHTTPRequestHandler):
    service: CaptchaService  # set by the server factory

    def _reply(self, status: int, payload: dict) -> None:
        raw = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def do_POST(self):  # noqa: N802 (stdlib handler naming)
        length = int(self.headers.get("Content-Length", "0"))
        try:
            body = json.loads(self.rfile.read(length).decode("utf-8")) if length else {}
        except json.JSONDecodeError:
            self._reply(400, {"error": "invalid JSON body"})
            return
        status, payload = dispatch(self.service, "POST", self.path, body)
        self._reply(status, payload)

    def do_GET(self):  # noqa: N802
        status, payload = dispatch(self.service, "GET", self.path, None)
        self._reply(status, payload)

    def log_message(self, fmt, *args):  # silence per-request stderr noise
        pass


class ServiceServer:
    """Threaded HTTP server wrapper with clean startup/shutdown."""

    def __init__(self, service: CaptchaService, host: str = "127.0.0.1", port: int = 0):
        handler = type("BoundHandler", (_Handler,), {"service": service})
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self.httpd.daemon_threads = True
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def base_url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "ServiceServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        self._thread.join(timeout=5)
