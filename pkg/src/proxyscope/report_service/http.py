"""HTTP front end for the report service.

``POST /report`` takes ``{"target_host", "target_port", "chain_pem"}`` and
answers 200 ``{"id", "verdict"}``, 400 for undecodable input, 404 for an
unknown target, 503 when the authoritative chain is unavailable.
``GET /records`` streams matching records as newline-delimited JSON.
"""

from __future__ import annotations

import datetime as dt
import ipaddress
import json
import logging
import threading
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from ..cert_model import Verdict
from ..classifier import ProxyCategory
from ..errors import ParameterError, RejectedReport, RetryableError
from ..policy_gate import PolicyDocument, is_policy_connection, serve_policy_connection
from ..tls_probe import ProbeTarget
from .service import RecordFilter, ReportService

logger = logging.getLogger(__name__)

MAX_BODY = 1 << 20


def _filter_from_query(query: str) -> RecordFilter:
    q = {k: v[-1] for k, v in parse_qs(query).items()}
    try:
        return RecordFilter(
            since=dt.datetime.fromisoformat(q["since"]) if "since" in q else None,
            until=dt.datetime.fromisoformat(q["until"]) if "until" in q else None,
            country=q.get("country"),
            target=ProbeTarget.parse(q["target"]) if "target" in q else None,
            verdict=Verdict(q["verdict"]) if "verdict" in q else None,
            category=ProxyCategory(q["category"]) if "category" in q else None,
        )
    except (ValueError, KeyError) as exc:
        raise ParameterError(f"bad filter: {exc}") from None


class ReportHandler(BaseHTTPRequestHandler):
    server: "ReportServer"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        logger.info("%s %s", self.address_string(), fmt % args)

    def _send_json(self, status: int, body: dict) -> None:
        data = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def client_ip(self) -> str:
        peer = self.client_address[0]
        trusted = self.server.trusted_proxy
        forwarded = self.headers.get("X-Forwarded-For")
        if trusted and forwarded and peer == trusted:
            # the right-most entry is the one our trusted proxy appended
            candidate = forwarded.split(",")[-1].strip()
            try:
                ipaddress.ip_address(candidate)
                return candidate
            except ValueError:
                logger.warning("ignoring malformed X-Forwarded-For %r", forwarded)
        return peer

    def do_POST(self):
        if urlsplit(self.path).path != "/report":
            self._send_json(HTTPStatus.NOT_FOUND, {"error": "no such endpoint"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
        except ValueError:
            length = -1
        if not 0 < length <= MAX_BODY:
            self._send_json(HTTPStatus.BAD_REQUEST, {"error": "bad_length"})
            return
        raw = self.rfile.read(length)
        try:
            body = json.loads(raw)
            host, port, pem = body["target_host"], int(body["target_port"]), body["chain_pem"]
            if not isinstance(host, str) or not isinstance(pem, str):
                raise TypeError("target_host and chain_pem must be strings")
        except (ValueError, KeyError, TypeError) as exc:
            self._send_json(HTTPStatus.BAD_REQUEST, {"error": "undecodable", "detail": str(exc)})
            return
        try:
            record = self.server.service.ingest_report(self.client_ip(), host, port, pem)
        except RejectedReport as exc:
            status = HTTPStatus.NOT_FOUND if exc.reason == "unknown_target" else HTTPStatus.BAD_REQUEST
            self._send_json(status, {"error": exc.reason, "detail": exc.detail})
            return
        except RetryableError as exc:
            self._send_json(HTTPStatus.SERVICE_UNAVAILABLE, {"error": "retry", "detail": str(exc)})
            return
        except ParameterError as exc:
            self._send_json(HTTPStatus.BAD_REQUEST, {"error": "bad_client_ip", "detail": str(exc)})
            return
        self._send_json(HTTPStatus.OK, {"id": record.id, "verdict": record.verdict.value})

    def do_GET(self):
        parts = urlsplit(self.path)
        if parts.path != "/records":
            self._send_json(HTTPStatus.NOT_FOUND, {"error": "no such endpoint"})
            return
        try:
            flt = _filter_from_query(parts.query)
        except ParameterError as exc:
            self._send_json(HTTPStatus.BAD_REQUEST, {"error": "bad_filter", "detail": str(exc)})
            return
        self.send_response(HTTPStatus.OK)
        self.send_header("Content-Type", "application/x-ndjson")
        self.send_header("Connection", "close")
        self.end_headers()
        self.close_connection = True
        for record in self.server.service.query_records(flt):
            self.wfile.write(json.dumps(record.to_dict()).encode() + b"\n")


class ReportServer(ThreadingHTTPServer):
    """Threaded report endpoint; optionally answers socket policy requests on the same port."""

    daemon_threads = True

    def __init__(self, service: ReportService, listen: tuple[str, int] = ("127.0.0.1", 8080), *,
                 trusted_proxy: str | None = None, policy: PolicyDocument | None = None):
        self.service = service
        self.trusted_proxy = trusted_proxy
        self.policy = policy
        super().__init__(listen, ReportHandler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def finish_request(self, request, client_address):
        if self.policy is not None and is_policy_connection(request):
            serve_policy_connection(request, self.policy)
            return
        request.settimeout(None)
        super().finish_request(request, client_address)

    def start(self) -> "ReportServer":
        self._thread = threading.Thread(target=self.serve_forever, name="report-http", daemon=True)
        self._thread.start()
        return self

    def close(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread:
            self._thread.join()

    def __enter__(self):
        return self if self._thread else self.start()

    def __exit__(self, *exc):
        self.close()
