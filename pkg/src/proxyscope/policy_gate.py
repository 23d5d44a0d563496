"""Socket policy files: serve them byte-exactly, and scan hosts for permissive ones."""

from __future__ import annotations

import enum
import logging
import socket
import threading
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import Callable, Iterable

from .errors import PolicyError

logger = logging.getLogger(__name__)

CANONICAL_REQUEST = b"<policy-file-request/>\x00"
DEFAULT_POLICY_PORT = 843
DEFAULT_SCAN_TIMEOUT_MS = 5000
MAX_POLICY_BYTES = 64 * 1024


class PortSet:
    """Ports named by a ``to-ports`` attribute: ``443``, ``80,443``, ``1000-2000``, ``*``."""

    def __init__(self, ranges: Iterable[tuple[int, int]]):
        merged: list[list[int]] = []
        for lo, hi in sorted(ranges):
            if not 1 <= lo <= hi <= 65535:
                raise PolicyError(f"bad port range {lo}-{hi}")
            if merged and lo <= merged[-1][1] + 1:
                merged[-1][1] = max(merged[-1][1], hi)
            else:
                merged.append([lo, hi])
        self.ranges = tuple((lo, hi) for lo, hi in merged)

    @classmethod
    def parse(cls, text: str) -> "PortSet":
        ranges = []
        for part in text.split(","):
            part = part.strip()
            if part == "*":
                ranges.append((1, 65535))
                continue
            lo, sep, hi = part.partition("-")
            try:
                lo_n = int(lo)
                hi_n = int(hi) if sep else lo_n
            except ValueError:
                raise PolicyError(f"bad to-ports entry {part!r}") from None
            ranges.append((lo_n, hi_n))
        return cls(ranges)

    @classmethod
    def of(cls, ports: Iterable[int]) -> "PortSet":
        return cls((p, p) for p in ports)

    def __contains__(self, port: int) -> bool:
        return any(lo <= port <= hi for lo, hi in self.ranges)

    def __or__(self, other: "PortSet") -> "PortSet":
        return PortSet(self.ranges + other.ranges)

    def __eq__(self, other) -> bool:
        return isinstance(other, PortSet) and self.ranges == other.ranges

    def __hash__(self) -> int:
        return hash(self.ranges)

    def __bool__(self) -> bool:
        return bool(self.ranges)

    def __str__(self) -> str:
        if self.ranges == ((1, 65535),):
            return "*"
        return ",".join(str(lo) if lo == hi else f"{lo}-{hi}" for lo, hi in self.ranges)

    def __repr__(self) -> str:
        return f"PortSet({str(self)!r})"


@dataclass(frozen=True)
class PolicyDocument:
    allowed: tuple[tuple[str, PortSet], ...]
    raw_xml: str

    @classmethod
    def from_xml(cls, raw_xml: str) -> "PolicyDocument":
        try:
            root = ET.fromstring(raw_xml)
        except ET.ParseError as exc:
            raise PolicyError(f"policy XML not well-formed: {exc}") from None
        if root.tag != "cross-domain-policy":
            raise PolicyError(f"unexpected root element <{root.tag}>")
        allowed = []
        for el in root.iter("allow-access-from"):
            domain = el.get("domain")
            ports = el.get("to-ports")
            if not domain or ports is None:
                raise PolicyError("allow-access-from needs domain and to-ports")
            allowed.append((domain.strip(), PortSet.parse(ports)))
        return cls(tuple(allowed), raw_xml)

    @classmethod
    def build(cls, allowed: Iterable[tuple[str, str | Iterable[int]]]) -> "PolicyDocument":
        root = ET.Element("cross-domain-policy")
        for domain, ports in allowed:
            spec = ports if isinstance(ports, str) else str(PortSet.of(ports))
            ET.SubElement(root, "allow-access-from", {"domain": domain, "to-ports": spec})
        return cls.from_xml(ET.tostring(root, encoding="unicode"))

    def ports_for_any_domain(self) -> PortSet:
        out = PortSet(())
        for domain, ports in self.allowed:
            if domain == "*":
                out = out | ports
        return out


def handle_policy_request(request: bytes, document: PolicyDocument) -> bytes:
    """The policy XML plus NUL for the exact canonical request, nothing for anything else."""
    if request == CANONICAL_REQUEST:
        return document.raw_xml.encode("utf-8") + b"\x00"
    return b""


def _read_request(conn: socket.socket, deadline: float) -> bytes:
    # read until the request is complete, provably wrong, or the peer stops
    data = b""
    while len(data) < len(CANONICAL_REQUEST) and CANONICAL_REQUEST.startswith(data):
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            break
        conn.settimeout(remaining)
        try:
            chunk = conn.recv(len(CANONICAL_REQUEST) - len(data))
        except OSError:
            break
        if not chunk:
            break
        data += chunk
    return data


def serve_policy_connection(conn: socket.socket, document: PolicyDocument,
                            timeout_s: float = 5.0) -> bool:
    """Answer one connection and close it. Returns whether a policy was sent."""
    try:
        response = handle_policy_request(_read_request(conn, time.monotonic() + timeout_s), document)
        if response:
            conn.sendall(response)
        return bool(response)
    except OSError as exc:
        logger.debug("policy connection dropped: %s", exc)
        return False
    finally:
        conn.close()


class PolicyServer:
    """Listens for policy requests.

    With a ``fallback`` the port is shared: connections whose first byte is
    not ``<`` are handed to ``fallback(conn, peer)`` untouched.
    """

    def __init__(self, document: PolicyDocument,
                 listen: tuple[str, int] = ("127.0.0.1", DEFAULT_POLICY_PORT),
                 fallback: Callable[[socket.socket, tuple], None] | None = None,
                 timeout_s: float = 5.0):
        self.document = document
        self.fallback = fallback
        self.timeout_s = timeout_s
        self._listen = listen
        self._sock: socket.socket | None = None
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    def start(self) -> "PolicyServer":
        self._sock = socket.create_server(self._listen)
        self._sock.settimeout(0.2)
        self._thread = threading.Thread(target=self._serve, name="policy-accept", daemon=True)
        self._thread.start()
        return self

    def close(self) -> None:
        self._stop.set()
        if self._thread:
            self._thread.join()
        if self._sock:
            self._sock.close()

    def __enter__(self):
        return self if self._sock else self.start()

    def __exit__(self, *exc):
        self.close()

    def serve_forever(self) -> None:
        self.start()
        try:
            self._thread.join()
        finally:
            self.close()

    def _serve(self) -> None:
        while not self._stop.is_set():
            try:
                conn, peer = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            threading.Thread(target=self._dispatch, args=(conn, peer), daemon=True).start()

    def _dispatch(self, conn: socket.socket, peer) -> None:
        if self.fallback is not None and not is_policy_connection(conn, self.timeout_s):
            self.fallback(conn, peer)
            return
        serve_policy_connection(conn, self.document, self.timeout_s)


def is_policy_connection(conn: socket.socket, timeout_s: float = 5.0) -> bool:
    """Peek at the first byte without consuming it."""
    conn.settimeout(timeout_s)
    try:
        first = conn.recv(1, socket.MSG_PEEK)
    except OSError:
        return False
    return first == b"<"


class ScanOutcome(str, enum.Enum):
    PERMISSIVE = "permissive"
    RESTRICTIVE = "restrictive"
    ABSENT = "absent"
    MALFORMED = "malformed"


@dataclass(frozen=True)
class PolicyScanResult:
    host: str
    port: int
    outcome: ScanOutcome
    permitted: PortSet | None = None  # ports open to domain="*" when permissive
    detail: str = ""

    def permits(self, port: int) -> bool:
        return self.outcome is ScanOutcome.PERMISSIVE and port in self.permitted


def fetch_policy(host: str, port: int = DEFAULT_POLICY_PORT,
                 timeout_ms: int = DEFAULT_SCAN_TIMEOUT_MS) -> bytes | None:
    """Send the canonical request and read up to the terminating NUL; None if unreachable."""
    if timeout_ms <= 0:
        raise ValueError("timeout_ms must be positive")
    deadline = time.monotonic() + timeout_ms / 1000
    try:
        sock = socket.create_connection((host, port), timeout=timeout_ms / 1000)
    except OSError:
        return None
    data = b""
    with sock:
        try:
            sock.sendall(CANONICAL_REQUEST)
            while b"\x00" not in data and len(data) < MAX_POLICY_BYTES:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                sock.settimeout(remaining)
                chunk = sock.recv(4096)
                if not chunk:
                    break
                data += chunk
        except OSError:
            pass
    return data.split(b"\x00", 1)[0]


def evaluate_policy(host: str, port: int, body: bytes | None, target_port: int = 443) -> PolicyScanResult:
    if not body:
        return PolicyScanResult(host, port, ScanOutcome.ABSENT)
    try:
        document = PolicyDocument.from_xml(body.decode("utf-8"))
    except (UnicodeDecodeError, PolicyError) as exc:
        return PolicyScanResult(host, port, ScanOutcome.MALFORMED, detail=str(exc))
    open_ports = document.ports_for_any_domain()
    if target_port in open_ports:
        return PolicyScanResult(host, port, ScanOutcome.PERMISSIVE, open_ports)
    return PolicyScanResult(host, port, ScanOutcome.RESTRICTIVE)


def scan_policy(host: str, port: int = DEFAULT_POLICY_PORT, timeout_ms: int = DEFAULT_SCAN_TIMEOUT_MS,
                target_port: int = 443) -> PolicyScanResult:
    """Whether ``host`` serves a policy letting any domain reach ``target_port``."""
    return evaluate_policy(host, port, fetch_policy(host, port, timeout_ms), target_port)
