"""Partial TLS handshake: send a ClientHello, keep ServerHello and Certificate, abort.

Only TLS 1.0-1.2 are offered because the Certificate message travels in
cleartext there; under 1.3 it is encrypted and the method does not apply.
"""

from __future__ import annotations

import enum
import ipaddress
import logging
import os
import re
import socket
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

from .errors import (
    EmptyChainError,
    HandshakeAlert,
    IncompleteError,
    ParameterError,
    ProtocolError,
)

logger = logging.getLogger(__name__)

DEFAULT_PORT = 443
DEFAULT_TIMEOUT_MS = 5000
DEFAULT_CONCURRENCY = 32

CT_CHANGE_CIPHER_SPEC = 0x14
CT_ALERT = 0x15
CT_HANDSHAKE = 0x16
CT_APPLICATION_DATA = 0x17

HT_CLIENT_HELLO = 0x01
HT_SERVER_HELLO = 0x02
HT_CERTIFICATE = 0x0B
HT_SERVER_KEY_EXCHANGE = 0x0C
HT_SERVER_HELLO_DONE = 0x0E

EXT_SERVER_NAME = 0x0000
EXT_SUPPORTED_GROUPS = 0x000A
EXT_EC_POINT_FORMATS = 0x000B
EXT_SIGNATURE_ALGORITHMS = 0x000D
EXT_SUPPORTED_VERSIONS = 0x002B
EXT_RENEGOTIATION_INFO = 0xFF01

ALERT_FATAL = 2
ALERT_HANDSHAKE_FAILURE = 40
ALERT_USER_CANCELED = 90

MAX_RECORD_PAYLOAD = 2**14 + 2048


class TLSVersion(enum.IntEnum):
    TLS1_0 = 0x0301
    TLS1_1 = 0x0302
    TLS1_2 = 0x0303

    @property
    def label(self) -> str:
        return {0x0301: "1.0", 0x0302: "1.1", 0x0303: "1.2"}[self.value]

    @classmethod
    def parse(cls, text: str) -> "TLSVersion":
        for v in cls:
            if v.label == text or v.name == text:
                return v
        raise ParameterError(f"unknown TLS version {text!r}")


_VERSION_VALUES = frozenset(int(v) for v in TLSVersion)


# TLS 1.2 mandatory suite (TLS_RSA_WITH_AES_128_CBC_SHA) plus the common
# ECDHE/RSA AEAD and CBC suites.
DEFAULT_CIPHER_SUITES: tuple[int, ...] = (
    0xC02F,  # ECDHE_RSA_WITH_AES_128_GCM_SHA256
    0xC030,  # ECDHE_RSA_WITH_AES_256_GCM_SHA384
    0xC02B,  # ECDHE_ECDSA_WITH_AES_128_GCM_SHA256
    0xC02C,  # ECDHE_ECDSA_WITH_AES_256_GCM_SHA384
    0xC013,  # ECDHE_RSA_WITH_AES_128_CBC_SHA
    0xC014,  # ECDHE_RSA_WITH_AES_256_CBC_SHA
    0xC009,  # ECDHE_ECDSA_WITH_AES_128_CBC_SHA
    0xC00A,  # ECDHE_ECDSA_WITH_AES_256_CBC_SHA
    0x009C,  # RSA_WITH_AES_128_GCM_SHA256
    0x009D,  # RSA_WITH_AES_256_GCM_SHA384
    0x002F,  # RSA_WITH_AES_128_CBC_SHA
    0x0035,  # RSA_WITH_AES_256_CBC_SHA
)

_GROUPS = (0x001D, 0x0017, 0x0018)  # x25519, secp256r1, secp384r1
_SIGNATURE_SCHEMES = (
    0x0401, 0x0501, 0x0601,  # rsa_pkcs1_sha256/384/512
    0x0403, 0x0503, 0x0603,  # ecdsa_secp256r1_sha256 ...
    0x0804, 0x0805, 0x0806,  # rsa_pss_rsae_*
    0x0201, 0x0203,  # sha1 variants, for old servers
)

_DNS_LABEL = re.compile(r"^(?!-)[A-Za-z0-9-]{1,63}(?<!-)$")


def is_ip_literal(host: str) -> bool:
    try:
        ipaddress.ip_address(host)
    except ValueError:
        return False
    return True


def is_dns_name(name: str) -> bool:
    name = name[:-1] if name.endswith(".") else name
    if not name or len(name) > 253 or is_ip_literal(name):
        return False
    return all(_DNS_LABEL.match(label) for label in name.split("."))


@dataclass(frozen=True)
class ProbeTarget:
    host: str
    port: int = DEFAULT_PORT
    server_name: str | None = None

    def __post_init__(self):
        if not self.host:
            raise ParameterError("host must be nonempty")
        if not isinstance(self.port, int) or not 1 <= self.port <= 65535:
            raise ParameterError(f"port out of range: {self.port!r}")
        if self.server_name is not None and not is_dns_name(self.server_name):
            raise ParameterError(f"invalid server_name {self.server_name!r}")

    @property
    def sni_name(self) -> str | None:
        if self.server_name:
            return self.server_name
        return self.host if is_dns_name(self.host) else None

    @property
    def expected_name(self) -> str:
        """Name the genuine certificate is expected to be issued to."""
        return self.server_name or self.host

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"

    @classmethod
    def parse(cls, text: str) -> "ProbeTarget":
        """``host``, ``host:port`` or ``[v6]:port``."""
        if text.startswith("["):
            host, _, rest = text[1:].partition("]")
            port = int(rest[1:]) if rest.startswith(":") else DEFAULT_PORT
            return cls(host, port)
        if text.count(":") == 1:
            host, port = text.split(":")
            return cls(host, int(port))
        return cls(text)


@dataclass(frozen=True)
class ClientHelloParams:
    offered_versions: frozenset[TLSVersion] = frozenset({TLSVersion.TLS1_2})
    cipher_suites: tuple[int, ...] = DEFAULT_CIPHER_SUITES
    client_random: bytes = field(default_factory=lambda: os.urandom(32))
    include_sni: bool = True

    def __post_init__(self):
        if not self.offered_versions:
            raise ParameterError("offered_versions must be nonempty")
        if not set(self.offered_versions) <= _VERSION_VALUES:
            raise ParameterError(f"unsupported versions {sorted(self.offered_versions)}")
        object.__setattr__(self, "offered_versions",
                           frozenset(TLSVersion(v) for v in self.offered_versions))
        object.__setattr__(self, "cipher_suites", tuple(self.cipher_suites))
        if not self.cipher_suites:
            raise ParameterError("cipher_suites must be nonempty")
        if any(not 0 <= s <= 0xFFFF for s in self.cipher_suites):
            raise ParameterError("cipher suite IDs are 16-bit")
        if len(self.client_random) != 32:
            raise ParameterError("client_random must be exactly 32 bytes")


class HandshakeMessage(NamedTuple):
    type: int
    body: bytes

    def encode(self) -> bytes:
        return encode_handshake(self.type, self.body)


# --- encoders ---------------------------------------------------------------


def _u8_vec(data: bytes) -> bytes:
    return struct.pack("!B", len(data)) + data


def _u16_vec(data: bytes) -> bytes:
    return struct.pack("!H", len(data)) + data


def _u24(n: int) -> bytes:
    return n.to_bytes(3, "big")


def encode_record(content_type: int, payload: bytes, version: int = TLSVersion.TLS1_2) -> bytes:
    return struct.pack("!BHH", content_type, version, len(payload)) + payload


def encode_handshake(msg_type: int, body: bytes) -> bytes:
    return bytes([msg_type]) + _u24(len(body)) + body


def encode_alert(description: int, level: int = ALERT_FATAL,
                 version: int = TLSVersion.TLS1_2) -> bytes:
    return encode_record(CT_ALERT, bytes([level, description]), version)


def encode_certificate_body(blobs: Iterable[bytes]) -> bytes:
    entries = b"".join(_u24(len(b)) + b for b in blobs)
    return _u24(len(entries)) + entries


def _extension(ext_type: int, data: bytes) -> bytes:
    return struct.pack("!HH", ext_type, len(data)) + data


def build_client_hello(params: ClientHelloParams, target: ProbeTarget) -> bytes:
    """Encode a complete ClientHello handshake record."""
    if not isinstance(params, ClientHelloParams):
        raise ParameterError("params must be ClientHelloParams")
    versions = sorted(params.offered_versions, reverse=True)
    suites = b"".join(struct.pack("!H", s) for s in params.cipher_suites)

    exts = []
    sni = target.sni_name
    if params.include_sni and sni:
        host = sni.rstrip(".").encode("ascii")
        entry = b"\x00" + _u16_vec(host)
        exts.append(_extension(EXT_SERVER_NAME, _u16_vec(entry)))
    exts.append(_extension(EXT_SUPPORTED_GROUPS,
                           _u16_vec(b"".join(struct.pack("!H", g) for g in _GROUPS))))
    exts.append(_extension(EXT_EC_POINT_FORMATS, _u8_vec(b"\x00")))
    exts.append(_extension(EXT_SIGNATURE_ALGORITHMS,
                           _u16_vec(b"".join(struct.pack("!H", s) for s in _SIGNATURE_SCHEMES))))
    exts.append(_extension(EXT_SUPPORTED_VERSIONS,
                           _u8_vec(b"".join(struct.pack("!H", v) for v in versions))))
    exts.append(_extension(EXT_RENEGOTIATION_INFO, b"\x00"))

    body = (
        struct.pack("!H", versions[0])
        + params.client_random
        + _u8_vec(b"")  # no session id
        + _u16_vec(suites)
        + _u8_vec(b"\x00")  # null compression only
        + _u16_vec(b"".join(exts))
    )
    return encode_record(CT_HANDSHAKE, encode_handshake(HT_CLIENT_HELLO, body),
                         TLSVersion.TLS1_0)


# --- decoders ---------------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ProtocolError(f"field overruns message ({n} bytes at {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("!H", self.take(2))[0]

    def u24(self) -> int:
        return int.from_bytes(self.take(3), "big")

    def remaining(self) -> int:
        return len(self.data) - self.pos


def _parse_extensions(r: _Reader) -> dict[int, bytes]:
    if r.remaining() == 0:
        return {}
    block = _Reader(r.take(r.u16()))
    exts = {}
    while block.remaining():
        ext_type = block.u16()
        exts[ext_type] = block.take(block.u16())
    return exts


@dataclass(frozen=True)
class ParsedClientHello:
    legacy_version: int
    versions: frozenset[int]
    cipher_suites: tuple[int, ...]
    random: bytes
    server_name: str | None
    extensions: dict


def parse_client_hello(body: bytes) -> ParsedClientHello:
    """Decode a ClientHello handshake body (no record or handshake header)."""
    r = _Reader(body)
    legacy = r.u16()
    random = r.take(32)
    r.take(r.u8())
    raw = r.take(r.u16())
    suites = tuple(struct.unpack(f"!{len(raw) // 2}H", raw))
    r.take(r.u8())
    exts = _parse_extensions(r)
    versions = frozenset({legacy})
    if EXT_SUPPORTED_VERSIONS in exts:
        sv = _Reader(exts[EXT_SUPPORTED_VERSIONS])
        lst = sv.take(sv.u8())
        versions = frozenset(struct.unpack(f"!{len(lst) // 2}H", lst))
    name = None
    if EXT_SERVER_NAME in exts:
        sn = _Reader(exts[EXT_SERVER_NAME])
        entries = _Reader(sn.take(sn.u16()))
        while entries.remaining():
            kind = entries.u8()
            value = entries.take(entries.u16())
            if kind == 0:
                name = value.decode("ascii")
    return ParsedClientHello(legacy, versions, suites, random, name, exts)


@dataclass(frozen=True)
class ServerHelloInfo:
    version: int
    random: bytes
    cipher_suite: int


def parse_server_hello(body: bytes) -> ServerHelloInfo:
    r = _Reader(body)
    version = r.u16()
    random = r.take(32)
    r.take(r.u8())
    suite = r.u16()
    r.u8()
    exts = _parse_extensions(r)
    if EXT_SUPPORTED_VERSIONS in exts and len(exts[EXT_SUPPORTED_VERSIONS]) == 2:
        version = struct.unpack("!H", exts[EXT_SUPPORTED_VERSIONS])[0]
    return ServerHelloInfo(version, random, suite)


class HandshakeReassembler:
    """Incrementally turn server-side record bytes into handshake messages.

    Feed it whatever ``recv`` returns; it yields complete messages in wire
    order and buffers the rest.
    """

    def __init__(self):
        self._records = bytearray()
        self._handshake = bytearray()

    @property
    def pending(self) -> bool:
        return bool(self._records or self._handshake)

    def feed(self, data: bytes) -> list[HandshakeMessage]:
        self._records.extend(data)
        out: list[HandshakeMessage] = []
        while len(self._records) >= 5:
            ctype, version, length = struct.unpack("!BHH", self._records[:5])
            if version >> 8 != 3:
                raise ProtocolError(f"bad record version 0x{version:04x}")
            if length > MAX_RECORD_PAYLOAD:
                raise ProtocolError(f"record length {length} exceeds limit")
            if len(self._records) < 5 + length:
                break
            payload = bytes(self._records[5:5 + length])
            del self._records[:5 + length]
            if ctype == CT_ALERT:
                if len(payload) < 2:
                    raise ProtocolError("short alert record")
                raise HandshakeAlert(payload[0], payload[1])
            if ctype != CT_HANDSHAKE:
                raise ProtocolError(f"unexpected record type 0x{ctype:02x} during handshake")
            if length == 0:
                raise ProtocolError("empty handshake record")
            self._handshake.extend(payload)
            out.extend(self._drain())
        return out

    def _drain(self) -> list[HandshakeMessage]:
        out = []
        while len(self._handshake) >= 4:
            size = int.from_bytes(self._handshake[1:4], "big")
            if len(self._handshake) < 4 + size:
                break
            out.append(HandshakeMessage(self._handshake[0], bytes(self._handshake[4:4 + size])))
            del self._handshake[:4 + size]
        return out


def parse_handshake_stream(data: bytes) -> list[HandshakeMessage]:
    """Decode every handshake message in ``data``.

    Raises ``IncompleteError`` (carrying the decoded prefix) if the bytes stop
    mid-record or mid-message.
    """
    reassembler = HandshakeReassembler()
    messages = reassembler.feed(data)
    if reassembler.pending:
        raise IncompleteError("stream ends inside a record or message", messages)
    return messages


@dataclass(frozen=True)
class RawChain:
    """DER certificates exactly as they came off the wire, leaf first."""

    certificates: tuple[bytes, ...]

    def __post_init__(self):
        object.__setattr__(self, "certificates", tuple(bytes(c) for c in self.certificates))
        if not self.certificates:
            raise EmptyChainError("certificate chain is empty")

    @property
    def leaf(self) -> bytes:
        return self.certificates[0]

    @property
    def total_length(self) -> int:
        return sum(3 + len(c) for c in self.certificates)

    def __len__(self) -> int:
        return len(self.certificates)

    def __iter__(self):
        return iter(self.certificates)


def extract_chain(body: bytes) -> RawChain:
    """Split a Certificate handshake body into its DER entries."""
    if len(body) < 3:
        raise ProtocolError("certificate message shorter than its length prefix")
    declared = int.from_bytes(body[:3], "big")
    if declared != len(body) - 3:
        raise ProtocolError(
            f"certificate list length {declared} disagrees with body size {len(body) - 3}")
    blobs = []
    pos = 3
    while pos < len(body):
        if pos + 3 > len(body):
            raise ProtocolError(f"truncated certificate length at offset {pos}")
        size = int.from_bytes(body[pos:pos + 3], "big")
        pos += 3
        if pos + size > len(body):
            raise ProtocolError(f"certificate entry of {size} bytes overruns list at offset {pos}")
        blobs.append(body[pos:pos + size])
        pos += size
    if not blobs:
        raise EmptyChainError("Certificate message carries no certificates")
    return RawChain(tuple(blobs))


# --- probing ----------------------------------------------------------------


class FailureKind(str, enum.Enum):
    CONNECT_TIMEOUT = "connect_timeout"
    REFUSED = "refused"
    HANDSHAKE_ALERT = "handshake_alert"
    PROTOCOL_ERROR = "protocol_error"
    READ_TIMEOUT = "read_timeout"


@dataclass(frozen=True)
class ProbeOutcome:
    target: ProbeTarget
    elapsed_ms: float
    chain: RawChain | None = None
    negotiated_version: int | None = None
    failure: FailureKind | None = None
    detail: str = ""
    alert: bytes | None = None

    def __post_init__(self):
        if (self.chain is None) == (self.failure is None):
            raise ValueError("exactly one of chain/failure must be set")
        if self.elapsed_ms < 0:
            raise ValueError("elapsed_ms must be >= 0")

    @property
    def ok(self) -> bool:
        return self.chain is not None

    @property
    def outcome_kind(self) -> str:
        return "success" if self.ok else self.failure.value


def probe(target: ProbeTarget, params: ClientHelloParams | None = None,
          timeout_ms: int = DEFAULT_TIMEOUT_MS, *,
          connect_to: tuple[str, int] | None = None) -> ProbeOutcome:
    """Fetch the certificate chain ``target`` presents, then abort the handshake.

    ``timeout_ms`` bounds the connect phase and the read phase separately.
    ``connect_to`` sends the TCP connection somewhere other than the target
    while keeping the target's name in the hello (used to route via a proxy).
    """
    if timeout_ms <= 0:
        raise ParameterError("timeout_ms must be positive")
    params = params or ClientHelloParams()
    address = connect_to or (target.host, target.port)
    timeout = timeout_ms / 1000
    start = time.monotonic()

    def done(**kw) -> ProbeOutcome:
        return ProbeOutcome(target, (time.monotonic() - start) * 1000, **kw)

    try:
        sock = socket.create_connection(address, timeout=timeout)
    except socket.timeout:
        return done(failure=FailureKind.CONNECT_TIMEOUT, detail="connect timed out")
    except ConnectionRefusedError as exc:
        return done(failure=FailureKind.REFUSED, detail=str(exc))
    except OSError as exc:
        # unreachable networks and failed name lookups: nothing listened
        return done(failure=FailureKind.REFUSED, detail=str(exc))

    try:
        return _converse(sock, target, params, time.monotonic() + timeout, done)
    finally:
        sock.close()


def _converse(sock: socket.socket, target: ProbeTarget, params: ClientHelloParams,
              deadline: float, done) -> ProbeOutcome:
    reassembler = HandshakeReassembler()
    version = None
    try:
        sock.sendall(build_client_hello(params, target))
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise socket.timeout
            sock.settimeout(remaining)
            data = sock.recv(65536)
            if not data:
                return done(failure=FailureKind.PROTOCOL_ERROR,
                            detail="connection closed before Certificate")
            for msg in reassembler.feed(data):
                if msg.type == HT_SERVER_HELLO:
                    version = parse_server_hello(msg.body).version
                    if version not in _VERSION_VALUES:
                        return done(failure=FailureKind.PROTOCOL_ERROR,
                                    detail=f"server negotiated unsupported version 0x{version:04x}")
                elif msg.type == HT_CERTIFICATE:
                    if version is None:
                        raise ProtocolError("Certificate before ServerHello")
                    chain = extract_chain(msg.body)
                    _abort(sock, version)
                    return done(chain=chain, negotiated_version=version)
                elif msg.type == HT_SERVER_HELLO_DONE:
                    raise ProtocolError("ServerHelloDone without a Certificate")
    except socket.timeout:
        return done(failure=FailureKind.READ_TIMEOUT, detail="no Certificate before deadline")
    except HandshakeAlert as exc:
        return done(failure=FailureKind.HANDSHAKE_ALERT, detail=str(exc), alert=exc.payload)
    except (ProtocolError, EmptyChainError) as exc:
        return done(failure=FailureKind.PROTOCOL_ERROR, detail=str(exc))
    except ConnectionResetError as exc:
        return done(failure=FailureKind.PROTOCOL_ERROR, detail=f"reset: {exc}")
    except OSError as exc:
        return done(failure=FailureKind.PROTOCOL_ERROR, detail=str(exc))


def _abort(sock: socket.socket, version: int) -> None:
    try:
        sock.sendall(encode_alert(ALERT_USER_CANCELED, ALERT_FATAL, version))
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass


def probe_many(targets: Sequence[ProbeTarget], params: ClientHelloParams | None = None,
               timeout_ms: int = DEFAULT_TIMEOUT_MS, concurrency: int = DEFAULT_CONCURRENCY,
               routes: dict | None = None) -> list[ProbeOutcome]:
    """Probe targets in parallel, at most ``concurrency`` at a time; results keep input order."""
    routes = routes or {}
    if not targets:
        return []
    with ThreadPoolExecutor(max_workers=max(1, min(concurrency, len(targets)))) as pool:
        futures = [pool.submit(probe, t, params, timeout_ms, connect_to=routes.get(t))
                   for t in targets]
        return [f.result() for f in futures]
