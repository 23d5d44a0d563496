"""Shared fixtures.

Certificates here are built directly with ``cryptography`` so the tests do
not depend on the forging code they are checking.
"""

from __future__ import annotations

import datetime as dt
import ipaddress
import shutil
import socket
import ssl
import struct
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest
from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import rsa
from cryptography.x509.oid import NameOID

DATA = Path(__file__).parent / "data"


# --- certificate oracle -----------------------------------------------------


@dataclass
class Issued:
    cert: x509.Certificate
    key: object

    @property
    def der(self) -> bytes:
        return self.cert.public_bytes(serialization.Encoding.DER)

    @property
    def pem(self) -> bytes:
        return self.cert.public_bytes(serialization.Encoding.PEM)

    @property
    def key_pem(self) -> bytes:
        return self.key.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8,
                                      serialization.NoEncryption())

    @property
    def sha256(self) -> bytes:
        return self.cert.fingerprint(hashes.SHA256())


_KEY_CACHE: dict = {}


def rsa_key(bits: int = 2048, slot: int = 0):
    """Session-cached keys; ``slot`` gives distinct keys of the same size."""
    k = ("rsa", bits, slot)
    if k not in _KEY_CACHE:
        _KEY_CACHE[k] = rsa.generate_private_key(65537, bits)
    return _KEY_CACHE[k]


def make_name(cn=None, org=None, ou=None) -> x509.Name:
    attrs = []
    if cn:
        attrs.append(x509.NameAttribute(NameOID.COMMON_NAME, cn))
    if org:
        attrs.append(x509.NameAttribute(NameOID.ORGANIZATION_NAME, org))
    if ou:
        attrs.append(x509.NameAttribute(NameOID.ORGANIZATIONAL_UNIT_NAME, ou))
    return x509.Name(attrs)


def issue(subject: x509.Name, *, issuer: Issued | None = None, key=None, sans=(), ca=False,
          days=365, hash_alg=None, issuer_name: x509.Name | None = None, serial=None) -> Issued:
    key = key or rsa_key()
    now = dt.datetime.now(dt.timezone.utc).replace(microsecond=0)
    signer = issuer.key if issuer else key
    b = (x509.CertificateBuilder()
         .subject_name(subject)
         .issuer_name(issuer_name if issuer_name is not None else (issuer.cert.subject if issuer else subject))
         .public_key(key.public_key())
         .serial_number(serial or x509.random_serial_number())
         .not_valid_before(now - dt.timedelta(days=1))
         .not_valid_after(now + dt.timedelta(days=days))
         .add_extension(x509.BasicConstraints(ca=ca, path_length=None), critical=True))
    if sans:
        entries = []
        for s in sans:
            try:
                entries.append(x509.IPAddress(ipaddress.ip_address(s)))
            except ValueError:
                entries.append(x509.DNSName(s))
        b = b.add_extension(x509.SubjectAlternativeName(entries), critical=False)
    return Issued(b.sign(signer, hash_alg or hashes.SHA256()), key)


def openssl_cert(tmp: Path, subj: str, bits: int = 2048, md: str = "sha256") -> bytes:
    """Self-signed DER from the openssl CLI, which still signs with MD5 and small keys."""
    if shutil.which("openssl") is None:
        pytest.skip("openssl CLI not available")
    key, crt = tmp / f"k{bits}{md}.pem", tmp / f"c{bits}{md}.der"
    subprocess.run(["openssl", "req", "-x509", "-newkey", f"rsa:{bits}", f"-{md}", "-nodes",
                    "-subj", subj, "-keyout", str(key), "-outform", "DER", "-out", str(crt),
                    "-days", "30"], check=True, capture_output=True)
    return crt.read_bytes()


@dataclass
class PKI:
    root: Issued
    leaf: Issued

    @property
    def chain_der(self) -> list[bytes]:
        return [self.leaf.der, self.root.der]

    @property
    def chain_pem(self) -> str:
        return (self.leaf.pem + self.root.pem).decode()


def make_pki(host="localhost", leaf_slot=0, root_org="Fixture Trust Services") -> PKI:
    root = issue(make_name("Fixture Root CA", root_org), key=rsa_key(2048, 100), ca=True)
    leaf = issue(make_name(host, "Fixture Origin"), issuer=root, key=rsa_key(2048, leaf_slot),
                 sans=(host, "127.0.0.1"))
    return PKI(root, leaf)


@pytest.fixture(scope="session")
def pki() -> PKI:
    return make_pki()


@pytest.fixture(scope="session")
def rotated_pki(pki) -> PKI:
    leaf = issue(make_name("localhost", "Fixture Origin"), issuer=pki.root, key=rsa_key(2048, 1),
                 sans=("localhost", "127.0.0.1"))
    return PKI(pki.root, leaf)


# --- reference TLS origin ---------------------------------------------------


class OriginServer:
    """Stock ``ssl`` server presenting a fixed chain; echoes application data back."""

    def __init__(self, pki: PKI, *, max_version=ssl.TLSVersion.TLSv1_2, delay_s: float = 0.0):
        self.pki = pki
        self.delay_s = delay_s  # stall before the handshake, to make ordering observable
        self._tmp = tempfile.TemporaryDirectory()
        chain = Path(self._tmp.name, "chain.pem")
        key = Path(self._tmp.name, "key.pem")
        chain.write_text(pki.chain_pem)
        key.write_bytes(pki.leaf.key_pem)
        self.ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
        self.ctx.minimum_version = ssl.TLSVersion.TLSv1_2
        self.ctx.maximum_version = max_version
        self.ctx.load_cert_chain(chain, key)
        self.sock = socket.create_server(("127.0.0.1", 0))
        self.sock.settimeout(0.2)
        self.stop = threading.Event()
        self.connections: list[tuple[float, float]] = []  # (accepted, closed) monotonic
        self.handshakes = 0
        self._lock = threading.Lock()
        self.thread = threading.Thread(target=self._serve, daemon=True)
        self.thread.start()

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    @property
    def port(self) -> int:
        return self.address[1]

    def _serve(self):
        while not self.stop.is_set():
            try:
                conn, _ = self.sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._handle, args=(conn, time.monotonic()), daemon=True).start()

    def _handle(self, conn, accepted):
        conn.settimeout(5)
        time.sleep(self.delay_s)
        try:
            tls = self.ctx.wrap_socket(conn, server_side=True)
            with self._lock:
                self.handshakes += 1
            while True:
                data = tls.recv(4096)
                if not data:
                    break
                tls.sendall(b"origin:" + data)
        except (OSError, ssl.SSLError):
            pass
        finally:
            conn.close()
            with self._lock:
                self.connections.append((accepted, time.monotonic()))

    def wait_connections(self, n: int, timeout_s: float = 5.0) -> None:
        """Block until ``n`` connections have been recorded; handlers finish after the client returns."""
        deadline = time.monotonic() + timeout_s
        while len(self.connections) < n and time.monotonic() < deadline:
            time.sleep(0.01)

    def close(self):
        self.stop.set()
        self.thread.join()
        self.sock.close()
        self._tmp.cleanup()


@pytest.fixture(scope="session")
def origin(pki):
    server = OriginServer(pki)
    yield server
    server.close()


# --- instrumented raw TLS server --------------------------------------------


def _record(ct: int, payload: bytes, version=0x0303) -> bytes:
    return struct.pack("!BHH", ct, version, len(payload)) + payload


def _hs(t: int, body: bytes) -> bytes:
    return bytes([t]) + len(body).to_bytes(3, "big") + body


def raw_server_flight(chain_der: list[bytes], version=0x0303, split=False) -> bytes:
    """ServerHello, Certificate and ServerHelloDone, hand-assembled."""
    sh = (struct.pack("!H", version) + bytes(32) + b"\x00" + struct.pack("!H", 0x002F) + b"\x00")
    entries = b"".join(len(c).to_bytes(3, "big") + c for c in chain_der)
    cert = len(entries).to_bytes(3, "big") + entries
    msgs = _hs(2, sh) + _hs(11, cert) + _hs(14, b"")
    if not split:
        return _record(22, msgs, version)
    half = len(msgs) // 2
    return _record(22, msgs[:half], version) + _record(22, msgs[half:], version)


@dataclass
class RawServer:
    """Answers one ClientHello with a fixed flight and records what the client sends next."""

    flight: bytes
    sock: socket.socket = field(init=False)
    received_after: list[bytes] = field(default_factory=list)
    client_hello: bytes = b""
    done: threading.Event = field(default_factory=threading.Event)
    silent: bool = False

    def __post_init__(self):
        self.sock = socket.create_server(("127.0.0.1", 0))
        threading.Thread(target=self._serve, daemon=True).start()

    @property
    def port(self) -> int:
        return self.sock.getsockname()[1]

    def _serve(self):
        try:
            conn, _ = self.sock.accept()
        except OSError:
            return
        with conn:
            conn.settimeout(5)
            try:
                hdr = conn.recv(5)
                length = struct.unpack("!H", hdr[3:5])[0]
                body = b""
                while len(body) < length:
                    body += conn.recv(length - len(body))
                self.client_hello = hdr + body
                if self.silent:
                    time.sleep(3)
                    return
                conn.sendall(self.flight)
                while True:
                    data = conn.recv(4096)
                    if not data:
                        break
                    self.received_after.append(data)
            except OSError:
                pass
            finally:
                self.done.set()

    def close(self):
        self.sock.close()


@pytest.fixture
def store_dir(tmp_path):
    return tmp_path / "store"


# --- acceptance summary -----------------------------------------------------

_ACCEPTANCE: dict[str, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    title = marker.args[0] if marker.args else item.name
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _ACCEPTANCE[title] = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for title, verdict in _ACCEPTANCE.items():
        terminalreporter.write_line(f"{verdict}  {title}")
