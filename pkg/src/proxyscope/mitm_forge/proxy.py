"""A local TLS interceptor that answers handshakes with forged substitute chains."""

from __future__ import annotations

import logging
import select
import socket
import ssl
import tempfile
import threading
import warnings
from pathlib import Path

from ..cert_model import encode_concatenated_pem
from ..errors import ProxyscopeError
from ..tls_probe import (
    ALERT_HANDSHAKE_FAILURE,
    DEFAULT_TIMEOUT_MS,
    ProbeTarget,
    encode_alert,
    probe,
)
from .forge import ForgedChain, ForgeProfile, forge_certificate

logger = logging.getLogger(__name__)


class UpstreamUnavailable(ProxyscopeError):
    pass


class InterceptingProxy:
    """Accepts TLS clients and presents a substitute for ``upstream``'s leaf.

    The upstream leaf is fetched once and the forged chain is cached for the
    proxy's lifetime, so repeated handshakes see byte-identical substitutes.
    After the handshake, traffic is relayed to the upstream over a second TLS
    session when ``relay`` is set.
    """

    def __init__(self, upstream: ProbeTarget, profile: ForgeProfile,
                 listen: tuple[str, int] = ("127.0.0.1", 0), *,
                 upstream_address: tuple[str, int] | None = None,
                 timeout_ms: int = DEFAULT_TIMEOUT_MS, relay: bool = True):
        self.upstream = upstream
        self.profile = profile
        self.upstream_address = upstream_address
        self.timeout = timeout_ms / 1000
        self.relay = relay
        self._listen = listen
        self._sock: socket.socket | None = None
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()
        self._lock = threading.Lock()
        self._forged: ForgedChain | None = None
        self._context: ssl.SSLContext | None = None
        self._tmp = tempfile.TemporaryDirectory(prefix="proxyscope-mitm-")
        self._workers: set[threading.Thread] = set()
        self.handshakes = 0

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    def start(self) -> "InterceptingProxy":
        self._sock = socket.create_server(self._listen, reuse_port=False)
        self._sock.settimeout(0.2)
        self._thread = threading.Thread(target=self._serve, name="mitm-accept", daemon=True)
        self._thread.start()
        return self

    def close(self) -> None:
        self._stop.set()
        if self._thread:
            self._thread.join()
        if self._sock:
            self._sock.close()
        for worker in list(self._workers):
            worker.join(timeout=self.timeout)
        self._tmp.cleanup()

    def __enter__(self):
        return self if self._sock else self.start()

    def __exit__(self, *exc):
        self.close()

    def forged_chain(self) -> ForgedChain:
        """Fetch the upstream leaf and forge its substitute, once."""
        with self._lock:
            if self._forged is None:
                outcome = probe(self.upstream, timeout_ms=int(self.timeout * 1000),
                                connect_to=self.upstream_address)
                if not outcome.ok:
                    raise UpstreamUnavailable(f"{self.upstream}: {outcome.failure.value} {outcome.detail}")
                forged = forge_certificate(outcome.chain.leaf, self.profile)
                self._context = self._make_context(forged)
                self._forged = forged
            return self._forged

    def _make_context(self, forged: ForgedChain) -> ssl.SSLContext:
        chain_path = Path(self._tmp.name, "chain.pem")
        key_path = Path(self._tmp.name, "key.pem")
        chain_path.write_text(encode_concatenated_pem(forged.substitute))
        key_path.write_bytes(forged.key_pem())
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
        with warnings.catch_warnings():
            # legacy versions stay reachable on purpose; probes may offer only 1.0
            warnings.simplefilter("ignore", DeprecationWarning)
            ctx.minimum_version = ssl.TLSVersion.TLSv1
        ctx.maximum_version = ssl.TLSVersion.TLSv1_2
        # weak keys and MD5 are the point of some profiles
        ctx.set_ciphers("ALL:@SECLEVEL=0")
        ctx.load_cert_chain(chain_path, key_path)
        return ctx

    def _serve(self) -> None:
        while not self._stop.is_set():
            try:
                conn, peer = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            worker = threading.Thread(target=self._handle, args=(conn, peer), daemon=True)
            self._workers.add(worker)
            worker.start()

    def _handle(self, conn: socket.socket, peer) -> None:
        try:
            conn.settimeout(self.timeout)
            try:
                self.forged_chain()
            except (UpstreamUnavailable, ProxyscopeError) as exc:
                logger.warning("upstream unavailable, refusing %s: %s", peer, exc)
                self._refuse(conn)
                return
            try:
                tls = self._context.wrap_socket(conn, server_side=True)
            except (ssl.SSLError, OSError) as exc:
                # probing clients abort right after Certificate; that lands here
                logger.debug("client %s left during handshake: %s", peer, exc)
                return
            with self._lock:
                self.handshakes += 1
            if self.relay:
                self._relay(tls)
            tls.close()
        finally:
            conn.close()
            self._workers.discard(threading.current_thread())

    def _refuse(self, conn: socket.socket) -> None:
        try:
            conn.recv(4096)
            conn.sendall(encode_alert(ALERT_HANDSHAKE_FAILURE))
        except OSError:
            pass

    def _relay(self, client: ssl.SSLSocket) -> None:
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
        ctx.check_hostname = False
        ctx.verify_mode = ssl.CERT_NONE
        address = self.upstream_address or (self.upstream.host, self.upstream.port)
        try:
            raw = socket.create_connection(address, timeout=self.timeout)
            upstream = ctx.wrap_socket(raw, server_hostname=self.upstream.sni_name)
        except (OSError, ssl.SSLError) as exc:
            logger.warning("relay to %s failed: %s", self.upstream, exc)
            return
        with upstream:
            pair = {client: upstream, upstream: client}
            while not self._stop.is_set():
                ready = [s for s in pair if s.pending()] or \
                    select.select(list(pair), [], [], 0.2)[0]
                for src in ready:
                    try:
                        data = src.recv(65536)
                    except (ssl.SSLError, OSError):
                        return
                    if not data:
                        return
                    try:
                        pair[src].sendall(data)
                    except (ssl.SSLError, OSError):
                        return


def run_intercepting_proxy(listen: tuple[str, int], upstream: ProbeTarget, profile: ForgeProfile,
                           **kwargs) -> InterceptingProxy:
    """Start an interceptor; the returned handle supports ``close()`` and ``with``."""
    return InterceptingProxy(upstream, profile, listen, **kwargs).start()
