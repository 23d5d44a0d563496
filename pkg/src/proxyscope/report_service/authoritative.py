"""Authoritative chains per target, fetched by probing from the server's own vantage point."""

from __future__ import annotations

import datetime as dt
import itertools
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable

from ..cert_model import fingerprint
from ..errors import RetryableError
from ..tls_probe import DEFAULT_TIMEOUT_MS, ProbeTarget, RawChain, probe
from .store import RecordStore, _parse_ts, _ts, target_from_dict, target_to_dict

logger = logging.getLogger(__name__)

DEFAULT_TTL_S = 3600
DEFAULT_GRACE_S = 86400


def utcnow() -> dt.datetime:
    return dt.datetime.now(dt.timezone.utc)


class FetchError(Exception):
    pass


def probe_fetcher(timeout_ms: int = DEFAULT_TIMEOUT_MS,
                  routes: dict | None = None) -> Callable[[ProbeTarget], RawChain]:
    routes = routes or {}

    def fetch(target: ProbeTarget) -> RawChain:
        outcome = probe(target, timeout_ms=timeout_ms, connect_to=routes.get(target))
        if not outcome.ok:
            raise FetchError(f"{target}: {outcome.failure.value} {outcome.detail}")
        return outcome.chain

    return fetch


@dataclass(frozen=True)
class AuthoritativeEntry:
    target: ProbeTarget
    valid_leaf_fps: frozenset[bytes]
    chain: RawChain
    fetched_at: dt.datetime
    ttl_s: int | None  # None: pinned, never refreshed
    version: int
    # fingerprint -> time it stops being accepted (rotation grace)
    retiring: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.valid_leaf_fps:
            raise ValueError("valid_leaf_fps must be nonempty")
        if fingerprint(self.chain.leaf) not in self.valid_leaf_fps:
            raise ValueError("valid_leaf_fps must contain the current leaf")

    @property
    def leaf_fp(self) -> bytes:
        return fingerprint(self.chain.leaf)

    def expired(self, now: dt.datetime) -> bool:
        return self.ttl_s is not None and (now - self.fetched_at).total_seconds() >= self.ttl_s


class AuthoritativeCache:
    """Current authoritative entry per target, with rotation tolerance.

    When a refresh sees a new leaf, the previous fingerprint stays valid for
    ``grace_s`` seconds. A failed refresh keeps the stale entry while it is
    within its TTL; past that the target is unavailable and callers get
    ``RetryableError``.
    """

    def __init__(self, fetcher: Callable[[ProbeTarget], RawChain] | None = None, *,
                 store: RecordStore | None = None, ttl_s: int = DEFAULT_TTL_S,
                 grace_s: int = DEFAULT_GRACE_S, clock: Callable[[], dt.datetime] = utcnow):
        self.fetcher = fetcher or probe_fetcher()
        self.store = store
        self.ttl_s = ttl_s
        self.grace_s = grace_s
        self.clock = clock
        self._entries: dict[ProbeTarget, AuthoritativeEntry] = {}
        self._unavailable: set[ProbeTarget] = set()
        self._locks: dict[ProbeTarget, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._versions = itertools.count(self._next_version())

    def _next_version(self) -> int:
        if self.store is None:
            return 1
        return max((d["version"] for d in self.store.iter_authoritative()), default=0) + 1

    def _lock(self, target: ProbeTarget) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(target, threading.Lock())

    def _publish(self, entry: AuthoritativeEntry) -> AuthoritativeEntry:
        self._entries[entry.target] = entry
        self._unavailable.discard(entry.target)
        if self.store is not None:
            ref = self.store.put_chain(entry.chain)
            self.store.append_authoritative({
                "version": entry.version,
                "target": target_to_dict(entry.target),
                "valid_leaf_fps": sorted(fp.hex() for fp in entry.valid_leaf_fps),
                "chain_ref": ref,
                "fetched_at": _ts(entry.fetched_at),
                "ttl_s": entry.ttl_s,
            })
        return entry

    def pin(self, target: ProbeTarget, chain: RawChain,
            extra_fps: frozenset[bytes] = frozenset()) -> AuthoritativeEntry:
        """Install a fixed entry, e.g. the server's own certificate."""
        with self._lock(target):
            entry = AuthoritativeEntry(target, frozenset({fingerprint(chain.leaf)}) | extra_fps,
                                       chain, self.clock(), None, next(self._versions))
            return self._publish(entry)

    def peek(self, target: ProbeTarget) -> AuthoritativeEntry | None:
        return self._entries.get(target)

    def refresh(self, target: ProbeTarget) -> AuthoritativeEntry:
        with self._lock(target):
            return self._refresh_locked(target)

    def _refresh_locked(self, target: ProbeTarget) -> AuthoritativeEntry:
        now = self.clock()
        old = self._entries.get(target)
        try:
            chain = self.fetcher(target)
        except Exception as exc:
            if old is not None and not old.expired(now):
                logger.warning("refresh of %s failed, keeping entry from %s: %s",
                               target, old.fetched_at, exc)
                return old
            self._entries.pop(target, None)
            self._unavailable.add(target)
            raise RetryableError(f"authoritative chain for {target} unavailable: {exc}") from exc

        leaf_fp = fingerprint(chain.leaf)
        retiring = {}
        if old is not None:
            retiring = {fp: until for fp, until in old.retiring.items() if until > now}
            if old.leaf_fp != leaf_fp:
                retiring[old.leaf_fp] = now + dt.timedelta(seconds=self.grace_s)
        retiring.pop(leaf_fp, None)
        if (old is not None and old.leaf_fp == leaf_fp
                and set(old.retiring) == set(retiring)):
            # unchanged content: extend lifetime without a new version
            entry = AuthoritativeEntry(target, old.valid_leaf_fps, chain, now, self.ttl_s,
                                       old.version, retiring)
            self._entries[target] = entry
            return entry
        entry = AuthoritativeEntry(target, frozenset({leaf_fp}) | frozenset(retiring), chain,
                                   now, self.ttl_s, next(self._versions), retiring)
        return self._publish(entry)

    def get(self, target: ProbeTarget) -> AuthoritativeEntry:
        """Entry to judge a report against, refreshing when missing, expired or past grace."""
        with self._lock(target):
            entry = self._entries.get(target)
            now = self.clock()
            if entry is None or entry.expired(now) or any(u <= now for u in entry.retiring.values()):
                entry = self._refresh_locked(target)
            return entry


def load_entry_versions(store: RecordStore) -> dict[int, dict]:
    """Persisted entries by version, for replay."""
    out = {}
    for d in store.iter_authoritative():
        out[d["version"]] = {
            "target": target_from_dict(d["target"]),
            "valid_leaf_fps": frozenset(bytes.fromhex(h) for h in d["valid_leaf_fps"]),
            "chain_ref": d["chain_ref"],
            "fetched_at": _parse_ts(d["fetched_at"]),
        }
    return out
