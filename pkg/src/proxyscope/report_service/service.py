"""Report ingestion: decode, compare against the authoritative leaf, classify, persist."""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

from ..cert_model import (
    CertificateSummary,
    Verdict,
    decode_concatenated_pem,
    fingerprint,
    parse_der,
)
from ..classifier import (
    ClassificationRule,
    NegligenceReport,
    ProxyCategory,
    classify,
    default_rules,
    detect_negligence,
)
from ..errors import EmptyChainError, ParseError, RejectedReport
from ..tls_probe import ProbeTarget, RawChain
from .authoritative import AuthoritativeCache, load_entry_versions, utcnow
from .geo import GeoDatabase
from .store import MeasurementRecord, RecordStore

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RecordFilter:
    since: dt.datetime | None = None
    until: dt.datetime | None = None
    country: str | None = None
    target: ProbeTarget | None = None
    verdict: Verdict | None = None
    category: ProxyCategory | None = None

    def accepts(self, r: MeasurementRecord) -> bool:
        if self.since is not None and r.received_at < self.since:
            return False
        if self.until is not None and r.received_at >= self.until:
            return False
        if self.country is not None and r.country != self.country.upper():
            return False
        if self.target is not None and (r.target.host, r.target.port) != (self.target.host, self.target.port):
            return False
        if self.verdict is not None and r.verdict is not Verdict(self.verdict):
            return False
        if self.category is not None and r.category is not ProxyCategory(self.category):
            return False
        return True


@dataclass(frozen=True)
class ReplayReport:
    checked: int
    reproduced: int
    differing: tuple[str, ...]  # record ids

    @property
    def rate(self) -> float:
        return self.reproduced / self.checked if self.checked else 1.0


class ReportService:
    """Owns the record store, the authoritative cache and the geo table.

    ``targets`` is the set of hosts clients may report on; anything else is
    rejected. ``ca_store`` holds genuine CA certificates used for masquerade
    checks, in addition to the intermediates of each authoritative chain.
    """

    def __init__(self, store: RecordStore, cache: AuthoritativeCache, targets: Iterable[ProbeTarget],
                 geo=None, rules: Sequence[ClassificationRule] | None = None,
                 ca_store: Iterable[bytes] = (), clock=utcnow):
        self.store = store
        self.cache = cache
        self.geo = geo if geo is not None else GeoDatabase()
        self.rules = default_rules() if rules is None else rules
        self.ca_store = tuple(ca_store)
        self.clock = clock
        self._targets = {self._key(t.host, t.port): t for t in targets}

    @staticmethod
    def _key(host: str, port: int) -> tuple[str, int]:
        return host.strip().rstrip(".").lower(), int(port)

    @property
    def targets(self) -> tuple[ProbeTarget, ...]:
        return tuple(self._targets.values())

    def resolve_target(self, host: str, port: int) -> ProbeTarget:
        try:
            return self._targets[self._key(host, port)]
        except (KeyError, ValueError, TypeError, AttributeError):
            raise RejectedReport("unknown_target", f"{host}:{port}") from None

    def _reject(self, exc: RejectedReport, client_ip: str, target: str | None) -> RejectedReport:
        self.store.append_reject(exc.reason, exc.detail, client_ip, target, self.clock())
        return exc

    def ingest_report(self, client_ip: str, target_host: str, target_port: int,
                      pem_payload: str) -> MeasurementRecord:
        """Judge one report and append it to the log.

        Raises ``RejectedReport`` (logged to the reject file) for unknown
        targets and undecodable payloads, ``RetryableError`` when no
        authoritative chain can be obtained, ``ParameterError`` for a bad IP.
        """
        label = f"{target_host}:{target_port}"
        try:
            target = self.resolve_target(target_host, target_port)
        except RejectedReport as exc:
            raise self._reject(exc, client_ip, label)
        try:
            observed = decode_concatenated_pem(pem_payload)
        except EmptyChainError as exc:
            raise self._reject(RejectedReport("empty_chain", str(exc)), client_ip, label) from None
        except (ParseError, ValueError, TypeError) as exc:
            raise self._reject(RejectedReport("undecodable", str(exc)), client_ip, label) from None

        country = self.geo.lookup(client_ip)
        entry = self.cache.get(target)
        observed_fp = fingerprint(observed.leaf)
        verdict = Verdict.MATCH if observed_fp in entry.valid_leaf_fps else Verdict.MISMATCH

        category = negligence = issuer_org = None
        if verdict is Verdict.MISMATCH:
            category, negligence, issuer_org = self._characterize(observed, entry.chain, target)

        ref = self.store.put_chain(observed)
        record = MeasurementRecord(
            id=MeasurementRecord.new_id(),
            received_at=self.clock(),
            client_ip=client_ip,
            country=country,
            target=target,
            observed_leaf_fp=observed_fp,
            authoritative_leaf_fp=entry.leaf_fp,
            verdict=verdict,
            observed_chain_ref=ref,
            category=category,
            negligence=negligence,
            issuer_org=issuer_org,
            authoritative_version=entry.version,
        )
        self.store.append_record(record)
        return record

    def _characterize(self, observed: RawChain, authoritative: RawChain, target: ProbeTarget):
        try:
            leaf = parse_der(observed.leaf)
        except ParseError as exc:
            return ProxyCategory.Unknown, NegligenceReport(notes=(f"unparseable leaf: {exc}",)), None
        auth_leaf = parse_der(authoritative.leaf)
        genuine: list[bytes | CertificateSummary] = [*authoritative.certificates[1:], *self.ca_store]
        negligence = detect_negligence(leaf, auth_leaf, target.expected_name, genuine)
        return classify(leaf, self.rules).category, negligence, leaf.issuer_org

    def query_records(self, flt: RecordFilter | None = None) -> Iterator[MeasurementRecord]:
        flt = flt or RecordFilter()
        matched = [r for r in self.store.iter_records() if flt.accepts(r)]
        # log order is arrival order already; sorting keeps the contract explicit
        matched.sort(key=lambda r: r.received_at)
        return iter(matched)

    def replay(self) -> ReplayReport:
        """Recompute each verdict from its stored chain and the entry version it was judged by."""
        versions = load_entry_versions(self.store)
        checked = reproduced = 0
        differing = []
        for record in self.store.iter_records():
            checked += 1
            entry = versions.get(record.authoritative_version)
            if entry is None:
                differing.append(record.id)
                continue
            fp = fingerprint(self.store.get_chain(record.observed_chain_ref).leaf)
            verdict = Verdict.MATCH if fp in entry["valid_leaf_fps"] else Verdict.MISMATCH
            if verdict is record.verdict and fp == record.observed_leaf_fp:
                reproduced += 1
            else:
                differing.append(record.id)
        return ReplayReport(checked, reproduced, tuple(differing))
