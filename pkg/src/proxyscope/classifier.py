"""Map substitute-certificate issuer fields to proxy categories and flag negligent forging."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

from .cert_model import CertificateSummary, parse_der, verify_signed_by
from .errors import ParseError, RuleLoadError, UnsupportedAlgorithm
from .tls_probe import is_ip_literal

logger = logging.getLogger(__name__)


class ProxyCategory(str, enum.Enum):
    BusinessPersonalFirewall = "BusinessPersonalFirewall"
    BusinessFirewall = "BusinessFirewall"
    PersonalFirewall = "PersonalFirewall"
    ParentalControl = "ParentalControl"
    Organization = "Organization"
    School = "School"
    Malware = "Malware"
    Unknown = "Unknown"
    Telecom = "Telecom"
    CertificateAuthority = "CertificateAuthority"

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {
    ProxyCategory.BusinessPersonalFirewall: "Business/Personal Firewall",
    ProxyCategory.BusinessFirewall: "Business Firewall",
    ProxyCategory.PersonalFirewall: "Personal Firewall",
    ProxyCategory.ParentalControl: "Parental Control",
    ProxyCategory.Organization: "Organization",
    ProxyCategory.School: "School",
    ProxyCategory.Malware: "Malware",
    ProxyCategory.Unknown: "Unknown",
    ProxyCategory.Telecom: "Telecom",
    ProxyCategory.CertificateAuthority: "Certificate Authority",
}

RULE_FIELDS = ("issuer_org", "issuer_ou", "issuer_cn")
MATCH_KINDS = ("substring", "exact")


@dataclass(frozen=True)
class ClassificationRule:
    priority: int
    field: str
    match_kind: str
    pattern: str
    category: ProxyCategory

    def __post_init__(self):
        if not self.pattern.strip():
            raise ValueError("pattern must be nonempty")
        if self.field not in RULE_FIELDS:
            raise ValueError(f"unknown field {self.field!r}")
        if self.match_kind not in MATCH_KINDS:
            raise ValueError(f"unknown match kind {self.match_kind!r}")

    def matches(self, summary: CertificateSummary) -> bool:
        value = getattr(summary, self.field)
        if not value:
            return False
        value, pattern = value.casefold(), self.pattern.casefold()
        if self.match_kind == "exact":
            return value.strip() == pattern
        return pattern in value


class RuleSet(tuple):
    """Rules in descending priority order. Immutable once built."""

    def __new__(cls, rules: Iterable[ClassificationRule] = ()):
        rules = sorted(rules, key=lambda r: r.priority, reverse=True)
        seen = set()
        for r in rules:
            if r.priority in seen:
                raise RuleLoadError(f"duplicate priority {r.priority}")
            seen.add(r.priority)
        return super().__new__(cls, rules)


def _parse_line(raw: str, lineno: int) -> ClassificationRule | None:
    line = raw.rstrip("\r\n")
    if not line.strip() or line.lstrip().startswith("#"):
        return None
    parts = line.split("\t")
    if len(parts) != 5:
        raise RuleLoadError(f"expected 5 tab-separated columns, got {len(parts)}", lineno)
    priority, fld, kind, pattern, category = parts
    try:
        prio = int(priority)
    except ValueError:
        raise RuleLoadError(f"priority {priority!r} is not an integer", lineno) from None
    try:
        cat = ProxyCategory(category.strip())
    except ValueError:
        raise RuleLoadError(f"unknown category {category!r}", lineno) from None
    try:
        return ClassificationRule(prio, fld.strip(), kind.strip(), pattern.strip(), cat)
    except ValueError as exc:
        raise RuleLoadError(str(exc), lineno) from None


def load_rules(document: str | Path | Iterable[str]) -> RuleSet:
    """Load a rule file: ``priority<TAB>field<TAB>match_kind<TAB>pattern<TAB>category``.

    ``document`` may be a path, the file's text, or an iterable of lines.
    """
    if isinstance(document, Path):
        lines = document.read_text(encoding="utf-8").splitlines()
    elif isinstance(document, str):
        lines = document.splitlines()
    else:
        lines = list(document)
    rules = []
    by_priority: dict[int, int] = {}
    for lineno, raw in enumerate(lines, 1):
        rule = _parse_line(raw, lineno)
        if rule is None:
            continue
        if rule.priority in by_priority:
            raise RuleLoadError(
                f"priority {rule.priority} already used on line {by_priority[rule.priority]}", lineno)
        by_priority[rule.priority] = lineno
        rules.append(rule)
    return RuleSet(rules)


def default_rules() -> RuleSet:
    text = resources.files("proxyscope.data").joinpath("default_rules.tsv").read_text("utf-8")
    return load_rules(text)


class Classification(NamedTuple):
    category: ProxyCategory
    rule_id: int | None
    null_issuer: bool


def has_null_issuer(summary: CertificateSummary) -> bool:
    return not any((v or "").strip() for v in (summary.issuer_org, summary.issuer_ou, summary.issuer_cn))


def classify(summary: CertificateSummary, rules: Sequence[ClassificationRule]) -> Classification:
    """First matching rule by descending priority; Unknown when nothing matches."""
    for rule in rules:
        if rule.matches(summary):
            return Classification(rule.category, rule.priority, False)
    return Classification(ProxyCategory.Unknown, None, has_null_issuer(summary))


# --- negligence -------------------------------------------------------------

WEAK_HASHES = ("md5", "sha1")


@dataclass(frozen=True)
class NegligenceReport:
    weak_key: tuple[int, int] | None = None
    weak_hash: str | None = None
    ca_masquerade: str | None = None
    subject_mismatch: tuple[str, str | None] | None = None
    null_issuer: bool = False
    notes: tuple[str, ...] = field(default=(), compare=False)

    @property
    def findings(self) -> frozenset[str]:
        out = {name for name in ("weak_key", "weak_hash", "ca_masquerade", "subject_mismatch")
               if getattr(self, name) is not None}
        if self.null_issuer:
            out.add("null_issuer")
        return frozenset(out)

    @property
    def empty(self) -> bool:
        return not self.findings

    def to_dict(self) -> dict:
        return {
            "weak_key": list(self.weak_key) if self.weak_key else None,
            "weak_hash": self.weak_hash,
            "ca_masquerade": self.ca_masquerade,
            "subject_mismatch": list(self.subject_mismatch) if self.subject_mismatch else None,
            "null_issuer": self.null_issuer,
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NegligenceReport":
        return cls(
            weak_key=tuple(d["weak_key"]) if d.get("weak_key") else None,
            weak_hash=d.get("weak_hash"),
            ca_masquerade=d.get("ca_masquerade"),
            subject_mismatch=tuple(d["subject_mismatch"]) if d.get("subject_mismatch") else None,
            null_issuer=bool(d.get("null_issuer")),
            notes=tuple(d.get("notes") or ()),
        )


def _normalize(name: str) -> str:
    return name.strip().rstrip(".").lower()


def hostname_matches(pattern: str, expected: str) -> bool:
    """Certificate name vs host: exact, or a single left-most ``*`` label.

    Wildcards whose remainder looks like an IP prefix never match.
    """
    pattern, expected = _normalize(pattern), _normalize(expected)
    if pattern == expected:
        return True
    if not pattern.startswith("*.") or is_ip_literal(expected):
        return False
    rest = pattern[2:]
    if not rest or all(label.isdigit() for label in rest.split(".")):
        return False
    head, _, tail = expected.partition(".")
    return bool(head) and tail == rest


def _weak_hash(signature_algorithm: str) -> str | None:
    for h in WEAK_HASHES:
        if signature_algorithm.startswith(h + "-") or signature_algorithm.endswith("-" + h):
            return signature_algorithm
    return None


def detect_negligence(observed_leaf: CertificateSummary, authoritative_leaf: CertificateSummary,
                      expected_name: str,
                      genuine_ca_store: Iterable[bytes | CertificateSummary] = ()) -> NegligenceReport:
    notes: list[str] = []

    weak_key = None
    if observed_leaf.key_bits < authoritative_leaf.key_bits:
        weak_key = (observed_leaf.key_bits, authoritative_leaf.key_bits)

    masquerade = None
    claimed = (observed_leaf.issuer_org or "").strip()
    if claimed:
        same_name = []
        for ca in genuine_ca_store:
            try:
                summary = ca if isinstance(ca, CertificateSummary) else parse_der(ca)
            except ParseError:
                notes.append("unparseable certificate in CA store")
                continue
            if summary.subject_org and summary.subject_org.strip().casefold() == claimed.casefold():
                same_name.append(summary)
        if same_name:
            verified = unsupported = False
            for ca in same_name:
                try:
                    if verify_signed_by(observed_leaf, ca):
                        verified = True
                        break
                except UnsupportedAlgorithm as exc:
                    notes.append(f"unsupported_algorithm: {exc}")
                    unsupported = True
            if not verified and not unsupported:
                masquerade = observed_leaf.issuer_org

    names = [n for n in (observed_leaf.subject_cn, *observed_leaf.subject_alt_names) if n]
    mismatch = None
    if not any(hostname_matches(n, expected_name) for n in names):
        mismatch = (expected_name, observed_leaf.subject_cn)

    return NegligenceReport(
        weak_key=weak_key,
        weak_hash=_weak_hash(observed_leaf.signature_algorithm),
        ca_masquerade=masquerade,
        subject_mismatch=mismatch,
        null_issuer=has_null_issuer(observed_leaf),
        notes=tuple(notes),
    )
