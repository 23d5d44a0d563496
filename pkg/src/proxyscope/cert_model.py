"""Forensic view of captured certificates and the observed-vs-authoritative verdict."""

from __future__ import annotations

import base64
import binascii
import datetime as dt
import enum
import hashlib
import re
from dataclasses import dataclass, field
from typing import Iterable

from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import dsa, ec, ed448, ed25519, padding, rsa
from cryptography.x509.oid import NameOID

from . import _der
from .errors import EmptyChainError, ParseError, UnsupportedAlgorithm
from .tls_probe import RawChain


class KeyAlgorithm(str, enum.Enum):
    RSA = "RSA"
    EC = "EC"
    OTHER = "other"


class Verdict(str, enum.Enum):
    MATCH = "match"
    MISMATCH = "mismatch"


# signature OID -> (identifier, hash constructor or None, key family)
SIGNATURE_ALGORITHMS: dict[str, tuple[str, type | None, str]] = {
    "1.2.840.113549.1.1.4": ("md5-with-rsa", hashes.MD5, "rsa"),
    "1.2.840.113549.1.1.5": ("sha1-with-rsa", hashes.SHA1, "rsa"),
    "1.2.840.113549.1.1.14": ("sha224-with-rsa", hashes.SHA224, "rsa"),
    "1.2.840.113549.1.1.11": ("sha256-with-rsa", hashes.SHA256, "rsa"),
    "1.2.840.113549.1.1.12": ("sha384-with-rsa", hashes.SHA384, "rsa"),
    "1.2.840.113549.1.1.13": ("sha512-with-rsa", hashes.SHA512, "rsa"),
    "1.2.840.10045.4.1": ("ecdsa-with-sha1", hashes.SHA1, "ec"),
    "1.2.840.10045.4.3.1": ("ecdsa-with-sha224", hashes.SHA224, "ec"),
    "1.2.840.10045.4.3.2": ("ecdsa-with-sha256", hashes.SHA256, "ec"),
    "1.2.840.10045.4.3.3": ("ecdsa-with-sha384", hashes.SHA384, "ec"),
    "1.2.840.10045.4.3.4": ("ecdsa-with-sha512", hashes.SHA512, "ec"),
    "1.3.101.112": ("ed25519", None, "ed25519"),
    "1.3.101.113": ("ed448", None, "ed448"),
    "1.2.840.113549.1.1.10": ("rsassa-pss", None, "pss"),
}

SIGNATURE_OIDS = {name: oid for oid, (name, _, _) in SIGNATURE_ALGORITHMS.items()}


@dataclass(frozen=True)
class CertificateSummary:
    subject_cn: str | None
    subject_org: str | None
    subject_alt_names: tuple[str, ...]
    issuer_cn: str | None
    issuer_org: str | None
    issuer_ou: str | None
    serial: int
    key_algorithm: KeyAlgorithm
    key_bits: int
    signature_algorithm: str
    not_before: dt.datetime
    not_after: dt.datetime
    fingerprint_sha256: bytes
    is_self_signed: bool
    # raw encodings kept for exact Name comparison and signature checks
    der: bytes = field(repr=False, compare=False)
    issuer_der: bytes = field(repr=False, compare=False)
    subject_der: bytes = field(repr=False, compare=False)

    @property
    def fingerprint_hex(self) -> str:
        return self.fingerprint_sha256.hex()

    def to_dict(self) -> dict:
        return {
            "subject_cn": self.subject_cn,
            "subject_org": self.subject_org,
            "subject_alt_names": list(self.subject_alt_names),
            "issuer_cn": self.issuer_cn,
            "issuer_org": self.issuer_org,
            "issuer_ou": self.issuer_ou,
            "serial": str(self.serial),
            "key_algorithm": self.key_algorithm.value,
            "key_bits": self.key_bits,
            "signature_algorithm": self.signature_algorithm,
            "not_before": self.not_before.isoformat(),
            "not_after": self.not_after.isoformat(),
            "fingerprint_sha256": self.fingerprint_hex,
            "is_self_signed": self.is_self_signed,
        }


def fingerprint(der: bytes) -> bytes:
    return hashlib.sha256(der).digest()


def _attr(name: x509.Name, oid) -> str | None:
    values = name.get_attributes_for_oid(oid)
    if not values:
        return None
    value = values[0].value
    if isinstance(value, bytes):
        value = value.decode("utf-8", "replace")
    return value if value.strip() else None


def _key_info(key) -> tuple[KeyAlgorithm, int]:
    if isinstance(key, rsa.RSAPublicKey):
        return KeyAlgorithm.RSA, key.key_size
    if isinstance(key, ec.EllipticCurvePublicKey):
        return KeyAlgorithm.EC, key.curve.key_size
    if isinstance(key, dsa.DSAPublicKey):
        return KeyAlgorithm.OTHER, key.key_size
    if isinstance(key, ed25519.Ed25519PublicKey):
        return KeyAlgorithm.OTHER, 256
    if isinstance(key, ed448.Ed448PublicKey):
        return KeyAlgorithm.OTHER, 456
    return KeyAlgorithm.OTHER, 0


def _load(blob: bytes) -> x509.Certificate:
    offset = _der.first_error_offset(blob)
    if offset is not None:
        raise ParseError(f"malformed DER at offset {offset}", offset=offset)
    try:
        return x509.load_der_x509_certificate(blob)
    except ValueError as exc:
        raise ParseError(f"not an X.509 certificate: {exc}", offset=0) from exc


def parse_der(blob: bytes) -> CertificateSummary:
    """Decode one DER certificate into a ``CertificateSummary``.

    Raises ``ParseError`` with the byte offset of the first framing problem.
    """
    blob = bytes(blob)
    cert = _load(blob)
    try:
        key = cert.public_key()
    except Exception:  # key types cryptography cannot load
        key = None
    key_algorithm, key_bits = _key_info(key)

    sans: list[str] = []
    try:
        ext = cert.extensions.get_extension_for_class(x509.SubjectAlternativeName)
        for gn in ext.value:
            if isinstance(gn, (x509.DNSName, x509.RFC822Name, x509.UniformResourceIdentifier)):
                sans.append(gn.value)
            elif isinstance(gn, x509.IPAddress):
                sans.append(str(gn.value))
    except x509.ExtensionNotFound:
        pass
    except ValueError as exc:
        raise ParseError(f"bad subjectAltName: {exc}", offset=0) from exc

    oid = cert.signature_algorithm_oid.dotted_string
    sig_name = SIGNATURE_ALGORITHMS.get(oid, (oid,))[0]
    issuer_der, subject_der = _der.tbs_issuer_subject(cert.tbs_certificate_bytes)
    try:
        subject, issuer = cert.subject, cert.issuer
    except ValueError as exc:
        raise ParseError(f"bad Name: {exc}", offset=0) from exc

    return CertificateSummary(
        subject_cn=_attr(subject, NameOID.COMMON_NAME),
        subject_org=_attr(subject, NameOID.ORGANIZATION_NAME),
        subject_alt_names=tuple(sans),
        issuer_cn=_attr(issuer, NameOID.COMMON_NAME),
        issuer_org=_attr(issuer, NameOID.ORGANIZATION_NAME),
        issuer_ou=_attr(issuer, NameOID.ORGANIZATIONAL_UNIT_NAME),
        serial=cert.serial_number,
        key_algorithm=key_algorithm,
        key_bits=key_bits,
        signature_algorithm=sig_name,
        not_before=cert.not_valid_before_utc,
        not_after=cert.not_valid_after_utc,
        fingerprint_sha256=fingerprint(blob),
        is_self_signed=issuer_der == subject_der,
        der=blob,
        issuer_der=issuer_der,
        subject_der=subject_der,
    )


# --- PEM --------------------------------------------------------------------

_PEM_BLOCK = re.compile(
    r"-----BEGIN CERTIFICATE-----(.*?)-----END CERTIFICATE-----", re.DOTALL)


def encode_concatenated_pem(chain: RawChain | Iterable[bytes]) -> str:
    out = []
    for der in chain:
        b64 = base64.b64encode(der).decode("ascii")
        lines = [b64[i:i + 64] for i in range(0, len(b64), 64)]
        out.append("-----BEGIN CERTIFICATE-----\n" + "\n".join(lines)
                   + "\n-----END CERTIFICATE-----\n")
    return "".join(out)


def decode_concatenated_pem(text: str) -> RawChain:
    blobs = []
    for index, match in enumerate(_PEM_BLOCK.finditer(text)):
        body = "".join(match.group(1).split())
        try:
            blobs.append(base64.b64decode(body, validate=True))
        except (binascii.Error, ValueError) as exc:
            raise ParseError(f"PEM block {index}: invalid base64 ({exc})", block=index) from exc
        if not blobs[-1]:
            raise ParseError(f"PEM block {index} is empty", block=index)
    if not blobs:
        raise EmptyChainError("no CERTIFICATE blocks in payload")
    return RawChain(tuple(blobs))


# --- comparison -------------------------------------------------------------

# ordered; the first five are the forensic headline fields
COMPARED_FIELDS = (
    "issuer_org", "key_bits", "signature_algorithm", "subject_cn", "serial",
    "issuer_cn", "issuer_ou", "subject_org", "subject_alt_names", "key_algorithm",
    "not_before", "not_after",
)


@dataclass(frozen=True)
class ChainComparison:
    verdict: Verdict
    observed_fp: bytes
    authoritative_fp: bytes
    differing_fields: tuple[str, ...] = ()

    @property
    def leaf_fingerprints(self) -> tuple[bytes, bytes]:
        return self.observed_fp, self.authoritative_fp


def leaf_differences(observed: CertificateSummary, authoritative: CertificateSummary) -> tuple[str, ...]:
    diffs = tuple(f for f in COMPARED_FIELDS
                  if getattr(observed, f) != getattr(authoritative, f))
    # distinct bytes that agree on every summarized field differ somewhere else
    return diffs or ("encoding",)


def compare_chains(observed: RawChain, authoritative: RawChain) -> ChainComparison:
    """Leaf-fingerprint verdict; intermediates are ignored on purpose."""
    obs_fp, auth_fp = fingerprint(observed.leaf), fingerprint(authoritative.leaf)
    if obs_fp == auth_fp:
        return ChainComparison(Verdict.MATCH, obs_fp, auth_fp)
    try:
        diffs = leaf_differences(parse_der(observed.leaf), parse_der(authoritative.leaf))
    except ParseError:
        diffs = ("unparseable",)
    return ChainComparison(Verdict.MISMATCH, obs_fp, auth_fp, diffs)


# --- signatures -------------------------------------------------------------


def verify_signed_by(cert: CertificateSummary | bytes, candidate_issuer: CertificateSummary | bytes) -> bool:
    """True iff ``cert`` names ``candidate_issuer``'s subject and its signature verifies.

    Names are compared as exact DER bytes. Raises ``UnsupportedAlgorithm`` for
    signature schemes this function cannot check.
    """
    subj = cert if isinstance(cert, CertificateSummary) else parse_der(cert)
    issuer = candidate_issuer if isinstance(candidate_issuer, CertificateSummary) \
        else parse_der(candidate_issuer)
    child = x509.load_der_x509_certificate(subj.der)
    oid = child.signature_algorithm_oid.dotted_string
    if oid not in SIGNATURE_ALGORITHMS or SIGNATURE_ALGORITHMS[oid][2] == "pss":
        raise UnsupportedAlgorithm(f"cannot verify signature algorithm {oid}")
    _, hash_cls, family = SIGNATURE_ALGORITHMS[oid]
    if subj.issuer_der != issuer.subject_der:
        return False
    try:
        key = x509.load_der_x509_certificate(issuer.der).public_key()
    except Exception as exc:
        raise UnsupportedAlgorithm(f"issuer key unusable: {exc}") from exc
    try:
        if family == "rsa":
            if not isinstance(key, rsa.RSAPublicKey):
                return False
            key.verify(child.signature, child.tbs_certificate_bytes, padding.PKCS1v15(), hash_cls())
        elif family == "ec":
            if not isinstance(key, ec.EllipticCurvePublicKey):
                return False
            key.verify(child.signature, child.tbs_certificate_bytes, ec.ECDSA(hash_cls()))
        elif family == "ed25519":
            if not isinstance(key, ed25519.Ed25519PublicKey):
                return False
            key.verify(child.signature, child.tbs_certificate_bytes)
        elif family == "ed448":
            if not isinstance(key, ed448.Ed448PublicKey):
                return False
            key.verify(child.signature, child.tbs_certificate_bytes)
    except InvalidSignature:
        return False
    except ValueError:
        # e.g. a signature longer than the modulus
        return False
    return True
