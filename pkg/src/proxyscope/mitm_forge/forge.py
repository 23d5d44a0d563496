"""Substitute-certificate forging under configurable (mis)behavior profiles."""

from __future__ import annotations

import datetime as dt
import enum
import ipaddress
import secrets
from dataclasses import dataclass, field
from pathlib import Path

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, padding, rsa
from cryptography.x509.oid import NameOID

from .. import _der
from ..cert_model import SIGNATURE_OIDS, fingerprint
from ..errors import ProfileError
from ..tls_probe import RawChain, is_dns_name, is_ip_literal
from ._keys import generate_key

RSA_KEY_SIZES = frozenset({512, 1024, 2048, 2432, 4096})
EC_KEY_SIZES = frozenset({256, 384})
HASHES = {"md5": hashes.MD5, "sha1": hashes.SHA1, "sha256": hashes.SHA256}


class IssuerMode(str, enum.Enum):
    SELF_SIGNED = "self_signed"
    INJECTED_ROOT = "injected_root"
    COPY_ISSUER_NAME = "copy_issuer_name"
    NULL_ISSUER = "null_issuer"


class SubjectMode(str, enum.Enum):
    COPY = "copy"
    FIXED = "fixed"
    WILDCARD_SUBNET = "wildcard_subnet"


@dataclass(frozen=True)
class CertificateAuthority:
    """Signing material for the injected-root profile."""

    cert_der: bytes
    key: object = field(repr=False, compare=False)

    @property
    def name(self) -> x509.Name:
        return x509.load_der_x509_certificate(self.cert_der).subject

    def write_pem(self, cert_path: str | Path, key_path: str | Path | None = None) -> None:
        cert = x509.load_der_x509_certificate(self.cert_der)
        Path(cert_path).write_bytes(cert.public_bytes(serialization.Encoding.PEM))
        if key_path is not None:
            Path(key_path).write_bytes(private_key_pem(self.key))

    @classmethod
    def load_pem(cls, cert_path: str | Path, key_path: str | Path) -> "CertificateAuthority":
        cert = x509.load_pem_x509_certificate(Path(cert_path).read_bytes())
        key = serialization.load_pem_private_key(Path(key_path).read_bytes(), password=None)
        return cls(cert.public_bytes(serialization.Encoding.DER), key)


def private_key_pem(key) -> bytes:
    return key.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8,
                             serialization.NoEncryption())


def generate_ca(common_name: str = "Interception Root", organization: str | None = None,
                key_bits: int = 2048, days: int = 3650) -> CertificateAuthority:
    key = generate_key("rsa", key_bits)
    attrs = [x509.NameAttribute(NameOID.COMMON_NAME, common_name)]
    if organization:
        attrs.append(x509.NameAttribute(NameOID.ORGANIZATION_NAME, organization))
    name = x509.Name(attrs)
    now = dt.datetime.now(dt.timezone.utc)
    cert = (
        x509.CertificateBuilder()
        .subject_name(name).issuer_name(name)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - dt.timedelta(days=1))
        .not_valid_after(now + dt.timedelta(days=days))
        .add_extension(x509.BasicConstraints(ca=True, path_length=None), critical=True)
        .sign(key, hashes.SHA256())
    )
    return CertificateAuthority(cert.public_bytes(serialization.Encoding.DER), key)


@dataclass(frozen=True)
class ForgeProfile:
    issuer_mode: IssuerMode = IssuerMode.SELF_SIGNED
    key_bits: int = 2048
    hash_algo: str = "sha256"
    subject_mode: SubjectMode = SubjectMode.COPY
    # FIXED: the name to issue to; WILDCARD_SUBNET: the address whose /24 is wildcarded
    subject_value: str | None = None
    issuer_org_override: str | None = None
    signing_ca: CertificateAuthority | None = None
    key_algorithm: str = "rsa"

    def __post_init__(self):
        object.__setattr__(self, "issuer_mode", IssuerMode(self.issuer_mode))
        object.__setattr__(self, "subject_mode", SubjectMode(self.subject_mode))
        if self.hash_algo not in HASHES:
            raise ProfileError(f"hash_algo must be one of {sorted(HASHES)}")
        if self.key_algorithm == "rsa":
            if self.key_bits not in RSA_KEY_SIZES:
                raise ProfileError(f"RSA key_bits must be one of {sorted(RSA_KEY_SIZES)}")
        elif self.key_algorithm == "ec":
            if self.key_bits not in EC_KEY_SIZES:
                raise ProfileError(f"EC key_bits must be one of {sorted(EC_KEY_SIZES)}")
            if self.hash_algo == "md5":
                raise ProfileError("MD5 cannot be combined with an EC key")
        else:
            raise ProfileError(f"unknown key_algorithm {self.key_algorithm!r}")
        if self.issuer_mode is IssuerMode.INJECTED_ROOT and self.signing_ca is None:
            raise ProfileError("injected_root needs a signing certificate and key")
        if self.issuer_mode is IssuerMode.NULL_ISSUER and self.issuer_org_override:
            raise ProfileError("null_issuer cannot carry an issuer organization")
        if self.subject_mode is SubjectMode.FIXED and not self.subject_value:
            raise ProfileError("fixed subject mode needs subject_value")

    def describe(self) -> str:
        parts = [self.issuer_mode.value, f"{self.key_algorithm}{self.key_bits}", self.hash_algo,
                 self.subject_mode.value]
        if self.subject_value:
            parts.append(self.subject_value)
        if self.issuer_org_override:
            parts.append(f"O={self.issuer_org_override}")
        return "/".join(parts)


@dataclass(frozen=True)
class ForgedChain:
    substitute: RawChain
    profile: ForgeProfile
    origin_fp: bytes
    key: object = field(repr=False, compare=False)

    @property
    def leaf_fp(self) -> bytes:
        return fingerprint(self.substitute.leaf)

    def key_pem(self) -> bytes:
        return private_key_pem(self.key)


def _with_org(name: x509.Name, org: str) -> x509.Name:
    attrs = [a for a in name if a.oid != NameOID.ORGANIZATION_NAME]
    attrs.append(x509.NameAttribute(NameOID.ORGANIZATION_NAME, org))
    return x509.Name(attrs)


def _subnet_wildcard(value: str) -> str:
    addr = ipaddress.ip_address(value)
    if addr.version != 4:
        raise ProfileError("wildcard_subnet needs an IPv4 address")
    return ".".join(str(addr).split(".")[:3]) + ".*"


def _subject(origin: x509.Certificate, profile: ForgeProfile):
    """Return (subject Name, SubjectAlternativeName or None)."""
    if profile.subject_mode is SubjectMode.COPY:
        try:
            san = origin.extensions.get_extension_for_class(x509.SubjectAlternativeName).value
        except x509.ExtensionNotFound:
            san = None
        return origin.subject, san
    if profile.subject_mode is SubjectMode.FIXED:
        value = profile.subject_value
        if is_ip_literal(value):
            san = x509.SubjectAlternativeName([x509.IPAddress(ipaddress.ip_address(value))])
        elif is_dns_name(value) or value.startswith("*."):
            san = x509.SubjectAlternativeName([x509.DNSName(value)])
        else:
            san = None
        return x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, value)]), san
    source = profile.subject_value
    if source is None:
        try:
            ips = origin.extensions.get_extension_for_class(
                x509.SubjectAlternativeName).value.get_values_for_type(x509.IPAddress)
        except x509.ExtensionNotFound:
            ips = []
        v4 = [ip for ip in ips if ip.version == 4]
        if not v4:
            raise ProfileError("wildcard_subnet needs subject_value or an IPv4 SAN on the origin")
        source = str(v4[0])
    return x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, _subnet_wildcard(source))]), None


def _algorithm_identifier(name: str) -> bytes:
    oid = _der.encode_oid(SIGNATURE_OIDS[name])
    if name.endswith("-with-rsa"):
        return _der.encode(_der.SEQUENCE, oid + _der.encode(_der.NULL, b""))
    return _der.encode(_der.SEQUENCE, oid)


def _resign(cert: x509.Certificate, key, hash_algo: str) -> bytes:
    """Re-sign ``cert`` with a legacy hash ``cryptography`` will no longer use for X.509.

    Rewrites the signature AlgorithmIdentifier inside the TBSCertificate and
    the outer one, then signs the new TBS bytes directly with the key.
    """
    if isinstance(key, rsa.RSAPrivateKey):
        alg_name = f"{hash_algo}-with-rsa"
    else:
        alg_name = f"ecdsa-with-{hash_algo}"
    alg_id = _algorithm_identifier(alg_name)
    tbs = cert.tbs_certificate_bytes
    fields = _der.children(tbs, _der.read_tlv(tbs))
    sig_index = 2 if fields[0].tag == 0xA0 else 1
    parts = [tbs[f.start:f.end] for f in fields]
    parts[sig_index] = alg_id
    new_tbs = _der.encode(_der.SEQUENCE, b"".join(parts))
    if isinstance(key, rsa.RSAPrivateKey):
        signature = key.sign(new_tbs, padding.PKCS1v15(), HASHES[hash_algo]())
    else:
        signature = key.sign(new_tbs, ec.ECDSA(HASHES[hash_algo]()))
    return _der.encode(_der.SEQUENCE,
                       new_tbs + alg_id + _der.encode(_der.BIT_STRING, b"\x00" + signature))


def forge_certificate(origin_leaf: bytes, profile: ForgeProfile) -> ForgedChain:
    """Issue a substitute for ``origin_leaf`` the way an intercepting proxy would."""
    try:
        origin = x509.load_der_x509_certificate(origin_leaf)
    except ValueError as exc:
        raise ProfileError(f"origin certificate unparseable: {exc}") from exc
    key = generate_key(profile.key_algorithm, profile.key_bits)
    subject, san = _subject(origin, profile)

    signer = key
    chain_tail: tuple[bytes, ...] = ()
    mode = profile.issuer_mode
    if mode is IssuerMode.SELF_SIGNED:
        issuer = subject
    elif mode is IssuerMode.INJECTED_ROOT:
        issuer = profile.signing_ca.name
        signer = profile.signing_ca.key
        chain_tail = (profile.signing_ca.cert_der,)
    elif mode is IssuerMode.COPY_ISSUER_NAME:
        issuer = origin.issuer
    else:
        issuer = x509.Name([])
    if profile.issuer_org_override:
        issuer = _with_org(issuer, profile.issuer_org_override)
    if profile.hash_algo == "md5" and not isinstance(signer, rsa.RSAPrivateKey):
        raise ProfileError("MD5 signatures need an RSA signing key")

    builder = (
        x509.CertificateBuilder()
        .subject_name(subject)
        .issuer_name(issuer)
        .public_key(key.public_key())
        .serial_number(secrets.randbits(64) | 1)
        .not_valid_before(origin.not_valid_before_utc)
        .not_valid_after(origin.not_valid_after_utc)
        .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
    )
    if san is not None:
        builder = builder.add_extension(san, critical=False)
    cert = builder.sign(signer, hashes.SHA256())
    if profile.hash_algo == "sha256":
        der = cert.public_bytes(serialization.Encoding.DER)
    else:
        der = _resign(cert, signer, profile.hash_algo)

    forged = ForgedChain(RawChain((der, *chain_tail)), profile, fingerprint(origin_leaf), key)
    assert forged.leaf_fp != forged.origin_fp, "substitute must differ from origin"
    return forged
