import hashlib
import shutil
import socket
import ssl
import subprocess

import pytest
from cryptography import x509
from cryptography.hazmat.primitives.asymmetric import ec, rsa

from conftest import make_pki
from proxyscope.cert_model import encode_concatenated_pem, fingerprint, parse_der, verify_signed_by
from proxyscope.classifier import ProxyCategory, classify, default_rules, detect_negligence
from proxyscope.errors import ProfileError
from proxyscope.mitm_forge import (
    CertificateAuthority,
    ForgeProfile,
    InterceptingProxy,
    IssuerMode,
    SubjectMode,
    forge_certificate,
    generate_ca,
    run_intercepting_proxy,
)
from proxyscope.report_service import AuthoritativeCache, RecordStore, ReportService
from proxyscope.tls_probe import FailureKind, ProbeTarget, RawChain, probe


def openssl_text(der: bytes) -> str:
    if shutil.which("openssl") is None:
        pytest.skip("openssl CLI not available")
    return subprocess.run(["openssl", "x509", "-inform", "DER", "-noout", "-text"], input=der,
                          capture_output=True, check=True).stdout.decode()


@pytest.fixture(scope="module")
def ca():
    return generate_ca("Fixture Interception Root", "Fixture Proxy Vendor")


@pytest.fixture(scope="module")
def digicert():
    return make_pki("tlsresearch.byu.edu", root_org="DigiCert Inc")


# --- profiles ---------------------------------------------------------------


@pytest.mark.parametrize("kwargs", [
    {"key_bits": 3000},
    {"key_bits": 1536},
    {"hash_algo": "sha512"},
    {"key_algorithm": "ec", "key_bits": 256, "hash_algo": "md5"},
    {"key_algorithm": "ec", "key_bits": 2048},
    {"key_algorithm": "dsa"},
    {"issuer_mode": IssuerMode.INJECTED_ROOT},
    {"issuer_mode": IssuerMode.NULL_ISSUER, "issuer_org_override": "X"},
    {"subject_mode": SubjectMode.FIXED},
    {"issuer_mode": "nonsense"},
])
def test_invalid_profiles(kwargs):
    with pytest.raises((ProfileError, ValueError)):
        ForgeProfile(**kwargs)


def test_string_modes_accepted():
    p = ForgeProfile(issuer_mode="copy_issuer_name", subject_mode="copy")
    assert p.issuer_mode is IssuerMode.COPY_ISSUER_NAME


def test_unparseable_origin():
    with pytest.raises(ProfileError):
        forge_certificate(b"\x30\x00", ForgeProfile())


def test_copy_subject_self_signed(digicert):
    forged = forge_certificate(digicert.leaf.der, ForgeProfile(key_bits=1024))
    cert = x509.load_der_x509_certificate(forged.substitute.leaf)
    origin = digicert.leaf.cert
    assert cert.subject == origin.subject
    assert cert.extensions.get_extension_for_class(x509.SubjectAlternativeName).value == \
        origin.extensions.get_extension_for_class(x509.SubjectAlternativeName).value
    assert cert.issuer == cert.subject
    assert cert.public_key().key_size == 1024
    assert cert.not_valid_before_utc == origin.not_valid_before_utc
    assert cert.not_valid_after_utc == origin.not_valid_after_utc
    assert forged.leaf_fp != forged.origin_fp == digicert.leaf.sha256
    assert forged.leaf_fp == hashlib.sha256(forged.substitute.leaf).digest()
    # the private key belongs to the certificate
    assert forged.key.public_key().public_numbers() == cert.public_key().public_numbers()


def test_fresh_key_and_serial_each_time(digicert):
    a = forge_certificate(digicert.leaf.der, ForgeProfile())
    b = forge_certificate(digicert.leaf.der, ForgeProfile())
    ca_, cb = (x509.load_der_x509_certificate(f.substitute.leaf) for f in (a, b))
    assert ca_.public_key().public_numbers() != cb.public_key().public_numbers()
    assert ca_.serial_number != cb.serial_number
    assert ca_.serial_number.bit_length() <= 64


def test_512_bit_key_openssl(digicert):
    forged = forge_certificate(digicert.leaf.der, ForgeProfile(key_bits=512))
    assert "Public-Key: (512 bit)" in openssl_text(forged.substitute.leaf)
    assert parse_der(forged.substitute.leaf).key_bits == 512


@pytest.mark.parametrize("algo,label", [("md5", "md5WithRSAEncryption"), ("sha1", "sha1WithRSAEncryption")])
def test_legacy_hash_openssl(digicert, algo, label):
    forged = forge_certificate(digicert.leaf.der, ForgeProfile(hash_algo=algo))
    text = openssl_text(forged.substitute.leaf)
    assert text.count(label) == 2  # inner and outer AlgorithmIdentifier
    assert verify_signed_by(forged.substitute.leaf, forged.substitute.leaf)


def test_ec_key(digicert):
    forged = forge_certificate(digicert.leaf.der, ForgeProfile(key_algorithm="ec", key_bits=384))
    key = x509.load_der_x509_certificate(forged.substitute.leaf).public_key()
    assert isinstance(key, ec.EllipticCurvePublicKey) and key.curve.key_size == 384


def test_injected_root_verifies(digicert, ca):
    forged = forge_certificate(digicert.leaf.der,
                               ForgeProfile(IssuerMode.INJECTED_ROOT, signing_ca=ca))
    assert forged.substitute.certificates[1:] == (ca.cert_der,)
    leaf = x509.load_der_x509_certificate(forged.substitute.leaf)
    root = x509.load_der_x509_certificate(ca.cert_der)
    leaf.verify_directly_issued_by(root)  # independent check
    assert verify_signed_by(forged.substitute.leaf, ca.cert_der)
    assert not verify_signed_by(forged.substitute.leaf, digicert.root.der)


def test_injected_root_md5(digicert, ca):
    forged = forge_certificate(digicert.leaf.der, ForgeProfile(IssuerMode.INJECTED_ROOT, signing_ca=ca,
                                                               hash_algo="md5"))
    assert "md5WithRSAEncryption" in openssl_text(forged.substitute.leaf)
    assert verify_signed_by(forged.substitute.leaf, ca.cert_der)


def test_injected_root_ec_signer_rejects_md5(digicert):
    self_signed = forge_certificate(digicert.leaf.der, ForgeProfile(key_algorithm="ec", key_bits=256))
    ec_ca = CertificateAuthority(self_signed.substitute.leaf, self_signed.key)
    with pytest.raises(ProfileError):
        forge_certificate(digicert.leaf.der, ForgeProfile(IssuerMode.INJECTED_ROOT, signing_ca=ec_ca,
                                                          hash_algo="md5"))


def test_copy_issuer_name_does_not_verify(digicert):
    forged = forge_certificate(digicert.leaf.der, ForgeProfile(IssuerMode.COPY_ISSUER_NAME))
    cert = x509.load_der_x509_certificate(forged.substitute.leaf)
    assert cert.issuer == digicert.leaf.cert.issuer
    assert verify_signed_by(forged.substitute.leaf, digicert.root.der) is False


def test_null_issuer(digicert):
    forged = forge_certificate(digicert.leaf.der, ForgeProfile(IssuerMode.NULL_ISSUER))
    assert len(x509.load_der_x509_certificate(forged.substitute.leaf).issuer) == 0
    s = parse_der(forged.substitute.leaf)
    assert s.issuer_org is s.issuer_cn is s.issuer_ou is None


def test_fixed_subject(digicert):
    forged = forge_certificate(digicert.leaf.der, ForgeProfile(subject_mode=SubjectMode.FIXED,
                                                               subject_value="mail.google.com"))
    s = parse_der(forged.substitute.leaf)
    assert s.subject_cn == "mail.google.com" and s.subject_alt_names == ("mail.google.com",)


def test_wildcard_subnet(digicert):
    forged = forge_certificate(digicert.leaf.der, ForgeProfile(subject_mode=SubjectMode.WILDCARD_SUBNET))
    assert parse_der(forged.substitute.leaf).subject_cn == "127.0.0.*"
    explicit = forge_certificate(digicert.leaf.der, ForgeProfile(subject_mode=SubjectMode.WILDCARD_SUBNET,
                                                                 subject_value="192.0.2.77"))
    assert parse_der(explicit.substitute.leaf).subject_cn == "192.0.2.*"


def test_issuer_override_classifies(digicert):
    forged = forge_certificate(digicert.leaf.der, ForgeProfile(issuer_org_override="Bitdefender"))
    s = parse_der(forged.substitute.leaf)
    assert s.issuer_org == "Bitdefender"
    assert classify(s, default_rules()).category is ProxyCategory.BusinessPersonalFirewall


def test_weak_key_pipeline(digicert):
    forged = forge_certificate(digicert.leaf.der, ForgeProfile(key_bits=1024))
    rep = detect_negligence(parse_der(forged.substitute.leaf), parse_der(digicert.leaf.der),
                            "tlsresearch.byu.edu")
    assert rep.weak_key == (1024, 2048)


def test_ca_pem_round_trip(ca, tmp_path):
    ca.write_pem(tmp_path / "ca.pem", tmp_path / "ca.key")
    again = CertificateAuthority.load_pem(tmp_path / "ca.pem", tmp_path / "ca.key")
    assert again.cert_der == ca.cert_der
    assert isinstance(again.key, rsa.RSAPrivateKey)


# --- intercepting proxy -----------------------------------------------------


def _through(proxy, server_name="localhost"):
    host, port = proxy.address
    return probe(ProbeTarget(host, port, server_name=server_name), timeout_ms=3000)


def test_proxy_substitutes_leaf(origin, pki):
    direct = probe(ProbeTarget("localhost", origin.port), timeout_ms=3000)
    with run_intercepting_proxy(("127.0.0.1", 0), ProbeTarget("localhost", origin.port),
                                ForgeProfile()) as proxy:
        first, second = _through(proxy), _through(proxy)
    assert direct.ok and first.ok and second.ok
    assert fingerprint(direct.chain.leaf) == pki.leaf.sha256
    assert fingerprint(first.chain.leaf) != fingerprint(direct.chain.leaf)
    assert first.chain.certificates == second.chain.certificates


def test_proxy_relays_application_data(origin, pki, ca):
    profile = ForgeProfile(IssuerMode.INJECTED_ROOT, signing_ca=ca)
    with InterceptingProxy(ProbeTarget("localhost", origin.port), profile) as proxy:
        ctx = ssl.create_default_context(cadata=ca.cert_der)
        with socket.create_connection(proxy.address, timeout=5) as raw, \
                ctx.wrap_socket(raw, server_hostname="localhost") as tls:
            tls.sendall(b"hello")
            assert tls.recv(100) == b"origin:hello"
            peer = tls.getpeercert(binary_form=True)
        assert peer == proxy.forged_chain().substitute.leaf
        assert proxy.handshakes >= 1


def test_proxy_upstream_unreachable():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    dead = s.getsockname()[1]
    s.close()
    with run_intercepting_proxy(("127.0.0.1", 0), ProbeTarget("127.0.0.1", dead), ForgeProfile(),
                                timeout_ms=1000) as proxy:
        out = _through(proxy, None)
    assert out.failure is FailureKind.HANDSHAKE_ALERT


def test_null_issuer_through_ingest(origin, pki, tmp_path):
    target = ProbeTarget("localhost", origin.port)
    with run_intercepting_proxy(("127.0.0.1", 0), target, ForgeProfile(IssuerMode.NULL_ISSUER)) as proxy:
        out = _through(proxy)
    assert out.ok
    store = RecordStore(tmp_path)
    cache = AuthoritativeCache(lambda t: RawChain(tuple(pki.chain_der)), store=store)
    service = ReportService(store, cache, [target])
    record = service.ingest_report("203.0.113.9", "localhost", origin.port,
                                   encode_concatenated_pem(out.chain))
    assert record.verdict.value == "mismatch"
    assert record.category is ProxyCategory.Unknown
    assert "null_issuer" in record.negligence.findings
