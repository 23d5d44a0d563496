import datetime as dt
import http.client
import json
import socket

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import DATA
from proxyscope.cert_model import Verdict, encode_concatenated_pem
from proxyscope.classifier import ProxyCategory
from proxyscope.errors import ParameterError, RejectedReport, RetryableError
from proxyscope.mitm_forge import ForgeProfile, forge_certificate
from proxyscope.policy_gate import CANONICAL_REQUEST, PolicyDocument
from proxyscope.report_service import (
    UNKNOWN_COUNTRY,
    AuthoritativeCache,
    GeoDatabase,
    RecordFilter,
    RecordStore,
    ReportServer,
    ReportService,
    geolocate,
    probe_fetcher,
)
from proxyscope.tls_probe import ProbeTarget, RawChain

T0 = dt.datetime(2026, 1, 1, tzinfo=dt.timezone.utc)
TARGET = ProbeTarget("localhost", 4433)


class Clock:
    def __init__(self, start=T0):
        self.now = start

    def __call__(self):
        return self.now

    def advance(self, **kw):
        self.now += dt.timedelta(**kw)


class Fetcher:
    """Serves whatever chain is current; ``down`` simulates an outage."""

    def __init__(self, chain):
        self.chain = chain
        self.down = False
        self.calls = 0

    def __call__(self, target):
        self.calls += 1
        if self.down:
            raise OSError("connection refused")
        return self.chain


@pytest.fixture(scope="module")
def geo():
    return GeoDatabase.from_csv(DATA / "geo.csv")


@pytest.fixture
def env(tmp_path, pki, geo):
    clock = Clock()
    fetcher = Fetcher(RawChain(tuple(pki.chain_der)))
    store = RecordStore(tmp_path / "store")
    cache = AuthoritativeCache(fetcher, store=store, ttl_s=3600, grace_s=600, clock=clock)
    service = ReportService(store, cache, [TARGET], geo=geo, clock=clock)
    return service, clock, fetcher


def forged_pem(pki, **kw):
    return encode_concatenated_pem(forge_certificate(pki.leaf.der, ForgeProfile(**kw)).substitute)


# --- geo ----------------------------------------------------------------------


@pytest.mark.parametrize("ip,country", [
    ("203.0.113.7", "US"),
    ("10.9.9.9", "DE"),
    ("10.1.2.3", "FR"),
    ("192.0.2.1", "KR"),
    ("192.0.2.200", UNKNOWN_COUNTRY),
    ("8.8.8.8", UNKNOWN_COUNTRY),
    ("2001:db8::1", "JP"),
    ("2001:db8:1::5", "NL"),
    ("::ffff:203.0.113.7", "US"),
])
def test_geo_lookup(geo, ip, country):
    assert geolocate(ip, geo) == country


@pytest.mark.parametrize("ip", ["", "300.1.1.1", "example.com", "10.0.0"])
def test_geo_malformed(geo, ip):
    with pytest.raises(ParameterError):
        geo.lookup(ip)


def test_geo_csv_errors():
    with pytest.raises(ValueError, match="line 2"):
        GeoDatabase.from_csv("10.0.0.0/8,DE\nnot-a-cidr,US\n")
    with pytest.raises(ValueError, match="line 1"):
        GeoDatabase.from_csv("10.0.0.0/8\n")


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1), st.lists(st.tuples(st.integers(0, 2**32 - 1), st.integers(0, 32),
                                                      st.sampled_from(["AA", "BB", "CC"])), max_size=8))
def test_longest_prefix_property(addr, ranges):
    """Compare against a brute-force scan of every range."""
    import ipaddress

    db = GeoDatabase()
    nets = []
    for base, plen, cc in ranges:
        net = ipaddress.ip_network((base, plen), strict=False)
        db.add(str(net), cc)
        nets.append((net, cc))
    ip = ipaddress.ip_address(addr)
    covering = [(n.prefixlen, i, cc) for i, (n, cc) in enumerate(nets) if ip in n]
    if not covering:
        expected = UNKNOWN_COUNTRY
    else:
        best = max(p for p, _, _ in covering)
        # later additions of the same network overwrite earlier ones
        expected = [cc for p, i, cc in sorted(covering, key=lambda c: c[1]) if p == best][-1]
    assert db.lookup(str(ip)) == expected


# --- ingest -------------------------------------------------------------------


def test_authoritative_chain_matches(env, pki):
    service, _, _ = env
    r = service.ingest_report("203.0.113.5", "localhost", 4433, pki.chain_pem)
    assert r.verdict is Verdict.MATCH
    assert r.country == "US"
    assert r.category is None and r.negligence is None
    assert r.observed_leaf_fp == r.authoritative_leaf_fp == pki.leaf.sha256


def test_leaf_only_payload_matches(env, pki):
    service, _, _ = env
    assert service.ingest_report("10.0.0.1", "LOCALHOST.", 4433, pki.leaf.pem.decode()).verdict is Verdict.MATCH


def test_forged_chain_mismatch(env, pki):
    service, _, _ = env
    r = service.ingest_report("10.1.2.3", "localhost", 4433,
                              forged_pem(pki, issuer_org_override="Kaspersky Lab ZAO"))
    assert r.verdict is Verdict.MISMATCH
    assert r.category is ProxyCategory.BusinessPersonalFirewall
    assert r.issuer_org == "Kaspersky Lab ZAO"
    assert r.country == "FR"
    assert r.negligence is not None


@pytest.mark.parametrize("payload,reason", [
    ("no certificates at all", "empty_chain"),
    ("-----BEGIN CERTIFICATE-----\n!!!\n-----END CERTIFICATE-----\n", "undecodable"),
])
def test_rejected_payloads_logged(env, payload, reason):
    service, _, _ = env
    with pytest.raises(RejectedReport) as info:
        service.ingest_report("10.0.0.1", "localhost", 4433, payload)
    assert info.value.reason == reason
    assert [r["reason"] for r in service.store.iter_rejects()] == [reason]
    assert list(service.store.iter_records()) == []


def test_unknown_target_rejected(env, pki):
    service, _, fetcher = env
    with pytest.raises(RejectedReport) as info:
        service.ingest_report("10.0.0.1", "evil.example", 4433, pki.chain_pem)
    assert info.value.reason == "unknown_target"
    assert fetcher.calls == 0
    assert next(service.store.iter_rejects())["target"] == "evil.example:4433"


def test_bad_client_ip(env, pki):
    service, _, _ = env
    with pytest.raises(ParameterError):
        service.ingest_report("not-an-ip", "localhost", 4433, pki.chain_pem)


def test_blob_dedup(env, pki):
    service, _, _ = env
    before = service.store.blob_count()
    a = service.ingest_report("10.0.0.1", "localhost", 4433, pki.chain_pem)
    b = service.ingest_report("10.0.0.2", "localhost", 4433, pki.chain_pem)
    assert a.id != b.id and a.observed_chain_ref == b.observed_chain_ref
    assert len(list(service.store.iter_records())) == 2
    assert service.store.blob_count() - before <= 1


def test_rotation_grace(env, pki, rotated_pki):
    service, clock, fetcher = env
    assert service.ingest_report("10.0.0.1", "localhost", 4433, pki.chain_pem).verdict is Verdict.MATCH
    fetcher.chain = RawChain(tuple(rotated_pki.chain_der))
    clock.advance(seconds=3601)
    # refresh sees the new leaf; the old one is still inside grace
    assert service.ingest_report("10.0.0.1", "localhost", 4433, pki.chain_pem).verdict is Verdict.MATCH
    assert service.ingest_report("10.0.0.1", "localhost", 4433,
                                 rotated_pki.chain_pem).verdict is Verdict.MATCH
    clock.advance(seconds=601)
    assert service.ingest_report("10.0.0.1", "localhost", 4433, pki.chain_pem).verdict is Verdict.MISMATCH
    assert service.ingest_report("10.0.0.1", "localhost", 4433,
                                 rotated_pki.chain_pem).verdict is Verdict.MATCH


def test_outage_within_ttl_keeps_entry(env, pki):
    service, clock, fetcher = env
    service.ingest_report("10.0.0.1", "localhost", 4433, pki.chain_pem)
    fetcher.down = True
    clock.advance(seconds=1800)
    assert service.cache.refresh(TARGET).leaf_fp == pki.leaf.sha256
    assert service.ingest_report("10.0.0.1", "localhost", 4433, pki.chain_pem).verdict is Verdict.MATCH


def test_outage_past_ttl_is_retryable(env, pki):
    service, clock, fetcher = env
    service.ingest_report("10.0.0.1", "localhost", 4433, pki.chain_pem)
    fetcher.down = True
    clock.advance(seconds=3600)
    n = len(list(service.store.iter_records()))
    with pytest.raises(RetryableError):
        service.ingest_report("10.0.0.1", "localhost", 4433, pki.chain_pem)
    assert service.cache.peek(TARGET) is None
    assert len(list(service.store.iter_records())) == n
    fetcher.down = False
    assert service.ingest_report("10.0.0.1", "localhost", 4433, pki.chain_pem).verdict is Verdict.MATCH


def test_unchanged_refresh_keeps_version(env):
    service, clock, _ = env
    first = service.cache.get(TARGET)
    clock.advance(seconds=4000)
    again = service.cache.get(TARGET)
    assert again.version == first.version and again.fetched_at > first.fetched_at


def test_self_measurement_pin(tmp_path, pki):
    store = RecordStore(tmp_path)
    cache = AuthoritativeCache(lambda t: pytest.fail("pinned entries are never fetched"), store=store)
    entry = cache.pin(TARGET, RawChain(tuple(pki.chain_der)))
    assert entry.leaf_fp == pki.leaf.sha256 and entry.ttl_s is None
    assert cache.get(TARGET) is entry


def test_live_fetcher(origin, pki, tmp_path):
    target = ProbeTarget("localhost", origin.port)
    cache = AuthoritativeCache(probe_fetcher(3000), store=RecordStore(tmp_path))
    assert cache.get(target).leaf_fp == pki.leaf.sha256


def test_versions_continue_across_restart(tmp_path, pki):
    store = RecordStore(tmp_path)
    AuthoritativeCache(store=store).pin(TARGET, RawChain(tuple(pki.chain_der)))
    assert AuthoritativeCache(store=store).pin(TARGET, RawChain(tuple(pki.chain_der))).version == 2


# --- query and replay ---------------------------------------------------------


@pytest.fixture
def ten_records(env, pki):
    service, clock, _ = env
    forged = forged_pem(pki, issuer_org_override="Sendori Inc")
    ips = ["203.0.113.1", "10.0.0.1", "203.0.113.2", "198.51.100.4", "203.0.113.3",
           "10.1.2.3", "192.0.2.9", "203.0.113.4", "8.8.8.8", "2001:db8::2"]
    for i, ip in enumerate(ips):
        clock.advance(seconds=10)
        service.ingest_report(ip, "localhost", 4433, forged if i in (1, 4, 8) else pki.chain_pem)
    return service


def test_query_mismatches(ten_records):
    out = list(ten_records.query_records(RecordFilter(verdict=Verdict.MISMATCH)))
    assert len(out) == 3
    assert all(r.category is ProxyCategory.Malware for r in out)


def test_query_all_ordered(ten_records):
    out = list(ten_records.query_records())
    assert len(out) == 10
    assert [r.received_at for r in out] == sorted(r.received_at for r in out)


def test_query_country(ten_records):
    out = list(ten_records.query_records(RecordFilter(country="us")))
    assert len(out) == 4 and {r.country for r in out} == {"US"}
    assert len(list(ten_records.query_records(RecordFilter(country="US", verdict=Verdict.MISMATCH)))) == 1


def test_query_time_and_category(ten_records):
    out = list(ten_records.query_records(RecordFilter(since=T0 + dt.timedelta(seconds=30),
                                                      until=T0 + dt.timedelta(seconds=60))))
    assert len(out) == 3
    assert len(list(ten_records.query_records(RecordFilter(category=ProxyCategory.Malware)))) == 3
    assert list(ten_records.query_records(RecordFilter(target=ProbeTarget("localhost", 1)))) == []


def test_replay_reproduces_all(ten_records):
    report = ten_records.replay()
    assert report.checked == report.reproduced == 10 and report.rate == 1.0


def test_replay_detects_tampering(ten_records):
    path = ten_records.store.records_path
    lines = path.read_text().splitlines()
    d = json.loads(lines[0])
    d["verdict"] = "mismatch" if d["verdict"] == "match" else "match"
    if d["verdict"] == "mismatch":
        d["category"] = "Unknown"
        d["negligence"] = {"notes": ["tampered"]}
    else:
        d["category"] = d["negligence"] = None
    lines[0] = json.dumps(d)
    path.write_text("\n".join(lines) + "\n")
    report = ten_records.replay()
    assert report.reproduced == 9 and report.differing == (d["id"],)


def test_no_match_with_negligence(ten_records):
    for r in ten_records.store.iter_records():
        assert (r.verdict is Verdict.MATCH) == (r.negligence is None) == (r.category is None)


# --- HTTP ---------------------------------------------------------------------


@pytest.fixture
def server(env):
    service, _, _ = env
    policy = PolicyDocument.build([("*", "443,4433")])
    with ReportServer(service, ("127.0.0.1", 0), trusted_proxy="127.0.0.1", policy=policy) as srv:
        yield srv


def post(server, body, headers=None):
    conn = http.client.HTTPConnection(*server.address, timeout=5)
    data = body if isinstance(body, bytes) else json.dumps(body).encode()
    conn.request("POST", "/report", data, {"Content-Type": "application/json", **(headers or {})})
    resp = conn.getresponse()
    out = resp.status, json.loads(resp.read() or b"{}")
    conn.close()
    return out


def test_http_statuses(server, pki, env):
    service, _, fetcher = env
    ok = {"target_host": "localhost", "target_port": 4433, "chain_pem": pki.chain_pem}
    status, body = post(server, ok)
    assert status == 200 and body["verdict"] == "match" and len(body["id"]) == 32
    assert post(server, b"{not json")[0] == 400
    assert post(server, {"target_host": "localhost"})[0] == 400
    assert post(server, {**ok, "chain_pem": "nothing"})[0] == 400
    assert post(server, {**ok, "target_host": "other.example"})[0] == 404
    service.cache._entries.clear()
    fetcher.down = True
    assert post(server, ok)[0] == 503


def test_http_forwarded_for_trusted(server, pki, env):
    service, _, _ = env
    ok = {"target_host": "localhost", "target_port": 4433, "chain_pem": pki.chain_pem}
    post(server, ok, {"X-Forwarded-For": "8.8.8.8, 203.0.113.77"})
    record = list(service.query_records())[-1]
    assert record.client_ip == "203.0.113.77" and record.country == "US"


def test_http_forwarded_for_untrusted(env, pki):
    service, _, _ = env
    ok = {"target_host": "localhost", "target_port": 4433, "chain_pem": pki.chain_pem}
    with ReportServer(service, ("127.0.0.1", 0), trusted_proxy="192.0.2.1") as srv:
        post(srv, ok, {"X-Forwarded-For": "203.0.113.77"})
    assert list(service.query_records())[-1].client_ip == "127.0.0.1"


def test_http_records_ndjson(server, pki, env):
    ok = {"target_host": "localhost", "target_port": 4433, "chain_pem": pki.chain_pem}
    post(server, ok)
    post(server, {**ok, "chain_pem": forged_pem(pki)})
    conn = http.client.HTTPConnection(*server.address, timeout=5)
    conn.request("GET", "/records?verdict=mismatch")
    resp = conn.getresponse()
    assert resp.status == 200 and resp.getheader("Content-Type") == "application/x-ndjson"
    lines = [json.loads(x) for x in resp.read().splitlines()]
    assert len(lines) == 1 and lines[0]["verdict"] == "mismatch"
    conn.close()
    conn = http.client.HTTPConnection(*server.address, timeout=5)
    conn.request("GET", "/records?verdict=bogus")
    assert conn.getresponse().status == 400


def test_policy_co_served(server):
    with socket.create_connection(server.address, timeout=5) as s:
        s.sendall(CANONICAL_REQUEST)
        data = b""
        while chunk := s.recv(4096):
            data += chunk
    assert data.endswith(b"\x00") and b'to-ports="443,4433"' in data
