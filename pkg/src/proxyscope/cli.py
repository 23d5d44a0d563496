"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure. ``--config FILE``
loads a JSON object; top-level scalar keys apply to every subcommand and a
key named after a subcommand holds settings for that command only. Flags
given on the command line win over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from . import __version__
from .cert_model import decode_concatenated_pem, encode_concatenated_pem, parse_der
from .errors import ProxyscopeError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
FORMATS = ("text", "csv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host.strip("[]") or "127.0.0.1", int(port)


def _target(text: str):
    from .tls_probe import ProbeTarget

    try:
        return ProbeTarget.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _wait_for_interrupt() -> None:
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        while not stop.wait(0.5):
            pass
    except KeyboardInterrupt:
        pass


# --- commands ---------------------------------------------------------------


def cmd_probe(args) -> int:
    from .tls_probe import ClientHelloParams, TLSVersion, probe

    params = ClientHelloParams(offered_versions={TLSVersion.parse(v) for v in args.versions},
                               include_sni=not args.no_sni)
    outcome = probe(args.target, params, args.timeout_ms, connect_to=args.connect_to)
    if not outcome.ok:
        print(f"{args.target}: {outcome.failure.value} ({outcome.detail})", file=sys.stderr)
        return EXIT_RUNTIME
    if args.pem:
        Path(args.pem).write_text(encode_concatenated_pem(outcome.chain))
    print(f"{args.target}: {len(outcome.chain)} certificate(s), "
          f"{TLSVersion(outcome.negotiated_version).label}, {outcome.elapsed_ms:.0f} ms")
    for i, der in enumerate(outcome.chain):
        s = parse_der(der)
        print(f"  [{i}] {s.fingerprint_hex}  subject CN={s.subject_cn}  issuer O={s.issuer_org} "
              f"CN={s.issuer_cn}  {s.key_algorithm.value}-{s.key_bits}  {s.signature_algorithm}")
    return EXIT_OK


def cmd_campaign(args) -> int:
    from .reporting import replay_spool, run_campaign

    if args.replay_spool:
        sent, left = replay_spool(args.spool, args.endpoint)
        print(f"replayed {sent}, {left} still spooled")
        return EXIT_OK if left == 0 else EXIT_RUNTIME
    if not args.targets:
        raise UsageError("campaign needs at least one target")
    summary = run_campaign(args.targets, None, args.concurrency, args.endpoint,
                           spool_path=args.spool, timeout_ms=args.timeout_ms)
    print(json.dumps(summary.to_dict(), indent=2))
    return EXIT_OK


def _build_service(args):
    from .report_service import AuthoritativeCache, RecordStore, ReportService, load_geo, probe_fetcher

    store = RecordStore(args.store)
    cache = AuthoritativeCache(probe_fetcher(args.timeout_ms), store=store,
                               ttl_s=args.ttl, grace_s=args.grace)
    ca_store = []
    for path in args.ca_store or ():
        ca_store.extend(decode_concatenated_pem(Path(path).read_text()).certificates)
    for pin in args.pin or ():
        target_text, _, pem_path = pin.partition("=")
        cache.pin(_target(target_text), decode_concatenated_pem(Path(pem_path).read_text()))
    return ReportService(store, cache, args.target, geo=load_geo(args.geo), ca_store=ca_store)


def _policy_document(args):
    from .policy_gate import PolicyDocument

    if args.policy:
        return PolicyDocument.from_xml(Path(args.policy).read_text("utf-8"))
    return PolicyDocument.build([tuple(a.split(":", 1)) for a in args.allow or ("*:443",)])


def cmd_serve_report(args) -> int:
    from .report_service import ReportServer

    if not args.target:
        raise UsageError("serve-report needs at least one --target")
    service = _build_service(args)
    policy = _policy_document(args) if args.co_serve_policy else None
    server = ReportServer(service, args.listen, trusted_proxy=args.trusted_proxy, policy=policy)
    with server:
        print(f"report service on {server.address[0]}:{server.address[1]}", flush=True)
        _wait_for_interrupt()
    return EXIT_OK


def cmd_serve_policy(args) -> int:
    from .policy_gate import PolicyServer

    with PolicyServer(_policy_document(args), args.listen) as server:
        print(f"policy server on {server.address[0]}:{server.address[1]}", flush=True)
        _wait_for_interrupt()
    return EXIT_OK


def cmd_scan_policy(args) -> int:
    from .policy_gate import ScanOutcome, scan_policy

    exit_code = EXIT_OK
    for host in args.hosts:
        r = scan_policy(host, args.port, args.timeout_ms, args.target_port)
        ports = f" ports={r.permitted}" if r.permitted else ""
        print(f"{host}:{args.port} {r.outcome.value}{ports}{' ' + r.detail if r.detail else ''}")
        if r.outcome is ScanOutcome.MALFORMED:
            exit_code = EXIT_RUNTIME
    return exit_code


def _profile(args):
    from .mitm_forge import CertificateAuthority, ForgeProfile

    ca = None
    if args.ca_cert or args.ca_key:
        if not (args.ca_cert and args.ca_key):
            raise UsageError("--ca-cert and --ca-key go together")
        ca = CertificateAuthority.load_pem(args.ca_cert, args.ca_key)
    return ForgeProfile(issuer_mode=args.issuer_mode, key_bits=args.key_bits, hash_algo=args.hash,
                        subject_mode=args.subject_mode, subject_value=args.subject_value,
                        issuer_org_override=args.issuer_org, signing_ca=ca,
                        key_algorithm=args.key_algorithm)


def cmd_forge(args) -> int:
    from .mitm_forge import forge_certificate, generate_ca

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.new_ca:
        ca = generate_ca(args.new_ca, args.issuer_org)
        ca.write_pem(out / "ca.pem", out / "ca-key.pem")
        print(f"wrote {out / 'ca.pem'} and {out / 'ca-key.pem'}")
        return EXIT_OK
    if not args.origin:
        raise UsageError("forge needs --origin or --new-ca")
    origin = decode_concatenated_pem(Path(args.origin).read_text()).leaf
    forged = forge_certificate(origin, _profile(args))
    (out / "chain.pem").write_text(encode_concatenated_pem(forged.substitute))
    (out / "key.pem").write_bytes(forged.key_pem())
    print(f"{forged.profile.describe()}: leaf {forged.leaf_fp.hex()} -> {out / 'chain.pem'}")
    return EXIT_OK


def cmd_mitm(args) -> int:
    from .mitm_forge import run_intercepting_proxy

    proxy = run_intercepting_proxy(args.listen, args.upstream, _profile(args),
                                   upstream_address=args.upstream_address, timeout_ms=args.timeout_ms)
    with proxy:
        print(f"intercepting {args.upstream} on {proxy.address[0]}:{proxy.address[1]}", flush=True)
        _wait_for_interrupt()
    return EXIT_OK


def _records(args):
    from .report_service import RecordFilter, RecordStore

    store = RecordStore(args.store)
    flt = RecordFilter(country=args.country, verdict=args.verdict, category=args.category,
                       target=args.filter_target)
    return store, [r for r in store.iter_records() if flt.accepts(r)]


def cmd_analyze(args) -> int:
    from collections import Counter

    from .report_service import AuthoritativeCache, RecordStore, ReportService

    store, records = _records(args)
    verdicts = Counter(r.verdict.value for r in records)
    findings = Counter(f for r in records if r.negligence for f in r.negligence.findings)
    print(f"records: {len(records)}  " + "  ".join(f"{k}={v}" for k, v in sorted(verdicts.items())))
    for name, n in findings.most_common():
        print(f"  {name}: {n}")
    if args.replay:
        service = ReportService(store, AuthoritativeCache(lambda t: None, store=store), ())
        report = service.replay()
        print(f"replay: {report.reproduced}/{report.checked} verdicts reproduced")
        if report.differing:
            return EXIT_RUNTIME
    return EXIT_OK


def _load_host_types(path: str | None) -> dict | None:
    if not path:
        return None
    text = Path(path).read_text("utf-8")
    if path.endswith(".json"):
        return json.loads(text)
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            host, _, label = line.partition(",")
            out[host.strip()] = label.strip()
    return out


def cmd_report(args) -> int:
    from .reporting import distinct_key_counts, prevalence_by, rows_to_csv, rows_to_text

    _, records = _records(args)
    rows = prevalence_by(records, args.by, _load_host_types(args.host_types))
    text = rows_to_csv(rows) if args.format == "csv" else rows_to_text(rows)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    if args.by == "country" and args.format == "text":
        counts = distinct_key_counts(rows)
        print(f"countries observed: {counts['observed']}, with proxied connections: {counts['proxied']}")
    return EXIT_OK


def cmd_heatmap(args) -> int:
    from .reporting import export_heatmap, prevalence_by

    _, records = _records(args)
    lines = export_heatmap(prevalence_by(records, "country"), args.min_total)
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def _add_profile_args(p) -> None:
    from .mitm_forge import IssuerMode, SubjectMode

    p.add_argument("--issuer-mode", choices=[m.value for m in IssuerMode], default="self_signed")
    p.add_argument("--key-bits", type=int, default=2048)
    p.add_argument("--key-algorithm", choices=("rsa", "ec"), default="rsa")
    p.add_argument("--hash", choices=("md5", "sha1", "sha256"), default="sha256")
    p.add_argument("--subject-mode", choices=[m.value for m in SubjectMode], default="copy")
    p.add_argument("--subject-value")
    p.add_argument("--issuer-org", help="Issuer O to write into forged certificates")
    p.add_argument("--ca-cert", help="signing CA certificate (PEM) for injected_root")
    p.add_argument("--ca-key", help="signing CA key (PEM)")


def _add_filter_args(p) -> None:
    p.add_argument("--store", required=True, help="record store directory")
    p.add_argument("--country")
    p.add_argument("--verdict", choices=("match", "mismatch"))
    p.add_argument("--category")
    p.add_argument("--filter-target", type=_target, metavar="HOST:PORT")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="proxyscope", description="Detect and characterize TLS-intercepting proxies.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("probe", help="fetch a server's certificate chain")
    p.add_argument("target", type=_target, metavar="HOST[:PORT]")
    p.add_argument("--timeout-ms", type=int, default=5000)
    p.add_argument("--connect-to", type=_endpoint, metavar="HOST:PORT")
    p.add_argument("--versions", nargs="+", default=["1.2"])
    p.add_argument("--no-sni", action="store_true")
    p.add_argument("--pem", help="write the captured chain here")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("campaign", help="probe an anchor then other targets, and report")
    p.add_argument("targets", nargs="*", type=_target, metavar="HOST[:PORT]")
    p.add_argument("--endpoint", help="report URL, e.g. http://host:8080/report")
    p.add_argument("--concurrency", type=int, default=32)
    p.add_argument("--timeout-ms", type=int, default=5000)
    p.add_argument("--spool", default="proxyscope-spool.jsonl")
    p.add_argument("--replay-spool", action="store_true")
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("serve-report", help="run the report ingestion service")
    p.add_argument("--listen", type=_endpoint, default=("127.0.0.1", 8080))
    p.add_argument("--store", required=True)
    p.add_argument("--target", type=_target, action="append", metavar="HOST[:PORT]")
    p.add_argument("--geo", help="cidr,iso2 CSV or .mmdb file")
    p.add_argument("--trusted-proxy", help="peer address allowed to set X-Forwarded-For")
    p.add_argument("--ttl", type=int, default=3600)
    p.add_argument("--grace", type=int, default=86400)
    p.add_argument("--timeout-ms", type=int, default=5000)
    p.add_argument("--ca-store", action="append", help="PEM bundle of genuine CA certificates")
    p.add_argument("--pin", action="append", metavar="HOST:PORT=PEM",
                   help="fixed authoritative chain for a target")
    p.add_argument("--co-serve-policy", action="store_true",
                   help="answer socket policy requests on the same port")
    p.add_argument("--policy")
    p.add_argument("--allow", action="append", metavar="DOMAIN:PORTS")
    p.set_defaults(func=cmd_serve_report)

    p = sub.add_parser("serve-policy", help="serve a socket policy file")
    p.add_argument("--listen", type=_endpoint, default=("0.0.0.0", 843))
    p.add_argument("--policy", help="policy XML file")
    p.add_argument("--allow", action="append", metavar="DOMAIN:PORTS")
    p.set_defaults(func=cmd_serve_policy)

    p = sub.add_parser("scan-policy", help="check hosts for a permissive socket policy")
    p.add_argument("hosts", nargs="+")
    p.add_argument("--port", type=int, default=843)
    p.add_argument("--target-port", type=int, default=443)
    p.add_argument("--timeout-ms", type=int, default=5000)
    p.set_defaults(func=cmd_scan_policy)

    p = sub.add_parser("forge", help="forge a substitute certificate, or make a signing CA")
    p.add_argument("--origin", help="PEM file whose first certificate is the origin leaf")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--new-ca", metavar="CN", help="write a fresh CA instead of forging")
    _add_profile_args(p)
    p.set_defaults(func=cmd_forge)

    p = sub.add_parser("mitm", help="run an intercepting proxy")
    p.add_argument("--listen", type=_endpoint, default=("127.0.0.1", 8443))
    p.add_argument("--upstream", type=_target, required=True, metavar="HOST[:PORT]")
    p.add_argument("--upstream-address", type=_endpoint, metavar="HOST:PORT")
    p.add_argument("--timeout-ms", type=int, default=5000)
    _add_profile_args(p)
    p.set_defaults(func=cmd_mitm)

    p = sub.add_parser("analyze", help="summarize stored records")
    _add_filter_args(p)
    p.add_argument("--replay", action="store_true", help="recompute and check every verdict")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="prevalence table")
    _add_filter_args(p)
    p.add_argument("--by", choices=("country", "host_type", "category", "issuer_org", "target"),
                   default="country")
    p.add_argument("--host-types", help="JSON object or host,label CSV")
    p.add_argument("--format", choices=FORMATS, default="text")
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("heatmap", help="iso2,rate export")
    _add_filter_args(p)
    p.add_argument("--min-total", type=int, default=1)
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_heatmap)
    return parser


def _apply_config(parser: argparse.ArgumentParser, path: str) -> None:
    try:
        config = json.loads(Path(path).read_text("utf-8"))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(config, dict):
        raise UsageError("config must be a JSON object")
    shared = {k.replace("-", "_"): v for k, v in config.items() if not isinstance(v, dict)}
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, sp in subparsers.choices.items():
        known = {a.dest for a in sp._actions}
        section = {k.replace("-", "_"): v for k, v in (config.get(name) or {}).items()}
        unknown = set(section) - known
        if unknown:
            raise UsageError(f"config section {name!r}: unknown keys {sorted(unknown)}")
        values = {k: v for k, v in shared.items() if k in known} | section
        for action in sp._actions:
            # config values pass through the same converters as flags
            if action.dest in values and action.type is not None:
                v = values[action.dest]
                values[action.dest] = [action.type(x) for x in v] if isinstance(v, list) else action.type(v)
            if action.dest in values and action.required:
                action.required = False
        sp.set_defaults(**values)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    try:
        if known.config:
            _apply_config(parser, known.config)
    except (UsageError, argparse.ArgumentTypeError) as exc:
        print(f"proxyscope: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"proxyscope: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ProxyscopeError, OSError, ValueError) as exc:
        print(f"proxyscope: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
