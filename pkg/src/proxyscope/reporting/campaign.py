"""Client-side campaign: probe an anchor, then the remaining targets in parallel, and report."""

from __future__ import annotations

import json
import logging
import threading
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from ..cert_model import encode_concatenated_pem
from ..tls_probe import (
    DEFAULT_CONCURRENCY,
    DEFAULT_TIMEOUT_MS,
    ClientHelloParams,
    ProbeOutcome,
    ProbeTarget,
    probe,
    probe_many,
)

logger = logging.getLogger(__name__)


@dataclass
class CampaignSummary:
    outcomes: dict[str, Counter] = field(default_factory=dict)  # target -> outcome kind -> n
    reported: int = 0
    rejected: int = 0
    spooled: int = 0
    verdicts: Counter = field(default_factory=Counter)
    probes: list[ProbeOutcome] = field(default_factory=list)

    def add(self, outcome: ProbeOutcome) -> None:
        self.outcomes.setdefault(str(outcome.target), Counter())[outcome.outcome_kind] += 1
        self.probes.append(outcome)

    @property
    def totals(self) -> Counter:
        out = Counter()
        for c in self.outcomes.values():
            out.update(c)
        return out

    def to_dict(self) -> dict:
        return {
            "outcomes": {t: dict(c) for t, c in self.outcomes.items()},
            "totals": dict(self.totals),
            "reported": self.reported,
            "rejected": self.rejected,
            "spooled": self.spooled,
            "verdicts": dict(self.verdicts),
        }


class ReportSender:
    """POSTs reports; on network failure or 503 the payload goes to a JSONL spool."""

    def __init__(self, endpoint: str | None, spool_path: str | Path | None = None, timeout_s: float = 10.0):
        self.endpoint = endpoint
        self.spool_path = Path(spool_path) if spool_path else None
        self.timeout_s = timeout_s
        self._spool_lock = threading.Lock()

    def post(self, payload: dict) -> tuple[int | None, dict | None]:
        """Status and decoded body, or (None, None) when the endpoint is unreachable."""
        req = urllib.request.Request(self.endpoint, data=json.dumps(payload).encode(),
                                     headers={"Content-Type": "application/json"}, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                return resp.status, json.loads(resp.read() or b"{}")
        except urllib.error.HTTPError as exc:
            try:
                body = json.loads(exc.read() or b"{}")
            except ValueError:
                body = {}
            return exc.code, body
        except (urllib.error.URLError, OSError, ValueError) as exc:
            logger.warning("report endpoint %s unreachable: %s", self.endpoint, exc)
            return None, None

    def spool(self, payload: dict) -> None:
        if self.spool_path is None:
            raise RuntimeError("report could not be delivered and no spool is configured")
        with self._spool_lock, open(self.spool_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(payload) + "\n")

    def send(self, payload: dict) -> tuple[str, dict | None]:
        """``("sent", body)``, ``("rejected", body)`` or ``("spooled", None)``."""
        status, body = self.post(payload) if self.endpoint else (None, None)
        if status == 200:
            return "sent", body
        if status is None or status == 503:
            self.spool(payload)
            return "spooled", None
        logger.warning("report rejected (%s): %s", status, body)
        return "rejected", body


def report_payload(outcome: ProbeOutcome) -> dict:
    return {
        "target_host": outcome.target.host,
        "target_port": outcome.target.port,
        "chain_pem": encode_concatenated_pem(outcome.chain),
    }


def run_campaign(targets: Sequence[ProbeTarget], params: ClientHelloParams | None = None,
                 concurrency: int = DEFAULT_CONCURRENCY, report_endpoint: str | None = None, *,
                 routes: dict | None = None, spool_path: str | Path | None = None,
                 timeout_ms: int = DEFAULT_TIMEOUT_MS) -> CampaignSummary:
    """Probe ``targets[0]`` alone, then the rest concurrently; report every captured chain.

    Undeliverable reports are appended to ``spool_path`` for ``replay_spool``.
    """
    if not targets:
        raise ValueError("targets must be nonempty")
    routes = routes or {}
    sender = ReportSender(report_endpoint, spool_path)
    summary = CampaignSummary()

    def handle(outcome: ProbeOutcome) -> None:
        summary.add(outcome)
        if not outcome.ok:
            return
        status, body = sender.send(report_payload(outcome))
        if status == "sent":
            summary.reported += 1
            summary.verdicts[(body or {}).get("verdict", "?")] += 1
        elif status == "spooled":
            summary.spooled += 1
        else:
            summary.rejected += 1

    anchor, rest = targets[0], list(targets[1:])
    handle(probe(anchor, params, timeout_ms, connect_to=routes.get(anchor)))
    for outcome in probe_many(rest, params, timeout_ms, concurrency, routes):
        handle(outcome)
    return summary


def replay_spool(spool_path: str | Path, endpoint: str) -> tuple[int, int]:
    """Resend spooled reports. Delivered or rejected ones are dropped; returns (sent, remaining)."""
    path = Path(spool_path)
    if not path.exists():
        return 0, 0
    pending = [json.loads(line) for line in path.read_text("utf-8").splitlines() if line.strip()]
    sender = ReportSender(endpoint)
    keep = []
    sent = 0
    for payload in pending:
        status, _ = sender.post(payload)
        if status == 200:
            sent += 1
        elif status is None or status == 503:
            keep.append(payload)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("".join(json.dumps(p) + "\n" for p in keep), encoding="utf-8")
    tmp.replace(path)
    return sent, len(keep)
