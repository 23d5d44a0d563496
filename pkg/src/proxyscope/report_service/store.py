"""Append-only measurement log plus a content-addressed chain store.

Layout under the store root::

    records.jsonl        one MeasurementRecord per line, append-only
    rejects.jsonl        refused reports
    authoritative.jsonl  every AuthoritativeEntry version ever used for a verdict
    blobs/<sha256>.pem   observed and authoritative chains, deduplicated
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import os
import threading
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from ..cert_model import Verdict, decode_concatenated_pem, encode_concatenated_pem
from ..classifier import NegligenceReport, ProxyCategory
from ..tls_probe import ProbeTarget, RawChain


def _ts(value: dt.datetime) -> str:
    return value.astimezone(dt.timezone.utc).isoformat()


def _parse_ts(text: str) -> dt.datetime:
    return dt.datetime.fromisoformat(text)


def target_to_dict(t: ProbeTarget) -> dict:
    return {"host": t.host, "port": t.port, "server_name": t.server_name}


def target_from_dict(d: dict) -> ProbeTarget:
    return ProbeTarget(d["host"], int(d["port"]), d.get("server_name"))


@dataclass(frozen=True)
class MeasurementRecord:
    id: str
    received_at: dt.datetime
    client_ip: str
    country: str
    target: ProbeTarget
    observed_leaf_fp: bytes
    authoritative_leaf_fp: bytes
    verdict: Verdict
    observed_chain_ref: str
    category: ProxyCategory | None = None
    negligence: NegligenceReport | None = None
    issuer_org: str | None = None
    authoritative_version: int | None = None

    def __post_init__(self):
        mismatch = self.verdict is Verdict.MISMATCH
        if mismatch != (self.category is not None) or mismatch != (self.negligence is not None):
            raise ValueError("category and negligence are set exactly on mismatch")

    @staticmethod
    def new_id() -> str:
        return uuid.uuid4().hex

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "received_at": _ts(self.received_at),
            "client_ip": self.client_ip,
            "country": self.country,
            "target": target_to_dict(self.target),
            "observed_leaf_fp": self.observed_leaf_fp.hex(),
            "authoritative_leaf_fp": self.authoritative_leaf_fp.hex(),
            "verdict": self.verdict.value,
            "observed_chain_ref": self.observed_chain_ref,
            "category": self.category.value if self.category else None,
            "negligence": self.negligence.to_dict() if self.negligence else None,
            "issuer_org": self.issuer_org,
            "authoritative_version": self.authoritative_version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MeasurementRecord":
        return cls(
            id=d["id"],
            received_at=_parse_ts(d["received_at"]),
            client_ip=d["client_ip"],
            country=d["country"],
            target=target_from_dict(d["target"]),
            observed_leaf_fp=bytes.fromhex(d["observed_leaf_fp"]),
            authoritative_leaf_fp=bytes.fromhex(d["authoritative_leaf_fp"]),
            verdict=Verdict(d["verdict"]),
            observed_chain_ref=d["observed_chain_ref"],
            category=ProxyCategory(d["category"]) if d.get("category") else None,
            negligence=NegligenceReport.from_dict(d["negligence"]) if d.get("negligence") else None,
            issuer_org=d.get("issuer_org"),
            authoritative_version=d.get("authoritative_version"),
        )


def chain_id(chain: RawChain) -> str:
    """Content address of a chain: SHA-256 of its canonical PEM encoding."""
    return hashlib.sha256(encode_concatenated_pem(chain).encode("ascii")).hexdigest()


class RecordStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.blob_dir = self.root / "blobs"
        self.blob_dir.mkdir(parents=True, exist_ok=True)
        self.records_path = self.root / "records.jsonl"
        self.rejects_path = self.root / "rejects.jsonl"
        self.authoritative_path = self.root / "authoritative.jsonl"
        self._write_lock = threading.Lock()

    # chains

    def put_chain(self, chain: RawChain) -> str:
        ref = chain_id(chain)
        path = self.blob_dir / f"{ref}.pem"
        if not path.exists():
            tmp = path.with_suffix(f".{uuid.uuid4().hex}.tmp")
            tmp.write_text(encode_concatenated_pem(chain), encoding="ascii")
            os.replace(tmp, path)
        return ref

    def get_chain(self, ref: str) -> RawChain:
        return decode_concatenated_pem((self.blob_dir / f"{ref}.pem").read_text("ascii"))

    def blob_count(self) -> int:
        return sum(1 for _ in self.blob_dir.glob("*.pem"))

    # logs

    def _append(self, path: Path, obj: dict) -> None:
        line = json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"
        with self._write_lock:
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())

    def append_record(self, record: MeasurementRecord) -> None:
        self._append(self.records_path, record.to_dict())

    def append_reject(self, reason: str, detail: str, client_ip: str, target: str | None,
                      at: dt.datetime) -> None:
        self._append(self.rejects_path, {
            "at": _ts(at), "reason": reason, "detail": detail,
            "client_ip": client_ip, "target": target,
        })

    def append_authoritative(self, entry: dict) -> None:
        self._append(self.authoritative_path, entry)

    @staticmethod
    def _lines(path: Path) -> Iterator[dict]:
        if not path.exists():
            return
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    yield json.loads(line)

    def iter_records(self) -> Iterator[MeasurementRecord]:
        for d in self._lines(self.records_path):
            yield MeasurementRecord.from_dict(d)

    def iter_rejects(self) -> Iterator[dict]:
        return self._lines(self.rejects_path)

    def iter_authoritative(self) -> Iterator[dict]:
        return self._lines(self.authoritative_path)
