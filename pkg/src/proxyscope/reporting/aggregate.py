"""Prevalence tables and heatmap export over measurement records.

Records are turned into a columnar ``RecordBatch`` (integer codes plus a
vocabulary per column) so that multi-million-row synthetic sets aggregate in
one pass of the counting kernel.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from decimal import Decimal
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..cert_model import Verdict
from ..errors import AggregationError
from ._kernels import grouped_counts

DIMENSIONS = ("country", "host_type", "category", "issuer_org", "target")
# share-of-proxied tables: no total column
SHARE_DIMENSIONS = ("category", "issuer_org")
TOTAL_KEY = "Total"
NULL_ISSUER = "Null"
UNATTRIBUTED = "(unattributed)"


def round_half_up(value: Fraction, places: int) -> Decimal:
    scale = 10 ** places
    q, r = divmod(value.numerator * scale, value.denominator)
    if 2 * r >= value.denominator:
        q += 1
    return Decimal(q).scaleb(-places)


@dataclass(frozen=True)
class PrevalenceRow:
    key: str
    proxied: int
    total: int | None
    percent: Fraction | None

    def __post_init__(self):
        if self.proxied < 0 or (self.total is not None and not self.proxied <= self.total):
            raise ValueError(f"row {self.key}: need 0 <= proxied <= total")

    def rounded(self, places: int = 2) -> Decimal | None:
        return None if self.percent is None else round_half_up(self.percent, places)

    @property
    def display_percent(self) -> str:
        r = self.rounded()
        return "—" if r is None else f"{r}"


class RecordBatch:
    """Columns of integer codes into per-column vocabularies, plus a proxied flag."""

    def __init__(self, columns: Mapping[str, tuple[np.ndarray, Sequence]], proxied: np.ndarray):
        self.proxied = np.asarray(proxied, dtype=np.bool_)
        self.columns = {}
        for name, (codes, vocab) in columns.items():
            codes = np.asarray(codes, dtype=np.int64)
            if codes.shape != self.proxied.shape:
                raise ValueError(f"column {name} length differs from proxied flags")
            self.columns[name] = (codes, tuple(vocab))

    def __len__(self) -> int:
        return int(self.proxied.shape[0])

    @classmethod
    def from_records(cls, records: Iterable) -> "RecordBatch":
        values: dict[str, list] = {"country": [], "target": [], "category": [], "issuer_org": []}
        flags = []
        for r in records:
            mismatch = r.verdict is Verdict.MISMATCH
            flags.append(mismatch)
            values["country"].append(r.country)
            values["target"].append(r.target.host)
            values["category"].append(r.category.label if r.category else (UNATTRIBUTED if mismatch else None))
            values["issuer_org"].append(((r.issuer_org or "").strip() or NULL_ISSUER) if mismatch else None)
        columns = {}
        for name, col in values.items():
            vocab: dict = {}
            codes = np.fromiter((vocab.setdefault(v, len(vocab)) for v in col), np.int64, len(col))
            columns[name] = (codes, list(vocab))
        return cls(columns, np.array(flags, dtype=np.bool_))

    @classmethod
    def from_counts(cls, column: str, rows: Iterable[tuple[str | None, int, int]]) -> "RecordBatch":
        """Synthetic batch with ``proxied`` flagged and ``total - proxied`` clean records per key."""
        rows = list(rows)
        vocab = [k for k, _, _ in rows]
        proxied = np.array([p for _, p, _ in rows], dtype=np.int64)
        totals = np.array([t for _, _, t in rows], dtype=np.int64)
        if np.any(proxied < 0) or np.any(proxied > totals):
            raise ValueError("need 0 <= proxied <= total for every row")
        idx = np.arange(len(rows), dtype=np.int64)
        codes = np.concatenate([np.repeat(idx, proxied), np.repeat(idx, totals - proxied)])
        flags = np.zeros(codes.shape[0], dtype=np.bool_)
        flags[: int(proxied.sum())] = True
        return cls({column: (codes, vocab)}, flags)


def _as_batch(records) -> RecordBatch:
    return records if isinstance(records, RecordBatch) else RecordBatch.from_records(records)


def _host_type_codes(codes: np.ndarray, vocab: Sequence, host_types: Mapping[str, str]):
    labels: dict[str, int] = {}
    remap = np.empty(len(vocab), dtype=np.int64)
    present = np.bincount(codes, minlength=len(vocab)) > 0
    for i, host in enumerate(vocab):
        label = host_types.get(host)
        if label is None:
            if present[i]:
                raise AggregationError(f"target {host!r} has no host type")
        remap[i] = labels.setdefault(label, len(labels))
    return remap[codes], list(labels)


def prevalence_by(records, dimension: str, host_types: Mapping[str, str] | None = None) -> list[PrevalenceRow]:
    """One row per key, sorted by proxied count descending, then a Total row.

    For ``category`` and ``issuer_org`` only proxied records count, ``total``
    is None and ``percent`` is each key's share of all proxied records.
    """
    if dimension not in DIMENSIONS:
        raise AggregationError(f"unknown dimension {dimension!r}")
    batch = _as_batch(records)
    column = "target" if dimension == "host_type" else dimension
    if column not in batch.columns:
        if len(batch) == 0:
            codes, vocab = np.zeros(0, np.int64), ()
        else:
            raise AggregationError(f"records carry no {column!r} column")
    else:
        codes, vocab = batch.columns[column]
    flags = batch.proxied
    if dimension == "host_type":
        if host_types is None:
            raise AggregationError("host_type needs a host type map")
        codes, vocab = _host_type_codes(codes, vocab, host_types)

    share = dimension in SHARE_DIMENSIONS
    if share:
        codes = codes[flags]
        flags = flags[flags]
    proxied, total = grouped_counts(codes, flags, len(vocab))

    grand_proxied = int(proxied.sum())
    grand_total = int(total.sum())
    rows = []
    for i, key in enumerate(vocab):
        # share tables keep explicit zero rows; others need a denominator
        if key is None or (total[i] == 0 and not share):
            continue
        p = int(proxied[i])
        if share:
            rows.append(PrevalenceRow(str(key), p, None,
                                      Fraction(100 * p, grand_proxied) if grand_proxied else None))
        else:
            t = int(total[i])
            rows.append(PrevalenceRow(str(key), p, t, Fraction(100 * p, t)))
    rows.sort(key=lambda r: (-r.proxied, r.key))
    if share:
        rows.append(PrevalenceRow(TOTAL_KEY, grand_proxied, None,
                                  Fraction(100) if grand_proxied else None))
    else:
        rows.append(PrevalenceRow(TOTAL_KEY, grand_proxied, grand_total,
                                  Fraction(100 * grand_proxied, grand_total) if grand_total else None))
    return rows


def distinct_key_counts(rows: Sequence[PrevalenceRow]) -> dict[str, int]:
    """How many keys were observed at all, and how many had any proxied record."""
    body = [r for r in rows if r.key != TOTAL_KEY]
    return {"observed": len(body), "proxied": sum(1 for r in body if r.proxied)}


def _is_iso2(key: str) -> bool:
    return len(key) == 2 and key.isascii() and key.isalpha() and key.isupper()


def _format_rate(value: Decimal) -> str:
    text = f"{value:f}".rstrip("0")
    return text + "0" if text.endswith(".") else text


def export_heatmap(rows: Sequence[PrevalenceRow], min_total: int = 1, places: int = 4) -> list[str]:
    """``iso2,rate`` lines (header first) for countries with at least ``min_total`` connections.

    Keys that are not ISO 3166 alpha-2 codes (Total, "??", aggregates) are skipped.
    """
    lines = ["iso2,rate"]
    for r in rows:
        if r.total is None or r.total < min_total or r.total == 0 or not _is_iso2(r.key):
            continue
        lines.append(f"{r.key},{_format_rate(round_half_up(Fraction(r.proxied, r.total), places))}")
    return lines


def rows_to_csv(rows: Sequence[PrevalenceRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    share = rows and rows[-1].total is None
    writer.writerow(["key", "proxied", "percent"] if share else ["key", "proxied", "total", "percent"])
    for r in rows:
        pct = "" if r.percent is None else str(r.rounded())
        writer.writerow([r.key, r.proxied, pct] if share else [r.key, r.proxied, r.total, pct])
    return buf.getvalue()


def rows_to_text(rows: Sequence[PrevalenceRow], title: str | None = None) -> str:
    share = rows and rows[-1].total is None
    header = ["Key", "Proxied", "Percent"] if share else ["Key", "Proxied", "Total", "Percent"]
    body = []
    for r in rows:
        pct = r.display_percent + ("%" if r.percent is not None else "")
        cells = [r.key, f"{r.proxied:,}", pct] if share else [r.key, f"{r.proxied:,}", f"{r.total:,}", pct]
        body.append(cells)
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]

    def fmt(cells):
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))

    out = [title] if title else []
    out += [fmt(header), "  ".join("-" * w for w in widths)]
    out += [fmt(c) for c in body]
    return "\n".join(out) + "\n"
