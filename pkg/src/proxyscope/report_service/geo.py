"""Longest-prefix CIDR → country lookup."""

from __future__ import annotations

import ipaddress
from pathlib import Path
from typing import Iterable

from ..errors import ParameterError

UNKNOWN_COUNTRY = "??"


class GeoDatabase:
    """In-memory ``cidr,iso2`` table.

    Lookups try each prefix length present in the table, longest first, so
    cost is bounded by the number of distinct prefix lengths (at most 33 or
    129), not the number of ranges.
    """

    def __init__(self, entries: Iterable[tuple[str, str]] = ()):
        self._tables: dict[int, dict[int, dict[int, str]]] = {4: {}, 6: {}}
        self._lengths: dict[int, list[int]] = {4: [], 6: []}
        self.size = 0
        for cidr, country in entries:
            self.add(cidr, country)

    def add(self, cidr: str, country: str) -> None:
        net = ipaddress.ip_network(cidr.strip(), strict=False)
        table = self._tables[net.version].setdefault(net.prefixlen, {})
        if net.prefixlen not in self._lengths[net.version]:
            self._lengths[net.version].append(net.prefixlen)
            self._lengths[net.version].sort(reverse=True)
        table[int(net.network_address)] = country.strip().upper()
        self.size += 1

    def lookup(self, ip: str) -> str:
        try:
            addr = ipaddress.ip_address(ip.strip() if isinstance(ip, str) else ip)
        except ValueError:
            raise ParameterError(f"malformed IP address {ip!r}") from None
        if addr.version == 6 and addr.ipv4_mapped:
            addr = addr.ipv4_mapped
        value = int(addr)
        width = addr.max_prefixlen
        tables = self._tables[addr.version]
        for length in self._lengths[addr.version]:
            mask = ((1 << length) - 1) << (width - length) if length else 0
            hit = tables[length].get(value & mask)
            if hit is not None:
                return hit
        return UNKNOWN_COUNTRY

    @classmethod
    def from_csv(cls, source: str | Path) -> "GeoDatabase":
        """Parse ``cidr,iso2`` lines; ``#`` starts a comment. ``source`` is a path or the text."""
        text = source.read_text("utf-8") if isinstance(source, Path) else source
        db = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 2 or not parts[1]:
                raise ValueError(f"geo csv line {lineno}: expected 'cidr,iso2'")
            try:
                db.add(parts[0], parts[1])
            except ValueError as exc:
                raise ValueError(f"geo csv line {lineno}: {exc}") from None
        return db


class MaxMindGeo:
    """Adapter over a MaxMind ``.mmdb`` country database (needs ``maxminddb``)."""

    def __init__(self, reader):
        self._reader = reader

    @classmethod
    def open(cls, path: str | Path) -> "MaxMindGeo":
        import maxminddb

        return cls(maxminddb.open_database(str(path)))

    def lookup(self, ip: str) -> str:
        try:
            ipaddress.ip_address(ip)
        except ValueError:
            raise ParameterError(f"malformed IP address {ip!r}") from None
        record = self._reader.get(ip) or {}
        country = record.get("country") or record.get("registered_country") or {}
        return country.get("iso_code") or UNKNOWN_COUNTRY


def load_geo(path: str | Path | None):
    if path is None:
        return GeoDatabase()
    path = Path(path)
    if path.suffix == ".mmdb":
        return MaxMindGeo.open(path)
    return GeoDatabase.from_csv(path)
