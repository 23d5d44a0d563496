"""Just enough DER to slice certificates apart and splice them back together.

The heavy lifting of X.509 decoding is left to ``cryptography``; this module
exists for the few things it does not expose: raw Name encodings, byte offsets
of structural errors, and re-signing a TBSCertificate under a legacy hash.
"""

from __future__ import annotations

from typing import NamedTuple

SEQUENCE = 0x30
BIT_STRING = 0x03
NULL = 0x05
OID = 0x06


class TLV(NamedTuple):
    tag: int
    start: int  # offset of the tag byte
    content: int  # offset of the first content byte
    end: int  # one past the last content byte


class DERError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


def read_tlv(buf: bytes, offset: int = 0, limit: int | None = None) -> TLV:
    limit = len(buf) if limit is None else limit
    if offset + 2 > limit:
        raise DERError("truncated header", offset)
    tag = buf[offset]
    if tag & 0x1F == 0x1F:
        raise DERError("multi-byte tags unsupported", offset)
    first = buf[offset + 1]
    pos = offset + 2
    if first < 0x80:
        length = first
    elif first == 0x80:
        raise DERError("indefinite length", offset + 1)
    else:
        n = first & 0x7F
        if n > 4 or pos + n > limit:
            raise DERError("bad length-of-length", offset + 1)
        length = int.from_bytes(buf[pos : pos + n], "big")
        pos += n
    if pos + length > limit:
        raise DERError("length exceeds available bytes", offset)
    return TLV(tag, offset, pos, pos + length)


def children(buf: bytes, parent: TLV) -> list[TLV]:
    out = []
    pos = parent.content
    while pos < parent.end:
        tlv = read_tlv(buf, pos, parent.end)
        out.append(tlv)
        pos = tlv.end
    return out


def first_error_offset(buf: bytes) -> int | None:
    """Offset of the first structural DER inconsistency, or None if the framing is sound."""

    def walk(start: int, end: int) -> None:
        pos = start
        while pos < end:
            tlv = read_tlv(buf, pos, end)
            if tlv.tag & 0x20:
                walk(tlv.content, tlv.end)
            pos = tlv.end

    try:
        top = read_tlv(buf, 0)
        if top.tag != SEQUENCE:
            return 0
        if top.end != len(buf):
            return top.end
        walk(top.content, top.end)
    except DERError as exc:
        return exc.offset
    return None


def encode_length(n: int) -> bytes:
    if n < 0x80:
        return bytes([n])
    raw = n.to_bytes((n.bit_length() + 7) // 8, "big")
    return bytes([0x80 | len(raw)]) + raw


def encode(tag: int, content: bytes) -> bytes:
    return bytes([tag]) + encode_length(len(content)) + content


def encode_oid(dotted: str) -> bytes:
    arcs = [int(a) for a in dotted.split(".")]
    body = bytearray([40 * arcs[0] + arcs[1]])
    for arc in arcs[2:]:
        chunk = [arc & 0x7F]
        arc >>= 7
        while arc:
            chunk.append(0x80 | (arc & 0x7F))
            arc >>= 7
        body.extend(reversed(chunk))
    return encode(OID, bytes(body))


def tbs_fields(tbs: bytes) -> list[TLV]:
    """Top-level fields of a TBSCertificate with the optional [0] version dropped."""
    fields = children(tbs, read_tlv(tbs))
    if fields and fields[0].tag == 0xA0:
        fields = fields[1:]
    return fields


def tbs_issuer_subject(tbs: bytes) -> tuple[bytes, bytes]:
    # serial, signature, issuer, validity, subject, ...
    f = tbs_fields(tbs)
    issuer, subject = f[2], f[4]
    return tbs[issuer.start : issuer.end], tbs[subject.start : subject.end]
