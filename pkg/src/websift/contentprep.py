"""Body normalization: undo transfer framing and (chained) content codings.

Stored bodies arrive as on-wire bytes; before scanning or feature
extraction the chunked transfer framing is removed first, then every
content coding is undone in reverse header order.  Guards against
decompression bombs cap the output instead of failing: oversized results
come back truncated and flagged, since a truncated body is still worth
scanning while an exception would lose the record.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

# Absolute output cap and bomb ratio; a stream is cut off at
# min(OUTPUT_CAP, BOMB_RATIO * len(compressed input)).
OUTPUT_CAP = 64 * 1024 * 1024
BOMB_RATIO = 128

KNOWN_CODINGS = frozenset(["gzip", "x-gzip", "deflate", "identity"])


class BodyDecodeError(ValueError):
    """Corrupt stream while undoing one coding; carries the coding name."""

    def __init__(self, coding: str, message: str):
        super().__init__(f"{coding}: {message}")
        self.coding = coding


@dataclass
class DecodedBody:
    data: bytes
    applied_codings: list[str] = field(default_factory=list)
    truncated: bool = False
    declared_type: str = ""
    # codings declared but not undone because an unknown coding was reached
    pending_codings: list[str] = field(default_factory=list)


def _header_values(headers, name: str) -> list[str]:
    """All values for `name`, case-insensitive; accepts pair lists or dicts."""
    if hasattr(headers, "items"):
        items = headers.items()
    else:
        items = headers
    out = []
    low = name.lower()
    for k, v in items:
        if k.lower() == low:
            out.append(v)
    return out


def _coding_list(headers, name: str) -> list[str]:
    tokens: list[str] = []
    for value in _header_values(headers, name):
        for part in value.split(","):
            tok = part.strip().lower()
            if ";" in tok:
                tok = tok.split(";", 1)[0].strip()
            if tok:
                tokens.append(tok)
    return tokens


def declared_media_type(headers) -> str:
    values = _header_values(headers, "Content-Type")
    if not values:
        return ""
    return values[0].split(";", 1)[0].strip().lower()


def dechunk(raw: bytes) -> bytes:
    """Remove HTTP/1.1 chunked transfer framing."""
    out = bytearray()
    i = 0
    n = len(raw)
    while True:
        j = raw.find(b"\r\n", i)
        if j < 0:
            raise BodyDecodeError("chunked", f"missing chunk size line at byte {i}")
        size_token = raw[i:j].split(b";", 1)[0].strip()
        try:
            size = int(size_token, 16)
        except ValueError:
            raise BodyDecodeError("chunked", f"bad chunk size {size_token!r} at byte {i}")
        i = j + 2
        if size == 0:
            # optional trailers, then a blank line
            while True:
                k = raw.find(b"\r\n", i)
                if k < 0:
                    raise BodyDecodeError("chunked", "missing final CRLF")
                line = raw[i:k]
                i = k + 2
                if not line:
                    return bytes(out)
        if i + size + 2 > n:
            raise BodyDecodeError("chunked", f"truncated chunk data at byte {i}")
        out += raw[i:i + size]
        i += size
        if raw[i:i + 2] != b"\r\n":
            raise BodyDecodeError("chunked", f"missing chunk terminator at byte {i}")
        i += 2


def _inflate(data: bytes, coding: str, limit: int) -> tuple[bytes, bool]:
    """Undo one gzip/deflate coding, bounded by `limit` output bytes."""
    if coding in ("gzip", "x-gzip"):
        wbits = 16 + zlib.MAX_WBITS
    else:
        # deflate: sniff zlib wrapper (CMF/FLG checksum) vs raw stream
        if len(data) >= 2 and (data[0] & 0x0F) == 8 and ((data[0] << 8) | data[1]) % 31 == 0:
            wbits = zlib.MAX_WBITS
        else:
            wbits = -zlib.MAX_WBITS
    try:
        dec = zlib.decompressobj(wbits)
        out = dec.decompress(data, limit)
    except zlib.error as exc:
        raise BodyDecodeError(coding, str(exc)) from exc
    if dec.unconsumed_tail:
        # output hit the limit with input left over: the cap binds
        return out, True
    if not dec.eof:
        # zlib only raises on malformed data; a stream that simply stops
        # early must be reported explicitly
        raise BodyDecodeError(coding, "incomplete compressed stream")
    return out, False


def decode_body(raw: bytes, headers, cap: int = OUTPUT_CAP,
                bomb_ratio: int = BOMB_RATIO) -> DecodedBody:
    """Normalize an on-wire body according to its headers.

    Chunked transfer framing is removed first, then content codings are
    undone outermost first (reverse of header order).  Unknown codings
    stop the chain; whatever was not undone is reported in
    pending_codings.  Exceeding min(cap, bomb_ratio * input size) truncates
    and flags the result rather than raising.
    """
    declared = declared_media_type(headers)
    transfer = _coding_list(headers, "Transfer-Encoding")
    content = _coding_list(headers, "Content-Encoding")

    data = raw
    applied: list[str] = []
    if transfer and transfer[-1] == "chunked":
        data = dechunk(data)
        applied.append("chunked")
        transfer = transfer[:-1]

    # outermost-first decode order: remaining transfer codings (reversed),
    # then content codings (reversed)
    chain = list(reversed(transfer)) + list(reversed(content))
    truncated = False
    pending: list[str] = []
    for idx, coding in enumerate(chain):
        if coding not in KNOWN_CODINGS:
            pending = chain[idx:]
            break
        if coding == "identity":
            applied.append(coding)
            continue
        limit = min(cap, bomb_ratio * max(1, len(data)))
        data, truncated = _inflate(data, coding, limit)
        applied.append(coding)
        if truncated:
            pending = chain[idx + 1:]
            break

    return DecodedBody(
        data=data,
        applied_codings=applied,
        truncated=truncated,
        declared_type=declared,
        pending_codings=pending,
    )
